"""Sweep the inference prompt scale mu and noise epsilon for one trained PRL model."""

import argparse
import sys

from prl.evaluation import InferenceRewardConfig, sweep_csv
from prl.experiments import PRESETS, prepare

MU_GRID = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0]
EPS_GRID = [0.0, 0.25, 0.5, 1.0, 2.0]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", choices=sorted(PRESETS), default="biased")
    ap.add_argument("--seed", type=int, default=0, help="seed for the epsilon noise")
    ap.add_argument("--out-prefix", help="write <prefix>_mu.csv and <prefix>_epsilon.csv")
    args = ap.parse_args(argv)

    prep = prepare(PRESETS[args.preset])
    model = prep.fit("prl")
    base = InferenceRewardConfig(mu=2.0, seed=args.seed)
    for param, grid in (("mu", MU_GRID), ("epsilon", EPS_GRID)):
        text = sweep_csv(prep.sweep(model, param, grid, base))
        print(f"# {param}\n{text}")
        if args.out_prefix:
            with open(f"{args.out_prefix}_{param}.csv", "w") as fh:
                fh.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
