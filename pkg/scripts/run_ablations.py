"""Train every ablation arm on the biased synthetic corpus and print a
purchase/click HR and NDCG table, plus cumulative reward@1.

    python3 scripts/run_ablations.py --arms prl plain prl_wo prl_cumu --out ablations.csv
"""

import argparse
import csv
import sys
import time

from prl.data import CLICK, PURCHASE
from prl.evaluation import InferenceRewardConfig
from prl.experiments import ARMS, PRESETS, prepare


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", choices=sorted(PRESETS), default="biased")
    ap.add_argument("--arms", nargs="+", choices=sorted(ARMS), default=list(ARMS))
    ap.add_argument("--encoder", choices=("gru", "attn"), default="gru")
    ap.add_argument("--mu", type=float, default=2.0)
    ap.add_argument("--out", help="optional CSV path")
    args = ap.parse_args(argv)

    prep = prepare(PRESETS[args.preset])
    print(f"{len(prep.prompts)} training prompts, {len(prep.split.test)} test sessions")
    header = ["arm", "seconds"]
    for b in (PURCHASE, CLICK):
        header += [f"{b}_hr5", f"{b}_ng5", f"{b}_hr10", f"{b}_ng10"]
    header.append("cumulative_reward_at_1")
    rows = []
    for arm in args.arms:
        start = time.perf_counter()
        model = prep.fit(arm, encoder=args.encoder)
        rep = prep.evaluate(model, InferenceRewardConfig(mu=args.mu))
        row = [arm, f"{time.perf_counter() - start:.1f}"]
        for b in (PURCHASE, CLICK):
            row += [f"{rep.hr[b][5]:.4f}", f"{rep.ndcg[b][5]:.4f}",
                    f"{rep.hr[b][10]:.4f}", f"{rep.ndcg[b][10]:.4f}"]
        row.append(f"{rep.cumulative_reward_at_1:.2f}")
        rows.append(row)
        print("  ".join(row), flush=True)

    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
