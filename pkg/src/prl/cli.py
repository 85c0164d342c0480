"""Command-line entry point: prepare, train, evaluate, sweep, synth.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from contextlib import contextmanager
from dataclasses import asdict, replace
from pathlib import Path

import filelock

from prl import data as D
from prl.checkpoint import load_checkpoint
from prl.config import DATASET_MODES, RunConfig, build, config_hash, load_file, parse_ints, to_dict
from prl.evaluation import evaluate, evaluate_runs, sweep, sweep_csv, write_text
from prl.model import BLOCK_VARIANTS, LOSS_WEIGHT_MODES, TrainingDiverged, baseline_config, train

logger = logging.getLogger("prl")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# argument parsing

# flag dest -> dotted config key
FLAG_KEYS = {
    "work_dir": "work_dir", "input": "input", "buys": "buys", "checkpoint": "checkpoint",
    "format": "dataset_mode", "min_item_count": "min_item_count",
    "max_sessions": "max_sessions", "runs": "runs", "ks": "ks", "seed": "seed",
    "r_click": "reward.r_click", "r_purchase": "reward.r_purchase",
    "lam": "reward.discount", "discount_mode": "reward.discount_mode",
    "encoder": "train.encoder", "block_variant": "train.block_variant",
    "loss_weight": "train.loss_weight_mode", "epochs": "train.epochs", "lr": "train.lr",
    "batch_size": "train.batch_size", "dropout": "train.dropout",
    "embed_dim": "train.embed_dim", "layer_norm": "train.layer_norm",
    "mu": "inference.mu", "epsilon": "inference.epsilon",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file of flat dotted keys")
    p.add_argument("--work-dir", help="directory holding prepared data and outputs")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _inference(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", help="checkpoint path (default: <work-dir>/checkpoints/model.ckpt)")
    p.add_argument("--mu", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--split", choices=("test", "valid"), default="test")
    p.add_argument("--ks", help="comma-separated cutoffs, default 5,10,20")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest, filter, split and build the prompt set")
    _common(p)
    p.add_argument("--input", help="session TSV or raw event CSV (clicks file for challenge15)")
    p.add_argument("--buys", help="challenge15 buys file")
    p.add_argument("--format", choices=DATASET_MODES)
    p.add_argument("--min-item-count", type=int)
    p.add_argument("--max-sessions", type=int, help="random sample of sessions after filtering")
    p.add_argument("--lambda", dest="lam", type=float, help="reward discount")
    p.add_argument("--discount-mode", choices=("absolute", "relative"))
    p.add_argument("--r-click", type=float)
    p.add_argument("--r-purchase", type=float)
    _synth_flags(p, required=False)

    p = sub.add_parser("train", help="train a PRL model on prepared data")
    _common(p)
    p.add_argument("--encoder", choices=("gru", "attn"))
    p.add_argument("--block-variant", choices=BLOCK_VARIANTS)
    p.add_argument("--loss-weight", choices=LOSS_WEIGHT_MODES)
    p.add_argument("--baseline", action="store_true",
                   help="plain cross-entropy on the encoder state, no prompt")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--layer-norm", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--checkpoint-dir")
    p.add_argument("--mu", type=float, help="prompt scale for validation")
    p.add_argument("--epsilon", type=float)

    p = sub.add_parser("evaluate", help="HR/NDCG report for a checkpoint")
    _common(p)
    _inference(p)
    p.add_argument("--runs", type=int, help="average over this many evaluation seeds")
    p.add_argument("--out", help="output prefix (default: <work-dir>/report_<split>)")

    p = sub.add_parser("sweep", help="cumulative reward@1 over a grid of mu or epsilon")
    _common(p)
    _inference(p)
    p.add_argument("--param", choices=("mu", "epsilon"), required=True)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--out", help="CSV path (default: <work-dir>/sweep_<param>.csv)")

    p = sub.add_parser("synth", help="write a synthetic canonical session file")
    _common(p)
    p.add_argument("--out", required=True)
    _synth_flags(p, required=True)
    return parser


def _synth_flags(p: argparse.ArgumentParser, required: bool) -> None:
    p.add_argument("--sessions", type=int, required=required)
    p.add_argument("--vocab", type=int, required=required)
    p.add_argument("--min-len", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--purchase-bias", type=float)
    p.add_argument("--click-branches", type=int)


def run_config(args: argparse.Namespace) -> RunConfig:
    file_values = load_file(args.config) if getattr(args, "config", None) else {}
    overrides = {}
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    return build(file_values, overrides)


# helpers


@contextmanager
def locked(work_dir: Path):
    work_dir.mkdir(parents=True, exist_ok=True)
    lock = filelock.FileLock(str(work_dir / ".lock"), timeout=0)
    try:
        lock.acquire()
    except filelock.Timeout:
        raise CliError(f"{work_dir} is in use by another prl process", EXIT_IO) from None
    try:
        yield
    finally:
        lock.release()


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    write_text(path, buf.getvalue())


def with_provenance(text: str, digest: str, seed: int) -> str:
    """Append ``config_hash`` and ``seed`` columns to a CSV string."""
    lines = text.rstrip("\n").split("\n")
    out = [lines[0] + ",config_hash,seed"] + [f"{ln},{digest},{seed}" for ln in lines[1:]]
    return "\n".join(out) + "\n"


def read_manifest(work_dir: Path) -> dict:
    path = work_dir / "manifest.json"
    if not path.exists():
        raise CliError(f"{path} not found; run 'prl prepare' first", EXIT_IO)
    return json.loads(path.read_text(encoding="utf-8"))


def reward_from_manifest(manifest: dict) -> D.RewardConfig:
    return D.RewardConfig(**manifest["reward"])


def synth_spec(args: argparse.Namespace, seed: int) -> D.SynthSpec:
    base = D.SynthSpec(seed=seed)
    changes = {k: getattr(args, k) for k in ("sessions", "vocab", "min_len", "max_len",
                                             "purchase_bias", "click_branches")
               if getattr(args, k, None) is not None}
    return replace(base, **changes)


# commands


def cmd_prepare(args, cfg: RunConfig) -> int:
    work = Path(cfg.work_dir)
    mode = cfg.dataset_mode
    skipped = 0
    item_map: dict[str, int] | None = None
    if mode == "synthetic":
        spec = synth_spec(args, cfg.seed)
        sessions = D.synth_corpus(spec)
        source = {"synthetic": asdict(spec)}
    else:
        if not cfg.input:
            raise CliError("--input is required", EXIT_VALIDATION)
        paths = [Path(cfg.input)] + ([Path(cfg.buys)] if cfg.buys else [])
        for p in paths:
            if not p.is_file():
                raise CliError(f"input not found: {p}", EXIT_IO)
        source = {"input": [str(p) for p in paths]}
        if mode == "canonical":
            sessions = D.read_sessions(paths[0])
        else:
            if mode == "retailrocket":
                rows = list(D.read_event_csv(paths[0], D.RETAILROCKET))
            else:
                rows = list(D.read_event_csv(paths[0], D.CHALLENGE15_CLICKS))
                if cfg.buys:
                    rows += list(D.read_event_csv(paths[1], D.CHALLENGE15_BUYS))
            res = D.ingest_events(rows)
            sessions, item_map, skipped = res.sessions, res.item_map, res.skipped
            if skipped:
                print(f"skipped {skipped} unusable rows", file=sys.stderr)

    min_count = cfg.min_item_count
    if min_count is None and mode == "retailrocket":
        min_count = 3
    sessions = D.filter_sessions(sessions, min_item_count=min_count)
    if cfg.max_sessions is not None and len(sessions) > cfg.max_sessions:
        keep = sorted(D.Rng(cfg.seed).permutation(len(sessions))[:cfg.max_sessions])
        sessions = [sessions[i] for i in keep]
    sessions, compact = D.reindex_items(sessions)
    if item_map is not None:
        raw_of = {v: k for k, v in item_map.items()}
        item_map = {raw_of[old]: new for old, new in compact.items()}
    else:
        item_map = {str(old): new for old, new in compact.items()}
    split = D.split_dataset(sessions, cfg.seed)
    prompts = D.generate_prompts(split.train, cfg.reward)
    table = D.compute_step_reward_averages(prompts)

    digest = config_hash(cfg, ("seed", "dataset_mode", "min_item_count", "max_sessions", "reward"))
    manifest = {
        "config_hash": digest,
        "seed": cfg.seed,
        "dataset_mode": mode,
        "source": source,
        "reward": asdict(cfg.reward),
        "n_items": len(item_map),
        "counts": {
            "sessions": len(sessions),
            "train": len(split.train),
            "valid": len(split.valid),
            "test": len(split.test),
            "prompts": len(prompts),
            "clicks": sum(b == D.CLICK for s in sessions for b in s.behaviors),
            "purchases": sum(b == D.PURCHASE for s in sessions for b in s.behaviors),
            "skipped_rows": skipped,
        },
    }
    # everything is computed before the first write, so failures leave no partial output
    with locked(work):
        D.write_sessions(work / "sessions.tsv", sessions)
        D.write_sessions(work / "train.tsv", split.train)
        D.write_sessions(work / "valid.tsv", split.valid)
        D.write_sessions(work / "test.tsv", split.test)
        D.write_prompts(work / "prompts.tsv", prompts)
        D.write_item_map(work / "item_map.tsv", item_map)
        table.to_csv(work / "step_rewards.csv")
        write_text(work / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(json.dumps(manifest["counts"], sort_keys=True))
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    work = Path(cfg.work_dir)
    manifest = read_manifest(work)
    reward = reward_from_manifest(manifest)
    tcfg = baseline_config(cfg.train) if args.baseline else cfg.train
    cfg = replace(cfg, reward=reward, train=tcfg)
    prompts = D.read_prompts(work / "prompts.tsv")
    valid = D.read_sessions(work / "valid.tsv")
    table = D.StepRewardTable.from_csv(work / "step_rewards.csv")
    ckdir = Path(args.checkpoint_dir) if args.checkpoint_dir else work / "checkpoints"
    digest = config_hash(cfg)
    meta = {"config": to_dict(cfg), "config_hash": digest, "data_hash": manifest["config_hash"]}

    def validate(model) -> float:
        if not valid:
            return 0.0
        rep = evaluate(model, valid, reward, table, cfg.inference, cfg.ks)
        return rep.ndcg[D.PURCHASE][10] if 10 in rep.ks else rep.ndcg[D.PURCHASE][rep.ks[-1]]

    epoch_log = logging.getLogger("prl.model")
    if not epoch_log.handlers:
        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(logging.Formatter("%(message)s"))
        epoch_log.addHandler(handler)
        epoch_log.propagate = False
    epoch_log.setLevel(logging.INFO)
    with locked(work):
        ckdir.mkdir(parents=True, exist_ok=True)
        try:
            result = train(prompts, manifest["n_items"], tcfg, validate=validate,
                           checkpoint_dir=ckdir, meta=meta)
        except TrainingDiverged as exc:
            print(f"training diverged: {exc}; last good checkpoint: {exc.checkpoint}",
                  file=sys.stderr)
            return EXIT_NUMERIC
        per_epoch = max(1, -(-len(prompts) // tcfg.batch_size))
        rows = [[i + 1, i // per_epoch + 1, repr(v), digest, cfg.seed]
                for i, v in enumerate(result.loss_trace)]
        write_csv(work / "loss_trace.csv", ["step", "epoch", "loss", "config_hash", "seed"], rows)
    print(f"checkpoint: {ckdir / 'model.ckpt'} (best epoch {result.best_epoch})")
    return EXIT_OK


def _load_for_inference(cfg: RunConfig, split: str):
    work = Path(cfg.work_dir)
    manifest = read_manifest(work)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else work / "checkpoints" / "model.ckpt"
    if not ckpt.is_file():
        raise CliError(f"checkpoint not found: {ckpt}", EXIT_IO)
    model, _, header = load_checkpoint(ckpt)
    sessions = D.read_sessions(work / f"{split}.tsv")
    table = D.StepRewardTable.from_csv(work / "step_rewards.csv")
    return work, manifest, model, header, sessions, table


def cmd_evaluate(args, cfg: RunConfig) -> int:
    work, manifest, model, header, sessions, table = _load_for_inference(cfg, args.split)
    reward = reward_from_manifest(manifest)
    digest = config_hash(replace(cfg, reward=reward, train=model.config))
    echo = {"config_hash": digest, "seed": cfg.seed, "split": args.split,
            "model": header["config"], "runs": cfg.runs}
    report = evaluate_runs(model, sessions, reward, table, cfg.inference, cfg.runs, cfg.ks, echo)
    prefix = Path(args.out) if args.out else work / f"report_{args.split}"
    with locked(work):
        write_text(prefix.with_suffix(".txt"), report.to_text())
        write_text(prefix.with_suffix(".csv"), with_provenance(report.to_csv(), digest, cfg.seed))
    print(report.to_csv(), end="")
    print(f"cumulative_reward_at_1={report.cumulative_reward_at_1:.6f}")
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    work, manifest, model, header, sessions, table = _load_for_inference(cfg, args.split)
    reward = reward_from_manifest(manifest)
    grid = [float(v) for v in args.grid.split(",") if v.strip()]
    rows = sweep(model, sessions, reward, table, args.param, grid, cfg.inference, cfg.ks)
    digest = config_hash(replace(cfg, reward=reward, train=model.config))
    out = Path(args.out) if args.out else work / f"sweep_{args.param}.csv"
    text = with_provenance(sweep_csv(rows), digest, cfg.seed)
    with locked(work):
        write_text(out, text)
    print(text, end="")
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    sessions = D.synth_corpus(synth_spec(args, cfg.seed))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.write_sessions(out, sessions)
    print(f"wrote {len(sessions)} sessions to {out}")
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "evaluate": cmd_evaluate,
            "sweep": cmd_sweep, "synth": cmd_synth}


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = run_config(args)
        if args.command in ("evaluate", "sweep") and args.ks is None and cfg.ks is None:
            cfg = replace(cfg, ks=parse_ints("5,10,20"))
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ArithmeticError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, IndexError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
