"""Prompted-reward inference and top-k ranking metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from prl.data import BEHAVIORS, CLICK, PURCHASE, RewardConfig, Session, StepRewardTable, generate_prompts
from prl.rng import Rng

DEFAULT_KS = (5, 10, 20)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class InferenceRewardConfig:
    mu: float = 2.0
    epsilon: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


def inference_reward(steps, averages: StepRewardTable, config: InferenceRewardConfig,
                     rng: Rng | None = None):
    """Prompt reward ``g * mean_R[t]`` with one ``g ~ N(mu, epsilon^2)`` per step.

    Scalar in, scalar out; array in, array out. With ``epsilon == 0`` the
    result is exactly ``mu * mean_R[t]``.
    """
    scalar = np.ndim(steps) == 0
    steps = np.atleast_1d(np.asarray(steps, dtype=np.int64))
    rng = Rng(config.seed) if rng is None else rng
    g = config.mu + config.epsilon * rng.normal(len(steps))
    out = g * averages.lookup(steps)
    return float(out[0]) if scalar else out


def rank_items(logits) -> np.ndarray:
    """Item ids (1-based) by descending logit; ties go to the smaller id."""
    logits = np.asarray(logits, dtype=np.float64)
    return np.argsort(-logits, kind="stable") + 1


def target_ranks(logits: np.ndarray, targets) -> np.ndarray:
    """1-based rank of each target under :func:`rank_items` ordering, without a full sort."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    rows = np.arange(len(targets))
    t = logits[rows, targets - 1][:, None]
    ahead = (logits > t).sum(axis=1)
    cols = np.arange(1, logits.shape[1] + 1)[None, :]
    tied_before = ((logits == t) & (cols < targets[:, None])).sum(axis=1)
    return 1 + ahead + tied_before


def hr_ndcg(rank: int, k: int) -> tuple[int, float]:
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if rank <= k:
        return 1, 1.0 / math.log2(rank + 1)
    return 0, 0.0


@dataclass
class EvalReport:
    ks: tuple[int, ...]
    hr: dict[str, dict[int, float]]
    ndcg: dict[str, dict[int, float]]
    counts: dict[str, int]
    cumulative_reward_at_1: float
    config: dict = field(default_factory=dict)

    def check(self) -> None:
        """Raise if a report-level invariant is violated."""
        for b in BEHAVIORS:
            prev_hr = prev_ng = -1.0
            for k in sorted(self.ks):
                hr, ng = self.hr[b][k], self.ndcg[b][k]
                if not (0.0 <= hr <= 1.0 and ng <= hr + 1e-12):
                    raise EvaluationError(f"{b}@{k}: HR={hr}, NDCG={ng} out of range")
                if hr < prev_hr or ng < prev_ng - 1e-12:
                    raise EvaluationError(f"{b}: metrics not monotone in k at k={k}")
                prev_hr, prev_ng = hr, ng

    def rows(self) -> list[list[str]]:
        header = ["behavior"]
        for k in self.ks:
            header += [f"HR@{k}", f"NG@{k}"]
        header.append("count")
        out = [header]
        for b in (PURCHASE, CLICK):
            row = [b]
            for k in self.ks:
                row += [_fmt(self.hr[b][k]), _fmt(self.ndcg[b][k])]
            row.append(str(self.counts[b]))
            out.append(row)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.rows())
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{k}={v}" for k, v in sorted(_flatten(self.config).items())]
        for b in (PURCHASE, CLICK):
            lines.append(f"{b}.count={self.counts[b]}")
            for k in self.ks:
                lines.append(f"{b}.hr@{k}={_fmt(self.hr[b][k])}")
                lines.append(f"{b}.ndcg@{k}={_fmt(self.ndcg[b][k])}")
        lines.append(f"cumulative_reward_at_1={_fmt(self.cumulative_reward_at_1)}")
        return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def metrics_from_ranks(ranks: np.ndarray, purchase: np.ndarray, immediate: np.ndarray,
                       ks: Sequence[int] = DEFAULT_KS, config: dict | None = None) -> EvalReport:
    ks = tuple(sorted(ks))
    hr, ndcg, counts = {}, {}, {}
    for b, mask in ((PURCHASE, purchase), (CLICK, ~purchase)):
        r = ranks[mask]
        counts[b] = int(mask.sum())
        hr[b], ndcg[b] = {}, {}
        for k in ks:
            hits = r <= k
            if counts[b] == 0:
                hr[b][k] = ndcg[b][k] = 0.0
                continue
            hr[b][k] = int(hits.sum()) / counts[b]
            ndcg[b][k] = math.fsum((1.0 / np.log2(r[hits] + 1)).tolist()) / counts[b]
    reward_at_1 = math.fsum(immediate[ranks == 1].tolist())
    return EvalReport(ks, hr, ndcg, counts, reward_at_1, dict(config or {}))


def evaluate(model, sessions: Sequence[Session], reward_config: RewardConfig,
             averages: StepRewardTable, inference: InferenceRewardConfig = InferenceRewardConfig(),
             ks: Sequence[int] = DEFAULT_KS, config: dict | None = None) -> EvalReport:
    """Rank the logged next item at every step of every session.

    ``model`` only needs ``score(rewards, contexts, steps) -> (N, n_items)``.
    Targets are grouped by their own behavior; cumulative reward@1 sums the
    immediate reward of targets ranked first.
    """
    prompts = generate_prompts(sessions, reward_config)
    if len(prompts) == 0:
        raise EvaluationError("no evaluable steps in the test sessions")
    prompted = inference_reward(prompts.steps, averages, inference, Rng(inference.seed))
    logits = model.score(prompted, prompts.contexts, prompts.steps)
    ranks = target_ranks(logits, prompts.actions)
    echo = {"inference": asdict(inference), **(config or {})}
    report = metrics_from_ranks(ranks, prompts.purchase, prompts.immediate, ks, echo)
    report.check()
    return report


def average_reports(reports: Sequence[EvalReport]) -> EvalReport:
    first = reports[0]
    n = len(reports)

    def avg(get):
        return math.fsum(get(r) for r in reports) / n

    hr = {b: {k: avg(lambda r: r.hr[b][k]) for k in first.ks} for b in BEHAVIORS}
    ndcg = {b: {k: avg(lambda r: r.ndcg[b][k]) for k in first.ks} for b in BEHAVIORS}
    return EvalReport(first.ks, hr, ndcg, dict(first.counts),
                      avg(lambda r: r.cumulative_reward_at_1),
                      {**first.config, "runs": n})


def evaluate_runs(model, sessions, reward_config, averages, inference: InferenceRewardConfig,
                  runs: int = 1, ks=DEFAULT_KS, config: dict | None = None) -> EvalReport:
    """Average ``runs`` evaluations with seeds ``seed, seed + 1, ...``."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    reports = [evaluate(model, sessions, reward_config, averages,
                        replace(inference, seed=inference.seed + i), ks, config)
               for i in range(runs)]
    if runs == 1:
        return reports[0]
    report = average_reports(reports)
    report.check()
    return report


SWEEP_COLUMNS = ("parameter", "cumulative_reward_at_1", "hr5_purchase", "ng5_purchase",
                 "hr5_click", "ng5_click")


def sweep(model, sessions, reward_config, averages, parameter: str, grid: Sequence[float],
          base: InferenceRewardConfig = InferenceRewardConfig(), ks=DEFAULT_KS) -> list[dict]:
    """One evaluation per grid value of ``mu`` or ``epsilon``, all with ``base.seed``."""
    if parameter not in ("mu", "epsilon"):
        raise ValueError(f"can only sweep mu or epsilon, not {parameter!r}")
    if not grid:
        raise ValueError("sweep grid is empty")
    ks = tuple(sorted(set(ks) | {5}))
    rows = []
    for value in grid:
        rep = evaluate(model, sessions, reward_config, averages,
                       replace(base, **{parameter: float(value)}), ks)
        rows.append({
            "parameter": float(value),
            "cumulative_reward_at_1": rep.cumulative_reward_at_1,
            "hr5_purchase": rep.hr[PURCHASE][5],
            "ng5_purchase": rep.ndcg[PURCHASE][5],
            "hr5_click": rep.hr[CLICK][5],
            "ng5_click": rep.ndcg[CLICK][5],
        })
    return rows


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([repr(r["parameter"])] + [_fmt(r[c]) for c in SWEEP_COLUMNS[1:]])
    return buf.getvalue()


def write_text(path: str | Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
