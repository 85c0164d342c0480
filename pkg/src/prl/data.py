"""Sessions, reward bookkeeping and prompt-set construction."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from prl.rng import Rng

logger = logging.getLogger(__name__)

CLICK = "click"
PURCHASE = "purchase"
BEHAVIORS = (CLICK, PURCHASE)
CONTEXT_LEN = 10
PAD = 0

# raw event tokens accepted by the CSV adapters
DEFAULT_BEHAVIOR_MAP = {
    "click": CLICK,
    "view": CLICK,
    "purchase": PURCHASE,
    "buy": PURCHASE,
    "addtocart": PURCHASE,
}


class DataError(ValueError):
    pass


@dataclass
class Session:
    session_id: str
    items: list[int]
    behaviors: list[str]

    def __post_init__(self):
        if len(self.items) != len(self.behaviors):
            raise DataError(f"session {self.session_id}: items/behaviors length differ")
        if any(b not in BEHAVIORS for b in self.behaviors):
            raise DataError(f"session {self.session_id}: unknown behavior label")

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class RewardConfig:
    r_click: float = 0.2
    r_purchase: float = 1.0
    discount: float = 0.5
    discount_mode: str = "absolute"

    def __post_init__(self):
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError(f"discount must lie in [0, 1], got {self.discount}")
        if not self.r_purchase >= self.r_click >= 0.0:
            raise ValueError("rewards must satisfy r_purchase >= r_click >= 0")
        if self.discount_mode not in ("absolute", "relative"):
            raise ValueError(f"unknown discount_mode {self.discount_mode!r}")

    def reward(self, behavior: str) -> float:
        return self.r_purchase if behavior == PURCHASE else self.r_click


@dataclass(frozen=True)
class PromptSample:
    cumulative_reward: float
    context: tuple[int, ...]
    step: int
    action: int
    immediate_reward: float


@dataclass
class PromptSet:
    """Column-oriented prompt samples; ``contexts`` is ``(N, CONTEXT_LEN)``."""

    rewards: np.ndarray
    contexts: np.ndarray
    steps: np.ndarray
    actions: np.ndarray
    immediate: np.ndarray
    purchase: np.ndarray  # target behavior flag, used for per-behavior metrics

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, i: int) -> PromptSample:
        return PromptSample(
            float(self.rewards[i]),
            tuple(int(x) for x in self.contexts[i]),
            int(self.steps[i]),
            int(self.actions[i]),
            float(self.immediate[i]),
        )

    def __iter__(self) -> Iterator[PromptSample]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "PromptSet":
        return PromptSet(self.rewards[idx], self.contexts[idx], self.steps[idx],
                         self.actions[idx], self.immediate[idx], self.purchase[idx])

    @classmethod
    def empty(cls) -> "PromptSet":
        return cls(np.zeros(0), np.zeros((0, CONTEXT_LEN), dtype=np.int64),
                   np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                   np.zeros(0), np.zeros(0, dtype=bool))


@dataclass
class DatasetSplit:
    train: list[Session]
    valid: list[Session]
    test: list[Session]


@dataclass
class IngestResult:
    sessions: list[Session]
    item_map: dict[str, int]
    skipped: int = 0
    warnings: list[str] = field(default_factory=list)


# ingestion


def _time_key(raw: str):
    try:
        return (0, float(raw), "")
    except ValueError:
        return (1, 0.0, raw)


def ingest_events(records: Iterable[Sequence[str]],
                  behavior_map: dict[str, str] | None = None) -> IngestResult:
    """Group ``(session_id, timestamp, item, behavior)`` rows into time-ordered sessions.

    Sessions come out in order of first appearance; items are re-indexed
    densely from 1 in order of first appearance across those sessions.
    Malformed rows and unknown behavior tokens are skipped and counted.
    """
    behavior_map = DEFAULT_BEHAVIOR_MAP if behavior_map is None else behavior_map
    events: dict[str, list] = {}
    skipped = 0
    warnings = []
    seen = 0
    for lineno, row in enumerate(records, 1):
        seen += 1
        if len(row) < 4 or not all(str(f).strip() for f in row[:4]):
            skipped += 1
            warnings.append(f"row {lineno}: expected 4 non-empty fields")
            continue
        sid, ts, item, token = (str(f).strip() for f in row[:4])
        behavior = behavior_map.get(token.lower())
        if behavior is None:
            skipped += 1
            warnings.append(f"row {lineno}: unknown behavior {token!r}")
            continue
        events.setdefault(sid, []).append((_time_key(ts), len(events.get(sid, ())), item, behavior))
    if seen == 0:
        raise DataError("no event records in input")
    if not events:
        raise DataError(f"all {skipped} rows were unusable")
    for w in warnings[:20]:
        logger.warning(w)

    item_map: dict[str, int] = {}
    sessions = []
    for sid, evs in events.items():
        evs.sort(key=lambda e: (e[0], e[1]))
        items = []
        for _, _, raw, _ in evs:
            if raw not in item_map:
                item_map[raw] = len(item_map) + 1
            items.append(item_map[raw])
        sessions.append(Session(sid, items, [e[3] for e in evs]))
    return IngestResult(sessions, item_map, skipped, warnings)


@dataclass(frozen=True)
class CsvLayout:
    session_col: str | int
    time_col: str | int
    item_col: str | int
    behavior_col: str | int | None
    has_header: bool = True
    constant_behavior: str | None = None


# RetailRocket events.csv: timestamp,visitorid,event,itemid,transactionid
RETAILROCKET = CsvLayout("visitorid", "timestamp", "itemid", "event")
# RecSys Challenge 2015: yoochoose-clicks.dat / yoochoose-buys.dat, headerless
CHALLENGE15_CLICKS = CsvLayout(0, 1, 2, None, has_header=False, constant_behavior=CLICK)
CHALLENGE15_BUYS = CsvLayout(0, 1, 2, None, has_header=False, constant_behavior=PURCHASE)


def read_event_csv(path: str | Path, layout: CsvLayout) -> Iterator[tuple[str, str, str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = None
        if layout.has_header:
            header = next(reader, None)
            if header is None:
                return
        def col(spec):
            if isinstance(spec, int):
                return spec
            try:
                return header.index(spec)
            except ValueError:
                raise DataError(f"{path}: missing column {spec!r}") from None
        cols = [col(layout.session_col), col(layout.time_col), col(layout.item_col)]
        bcol = None if layout.behavior_col is None else col(layout.behavior_col)
        for row in reader:
            try:
                vals = [row[c] for c in cols]
                token = layout.constant_behavior if bcol is None else row[bcol]
            except IndexError:
                yield tuple(row[:3]) + ("",)  # counted as malformed downstream
                continue
            yield (vals[0], vals[1], vals[2], token)


# canonical TSV


def write_sessions(path: str | Path, sessions: Iterable[Session]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in sessions:
            fh.write(f"{s.session_id}\t{','.join(map(str, s.items))}\t{','.join(s.behaviors)}\n")


def read_sessions(path: str | Path) -> list[Session]:
    sessions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
            try:
                items = [int(x) for x in parts[1].split(",")]
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad item list") from None
            sessions.append(Session(parts[0], items, parts[2].split(",")))
    return sessions


def write_item_map(path: str | Path, item_map: dict[str, int]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for raw, idx in sorted(item_map.items(), key=lambda kv: kv[1]):
            fh.write(f"{raw}\t{idx}\n")


def write_prompts(path: str | Path, prompts: PromptSet) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(len(prompts)):
            ctx = ",".join(str(int(x)) for x in prompts.contexts[i])
            fh.write(f"{float(prompts.rewards[i])!r}\t{ctx}\t{int(prompts.steps[i])}\t"
                     f"{int(prompts.actions[i])}\t{float(prompts.immediate[i])!r}\t"
                     f"{int(prompts.purchase[i])}\n")


def read_prompts(path: str | Path) -> PromptSet:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(line.rstrip("\n").split("\t"))
    if not rows:
        return PromptSet.empty()
    return PromptSet(
        np.array([float(r[0]) for r in rows]),
        np.array([[int(x) for x in r[1].split(",")] for r in rows], dtype=np.int64),
        np.array([int(r[2]) for r in rows], dtype=np.int64),
        np.array([int(r[3]) for r in rows], dtype=np.int64),
        np.array([float(r[4]) for r in rows]),
        np.array([r[5] == "1" for r in rows], dtype=bool),
    )


# filtering and splitting


def filter_sessions(sessions: Sequence[Session], min_len: int = 3, max_len: int = 50,
                    min_item_count: int | None = None) -> list[Session]:
    if min_item_count:
        counts = Counter(i for s in sessions for i in s.items)
        rare = {i for i, c in counts.items() if c < min_item_count}
        pruned = []
        for s in sessions:
            keep = [j for j, i in enumerate(s.items) if i not in rare]
            pruned.append(Session(s.session_id, [s.items[j] for j in keep],
                                  [s.behaviors[j] for j in keep]))
        sessions = pruned
    out = [s for s in sessions if min_len <= len(s) <= max_len]
    if not out:
        raise DataError("every session was removed by filtering")
    return out


def reindex_items(sessions: Sequence[Session]) -> tuple[list[Session], dict[int, int]]:
    """Compact item ids to 1..n in order of first appearance."""
    mapping: dict[int, int] = {}
    out = []
    for s in sessions:
        items = []
        for i in s.items:
            if i not in mapping:
                mapping[i] = len(mapping) + 1
            items.append(mapping[i])
        out.append(Session(s.session_id, items, list(s.behaviors)))
    return out, mapping


def split_dataset(sessions: Sequence[Session], seed: int) -> DatasetSplit:
    n = len(sessions)
    if n < 10:
        raise DataError(f"need at least 10 sessions to split 8:1:1, got {n}")
    order = Rng(seed).permutation(n)
    n_hold = int(math.floor(n / 10 + 0.5))
    shuffled = [sessions[i] for i in order]
    n_train = n - 2 * n_hold
    return DatasetSplit(shuffled[:n_train], shuffled[n_train:n_train + n_hold],
                        shuffled[n_train + n_hold:])


# rewards and prompts


def action_rewards(session: Session, config: RewardConfig) -> list[float]:
    """Immediate reward r_t of each action step t = 1..T-1 (the behavior on x_{t+1})."""
    return [config.reward(b) for b in session.behaviors[1:]]


def cumulative_rewards_from(rewards: Sequence[float], config: RewardConfig) -> list[float]:
    lam = config.discount
    n = len(rewards)
    if n == 0:
        return []
    out = [0.0] * n
    if config.discount_mode == "absolute":
        # R_1 directly, then R_{t+1} = R_t - lam^t r_t
        total = math.fsum(lam ** t * r for t, r in enumerate(rewards, 1))
        out[0] = total
        for t in range(1, n):
            total -= lam ** t * rewards[t - 1]
            out[t] = total
    else:
        running = 0.0
        for t in range(n - 1, -1, -1):
            running = rewards[t] + lam * running
            out[t] = running
    return out


def compute_cumulative_rewards(session: Session, config: RewardConfig) -> list[float]:
    if len(session) < 2:
        raise DataError(f"session {session.session_id}: need at least 2 items")
    return cumulative_rewards_from(action_rewards(session, config), config)


def generate_prompts(sessions: Iterable[Session], config: RewardConfig,
                     context_len: int = CONTEXT_LEN) -> PromptSet:
    """Turn each length-T session into T-1 ``{R_t, x_{1:t}, t} -> x_{t+1}`` samples."""
    chunks = defaultdict(list)
    for s in sessions:
        if len(s) < 2:
            continue
        T = len(s)
        rewards = action_rewards(s, config)
        cum = cumulative_rewards_from(rewards, config)
        padded = np.concatenate([np.zeros(context_len - 1, dtype=np.int64),
                                 np.asarray(s.items, dtype=np.int64)])
        # window ending at x_t for t = 1..T-1
        windows = np.lib.stride_tricks.sliding_window_view(padded[:T - 1 + context_len - 1],
                                                           context_len)
        chunks["rewards"].append(np.asarray(cum))
        chunks["contexts"].append(windows.copy())
        chunks["steps"].append(np.arange(1, T, dtype=np.int64))
        chunks["actions"].append(np.asarray(s.items[1:], dtype=np.int64))
        chunks["immediate"].append(np.asarray(rewards))
        chunks["purchase"].append(np.asarray([b == PURCHASE for b in s.behaviors[1:]]))
    if not chunks:
        return PromptSet.empty()
    return PromptSet(**{k: np.concatenate(v) for k, v in chunks.items()})


@dataclass
class StepRewardTable:
    """Mean training R_t per step, with fallback to the nearest smaller populated step."""

    means: dict[int, float]

    def __post_init__(self):
        if not self.means:
            raise DataError("step reward table is empty")
        self._steps = np.array(sorted(self.means))

    def __getitem__(self, step: int) -> float:
        step = int(step)
        if step in self.means:
            return self.means[step]
        pos = np.searchsorted(self._steps, step, side="right") - 1
        return self.means[int(self._steps[max(pos, 0)])]

    def lookup(self, steps: np.ndarray) -> np.ndarray:
        return np.array([self[s] for s in steps], dtype=np.float64)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("step,mean_cumulative_reward\n")
            for s in sorted(self.means):
                fh.write(f"{s},{self.means[s]!r}\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> "StepRewardTable":
        with open(path, encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls({int(r["step"]): float(r["mean_cumulative_reward"]) for r in rows})


def compute_step_reward_averages(prompts: PromptSet) -> StepRewardTable:
    if len(prompts) == 0:
        raise DataError("cannot average rewards over an empty prompt set")
    groups = defaultdict(list)
    for step, r in zip(prompts.steps.tolist(), prompts.rewards.tolist()):
        groups[step].append(r)
    # fsum keeps the mean independent of sample order
    return StepRewardTable({s: math.fsum(v) / len(v) for s, v in groups.items()})


# synthetic corpus


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic logging setup.

    Every item has ``click_branches`` click continuations and one purchase
    continuation, fixed by a seeded transition table. The logging policy picks
    the purchase branch with probability ``purchase_bias`` and a uniformly
    random click branch otherwise.
    """

    vocab: int = 50
    sessions: int = 1000
    min_len: int = 3
    max_len: int = 20
    purchase_bias: float = 0.2
    click_branches: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.vocab < 4:
            raise ValueError("vocab must be at least 4")
        if self.sessions < 1:
            raise ValueError("need at least one session")
        if not 2 <= self.min_len <= self.max_len:
            raise ValueError("need 2 <= min_len <= max_len")
        if not 0.0 <= self.purchase_bias <= 1.0:
            raise ValueError("purchase_bias must be a probability")
        if not 1 <= self.click_branches < self.vocab:
            raise ValueError("click_branches must be in [1, vocab)")


def transition_table(spec: SynthSpec) -> np.ndarray:
    """``table[item, branch]`` -> next item; branch ``click_branches`` is the purchase branch."""
    rng = Rng(spec.seed * 7919 + 17)
    n_branch = spec.click_branches + 1
    table = np.zeros((spec.vocab + 1, n_branch), dtype=np.int64)
    for item in range(1, spec.vocab + 1):
        # distinct continuations, never the item itself
        choices = rng.permutation(spec.vocab - 1)[:n_branch] + 1
        choices = np.where(choices >= item, choices + 1, choices)
        table[item] = choices
    return table


def synth_corpus(spec: SynthSpec) -> list[Session]:
    spec.validate()
    table = transition_table(spec)
    rng = Rng(spec.seed)
    sessions = []
    width = len(str(spec.sessions - 1))
    for k in range(spec.sessions):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        item = int(rng.integers(1, spec.vocab + 1))
        items, behaviors = [item], [CLICK]
        for _ in range(length - 1):
            if rng.random() < spec.purchase_bias:
                branch, behavior = spec.click_branches, PURCHASE
            else:
                branch, behavior = int(rng.integers(0, spec.click_branches)), CLICK
            item = int(table[item, branch])
            items.append(item)
            behaviors.append(behavior)
        sessions.append(Session(f"s{k:0{width}d}", items, behaviors))
    return sessions
