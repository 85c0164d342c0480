"""Synthetic experiment presets shared by the acceptance suite and ``scripts/``.

Two corpora:

* ``conditioning``: every item has one click and one purchase continuation and
  the logging policy picks either with equal odds, so the reward prompt is the
  only thing that tells the two apart.
* ``biased``: eight click continuations per item and a logging policy that
  rarely purchases, so plain next-item training underweights purchases.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from prl.data import (
    DatasetSplit, PromptSet, RewardConfig, StepRewardTable, SynthSpec, compute_step_reward_averages,
    generate_prompts, split_dataset, synth_corpus, transition_table,
)
from prl.evaluation import EvalReport, InferenceRewardConfig, evaluate, sweep
from prl.model import PRLModel, TrainConfig, baseline_config, train


@dataclass(frozen=True)
class Preset:
    spec: SynthSpec
    reward: RewardConfig
    train: TrainConfig
    split_seed: int = 0


CONDITIONING = Preset(
    spec=SynthSpec(vocab=20, sessions=600, min_len=3, max_len=10, purchase_bias=0.5,
                   click_branches=1, seed=1),
    reward=RewardConfig(discount=0.2, discount_mode="relative"),
    train=TrainConfig(batch_size=64, lr=0.01, epochs=20, dropout=0.0, embed_dim=32, seed=0),
)

BIASED = Preset(
    spec=SynthSpec(vocab=50, sessions=1500, min_len=3, max_len=12, purchase_bias=0.1,
                   click_branches=8, seed=3),
    reward=RewardConfig(discount=0.5, discount_mode="relative"),
    train=TrainConfig(batch_size=256, lr=0.01, epochs=15, dropout=0.1, embed_dim=32, seed=0),
)

PRESETS = {"conditioning": CONDITIONING, "biased": BIASED}

# ablation arms: name -> how to derive its TrainConfig from the preset's
ARMS = {
    "prl": lambda c: c,
    "plain": baseline_config,
    "prl_wo": lambda c: replace(c, loss_weight_mode="none"),
    "prl_cumu": lambda c: replace(c, loss_weight_mode="cumulative"),
    "prl_mean": lambda c: replace(c, block_variant="mean_pool"),
    "prl_mlp": lambda c: replace(c, block_variant="mlp"),
}


@dataclass
class Prepared:
    preset: Preset
    split: DatasetSplit
    prompts: PromptSet
    averages: StepRewardTable
    models: dict[str, PRLModel] = field(default_factory=dict)

    @property
    def n_items(self) -> int:
        return self.preset.spec.vocab

    def fit(self, arm: str = "prl", **changes) -> PRLModel:
        key = arm if not changes else f"{arm}:{sorted(changes.items())}"
        if key not in self.models:
            cfg = replace(ARMS[arm](self.preset.train), **changes)
            self.models[key] = train(self.prompts, self.n_items, cfg, log_every_epoch=False).model
        return self.models[key]

    def evaluate(self, model, inference=InferenceRewardConfig(), ks=(5, 10, 20)) -> EvalReport:
        return evaluate(model, self.split.test, self.preset.reward, self.averages, inference, ks)

    def sweep(self, model, parameter: str, grid, base=InferenceRewardConfig()) -> list[dict]:
        return sweep(model, self.split.test, self.preset.reward, self.averages, parameter, grid, base)


def prepare(preset: Preset) -> Prepared:
    sessions = synth_corpus(preset.spec)
    split = split_dataset(sessions, preset.split_seed)
    prompts = generate_prompts(split.train, preset.reward)
    return Prepared(preset, split, prompts, compute_step_reward_averages(prompts))


def tier_averages(prompts: PromptSet) -> tuple[StepRewardTable, StepRewardTable]:
    """Per-step mean R_t over samples whose target is a purchase (high) or a click (low)."""
    groups = (defaultdict(list), defaultdict(list))
    for step, r, p in zip(prompts.steps.tolist(), prompts.rewards.tolist(), prompts.purchase.tolist()):
        groups[0 if p else 1][step].append(r)
    high, low = (StepRewardTable({s: float(np.mean(v)) for s, v in g.items()}) for g in groups)
    return high, low


def conditioning_accuracy(prep: Prepared, model: PRLModel) -> tuple[float, float]:
    """Top-1 rate of the purchase continuation under the high prompt and of the
    click continuation under the low prompt, over every test step."""
    test = generate_prompts(prep.split.test, prep.preset.reward)
    table = transition_table(prep.preset.spec)
    last = test.contexts[:, -1]
    high, low = tier_averages(prep.prompts)
    n_click = prep.preset.spec.click_branches
    out = []
    for tier, expected in ((high, table[last, n_click]), (low, table[last, 0])):
        logits = model.score(tier.lookup(test.steps), test.contexts, test.steps)
        out.append(float(np.mean(logits.argmax(axis=1) + 1 == expected)))
    return out[0], out[1]
