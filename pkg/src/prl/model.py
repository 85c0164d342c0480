"""Reward-conditioned recommender: prompt encoding, attentive block, head, loss, training."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from prl import autodiff as ad
from prl.autodiff import AdamState, NonFiniteError, Tensor
from prl.data import PromptSet
from prl.encoders import ENCODERS
from prl.rng import Rng

logger = logging.getLogger(__name__)

BLOCK_VARIANTS = ("self_attention", "mean_pool", "mlp")
LOSS_WEIGHT_MODES = ("immediate", "none", "cumulative")
MAX_STEP = 50


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    lr: float = 0.01
    epochs: int = 10
    dropout: float = 0.1
    block_variant: str = "self_attention"
    loss_weight_mode: str = "immediate"
    layer_norm: bool = True
    embed_dim: int = 64
    encoder: str = "gru"
    # plain cross-entropy on s_t alone, no prompt ("normal" training)
    baseline: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.block_variant not in BLOCK_VARIANTS:
            raise ValueError(f"unknown block variant {self.block_variant!r}")
        if self.loss_weight_mode not in LOSS_WEIGHT_MODES:
            raise ValueError(f"unknown loss weight mode {self.loss_weight_mode!r}")
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.embed_dim < 1 or self.epochs < 0:
            raise ValueError("embed_dim must be >= 1 and epochs >= 0")


def baseline_config(config: TrainConfig) -> TrainConfig:
    return replace(config, baseline=True, loss_weight_mode="none")


# building blocks


def encode_prompt(cumulative_reward, state: Tensor, steps, params: dict[str, Tensor]) -> Tensor:
    """Stack ``[R_t * e_r, s_t, H_T[t]]`` into a ``(B, 3, d)`` prompt tensor."""
    steps = np.asarray(steps, dtype=np.int64)
    if np.any(steps < 1):
        raise ValueError("steps must be >= 1")
    R = Tensor(np.asarray(cumulative_reward, dtype=np.float64).reshape(-1, 1))
    e_R = R * params["reward_emb"]
    h = ad.embedding(params["step_emb"], np.minimum(steps, MAX_STEP) - 1)
    return ad.stack([e_R, state, h], axis=1)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ad.ShapeError(f"attention: shape mismatch {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ad.ShapeError(f"attention: shape mismatch {k.shape} vs {v.shape}")
    d = q.shape[-1]
    scores = (q @ ad.swap_last(k)) * (1.0 / math.sqrt(d))
    return ad.softmax(scores) @ v


def self_attentive_block(P: Tensor, params: dict[str, Tensor], *, dropout: float = 0.0,
                         layer_norm: bool = False, training: bool = False,
                         rng: Rng | None = None) -> Tensor:
    """Residual self-attention over the prompt rows; returns the same shape as ``P``."""
    branch = attention(P @ params["W_q"], P @ params["W_k"], P @ params["W_v"])
    out = P + ad.dropout(branch, dropout, training, rng)
    if layer_norm:
        out = ad.layer_norm(out, params["ln_gain"], params["ln_bias"])
    return out


def block_variant(P: Tensor, params: dict[str, Tensor], variant: str, *, dropout: float = 0.0,
                  layer_norm: bool = False, training: bool = False,
                  rng: Rng | None = None) -> Tensor:
    """Map a ``(B, 3, d)`` prompt to the attentive state ``(B, d)``."""
    if variant == "self_attention":
        out = self_attentive_block(P, params, dropout=dropout, layer_norm=layer_norm,
                                   training=training, rng=rng)
        return ad.unstack(out, axis=1)[1]
    if variant == "mean_pool":
        return P.mean(axis=1)
    if variant == "mlp":
        flat = P.reshape(P.shape[0], P.shape[1] * P.shape[2])
        hidden = ad.dropout(ad.tanh(flat @ params["mlp_W1"]), dropout, training, rng)
        return ad.tanh(hidden @ params["mlp_W2"])
    raise ValueError(f"unknown block variant {variant!r}")


def compute_logits(state: Tensor, params: dict[str, Tensor],
                   activation: Callable[[Tensor], Tensor] | None = None) -> Tensor:
    """One logit per candidate item; column j scores item j + 1."""
    y = state @ ad.swap_last(params["head_W"]) + params["head_b"]
    return y if activation is None else activation(y)


def weighted_ce_loss(logits: Tensor, targets, immediate, cumulative, mode: str) -> Tensor:
    """Mean over the batch of ``-w * log softmax(logits)[target]``."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if np.any(targets < 1) or np.any(targets > logits.shape[-1]):
        raise ValueError("loss: targets must be item ids in [1, n]; padding is not a target")
    if mode == "immediate":
        w = np.asarray(immediate, dtype=np.float64).reshape(-1)
    elif mode == "cumulative":
        w = np.asarray(cumulative, dtype=np.float64).reshape(-1)
    elif mode == "none":
        w = np.ones(len(targets))
    else:
        raise ValueError(f"unknown loss weight mode {mode!r}")
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    logp = ad.log_softmax(logits)
    picked = logp[np.arange(len(targets)), targets - 1]
    return -(picked * Tensor(w)).mean()


# the model


class PRLModel:
    def __init__(self, n_items: int, config: TrainConfig, rng: Rng | None = None):
        if n_items < 1:
            raise ValueError("need at least one item")
        rng = Rng(config.seed) if rng is None else rng
        self.n_items = n_items
        self.config = config
        self.activation: Callable[[Tensor], Tensor] | None = None
        init_encoder, self._encode = ENCODERS[config.encoder]
        d = config.embed_dim
        params = init_encoder(n_items, d, rng)
        if not config.baseline:
            params["reward_emb"] = Tensor(rng.glorot((d,)), True, "reward_emb")
            params["step_emb"] = Tensor(rng.glorot((MAX_STEP, d)), True, "step_emb")
            if config.block_variant == "self_attention":
                for name in ("W_q", "W_k", "W_v"):
                    params[name] = Tensor(rng.glorot((d, d)), True, name)
                if config.layer_norm:
                    params["ln_gain"] = Tensor(np.ones(d), True, "ln_gain")
                    params["ln_bias"] = Tensor(np.zeros(d), True, "ln_bias")
            elif config.block_variant == "mlp":
                params["mlp_W1"] = Tensor(rng.glorot((3 * d, d)), True, "mlp_W1")
                params["mlp_W2"] = Tensor(rng.glorot((d, d)), True, "mlp_W2")
        params["head_W"] = Tensor(rng.glorot((n_items, d)), True, "head_W")
        params["head_b"] = Tensor(np.zeros(n_items), True, "head_b")
        self.params: dict[str, Tensor] = params

    def encode_state(self, contexts) -> Tensor:
        return self._encode(contexts, self.params)

    def attentive_state(self, rewards, contexts, steps, training: bool = False,
                        rng: Rng | None = None) -> Tensor:
        s = self.encode_state(contexts)
        if self.config.baseline:
            return ad.dropout(s, self.config.dropout, training, rng)
        P = encode_prompt(rewards, s, steps, self.params)
        return block_variant(P, self.params, self.config.block_variant,
                             dropout=self.config.dropout, layer_norm=self.config.layer_norm,
                             training=training, rng=rng)

    def forward(self, rewards, contexts, steps, training: bool = False,
                rng: Rng | None = None) -> Tensor:
        return compute_logits(self.attentive_state(rewards, contexts, steps, training, rng),
                              self.params, self.activation)

    def loss(self, batch: PromptSet, training: bool = False, rng: Rng | None = None) -> Tensor:
        logits = self.forward(batch.rewards, batch.contexts, batch.steps, training, rng)
        return weighted_ce_loss(logits, batch.actions, batch.immediate, batch.rewards,
                                self.config.loss_weight_mode)

    def score(self, rewards, contexts, steps, batch_size: int = 1024) -> np.ndarray:
        """Inference-mode logits as a plain array, evaluated in chunks."""
        rewards = np.asarray(rewards, dtype=np.float64)
        contexts = np.asarray(contexts)
        steps = np.asarray(steps)
        out = np.empty((len(steps), self.n_items))
        with ad.no_grad():
            for lo in range(0, len(steps), batch_size):
                hi = lo + batch_size
                out[lo:hi] = self.forward(rewards[lo:hi], contexts[lo:hi], steps[lo:hi]).data
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        for k, p in self.params.items():
            if arrays[k].shape != p.shape:
                raise ad.ShapeError(f"load: shape mismatch {p.shape} vs {arrays[k].shape} for {k}")
            p.data = np.array(arrays[k], dtype=np.float64)


# training


class TrainingDiverged(NonFiniteError):
    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    model: PRLModel
    optimizer: AdamState
    loss_trace: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    valid_scores: list[float] = field(default_factory=list)
    best_epoch: int | None = None


def train(prompts: PromptSet, n_items: int, config: TrainConfig, *,
          validate: Callable[[PRLModel], float] | None = None,
          checkpoint_dir: str | Path | None = None,
          max_steps: int | None = None,
          meta: dict | None = None,
          log_every_epoch: bool = True) -> TrainResult:
    """Mini-batch Adam on the weighted loss, one seeded shuffle per epoch.

    ``validate`` scores the model after each epoch (higher is better); the best
    epoch is written to ``best.ckpt`` when a checkpoint directory is given.
    """
    from prl.checkpoint import save_checkpoint

    if len(prompts) == 0:
        raise ValueError("cannot train on an empty prompt set")
    rng = Rng(config.seed)
    model = PRLModel(n_items, config, rng)
    opt = ad.Adam(model.params, lr=config.lr)
    result = TrainResult(model, opt.state)
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    meta = dict(meta or {})
    best = -math.inf
    steps_done = 0

    def dump(name: str) -> Path | None:
        if ckdir is None:
            return None
        path = ckdir / name
        save_checkpoint(path, model, opt.state, meta=meta)
        return path

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(prompts))
        batch_losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = prompts.subset(order[lo:lo + config.batch_size])
            opt.zero_grad()
            try:
                loss = model.loss(batch, training=True, rng=rng)
                if not math.isfinite(loss.item()):
                    raise NonFiniteError("loss is not finite")
                ad.backward(loss)
                opt.step()
            except NonFiniteError as exc:
                ad.get_graph().clear()
                path = dump("last_good.ckpt")
                raise TrainingDiverged(
                    f"epoch {epoch}, step {steps_done + 1}: {exc}", path) from exc
            value = loss.item()
            batch_losses.append(value)
            result.loss_trace.append(value)
            steps_done += 1
            if max_steps is not None and steps_done >= max_steps:
                break
        epoch_loss = float(np.mean(batch_losses))
        result.epoch_losses.append(epoch_loss)
        dump(f"epoch_{epoch:03d}.ckpt")
        msg = f"epoch {epoch}: train loss {epoch_loss:.6f}"
        if validate is not None:
            score = validate(model)
            result.valid_scores.append(score)
            msg += f", valid purchase NDCG@10 {score:.4f}"
            if score > best:
                best = score
                result.best_epoch = epoch
                dump("best.ckpt")
        if log_every_epoch:
            logger.info(msg)
        if max_steps is not None and steps_done >= max_steps:
            break
    dump("model.ckpt")
    return result


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
