"""Sequential state encoders: padded item contexts -> state vectors.

Contexts are ``(B, L)`` integer arrays, left-padded with 0. Both encoders take
a parameter dict and return a ``(B, d)`` tensor, so the PRL head never needs
to know which one produced the state.
"""

from __future__ import annotations

import math

import numpy as np

from prl import autodiff as ad
from prl.autodiff import Tensor
from prl.data import CONTEXT_LEN, PAD
from prl.rng import Rng

GRU_WEIGHTS = ("W_z", "U_z", "W_s", "U_s", "W_g", "U_g")
MASK_FILL = -1e30


def _check_context(contexts, params) -> np.ndarray:
    ctx = np.asarray(contexts)
    if ctx.ndim == 1:
        ctx = ctx[None, :]
    if ctx.ndim != 2:
        raise ad.ShapeError(f"encoder: context must be (B, L), got {ctx.shape}")
    rows = params["item_emb"].shape[0]
    if ctx.size and (ctx.min() < 0 or ctx.max() >= rows):
        raise IndexError(f"encoder: item index out of range [0, {rows})")
    return ctx.astype(np.int64)


def init_item_embedding(n_items: int, d: int, rng: Rng) -> Tensor:
    table = rng.glorot((n_items + 1, d))
    table[PAD] = 0.0
    return Tensor(table, requires_grad=True, name="item_emb")


def init_gru_params(n_items: int, d: int, rng: Rng) -> dict[str, Tensor]:
    params = {"item_emb": init_item_embedding(n_items, d, rng)}
    for name in GRU_WEIGHTS:
        params[name] = Tensor(rng.glorot((d, d)), requires_grad=True, name=name)
    return params


def gru_encode(contexts, params: dict[str, Tensor]) -> Tensor:
    """Final GRU hidden state over the non-padding suffix of each context.

    Row-vector convention, ``x @ W`` for the column-vector ``W x``. Padding steps
    carry the previous state through unchanged via a 0/1 mask.
    """
    ctx = _check_context(contexts, params)
    B, L = ctx.shape
    d = params["W_z"].shape[0]
    emb = ad.embedding(params["item_emb"], ctx)  # (B, L, d)
    s = Tensor(np.zeros((B, d)))
    for j in range(L):
        real = (ctx[:, j] != PAD).astype(np.float64)[:, None]
        if not real.any():
            continue
        x = emb[:, j, :]
        z = ad.sigmoid(x @ params["W_z"] + s @ params["U_z"])
        g = ad.sigmoid(x @ params["W_g"] + s @ params["U_g"])
        cand = ad.tanh(x @ params["W_s"] + (g * s) @ params["U_s"])
        new = (1.0 - z) * s + z * cand
        if real.all():
            s = new
        else:
            s = new * Tensor(real) + s * Tensor(1.0 - real)
    return s


def init_attn_params(n_items: int, d: int, rng: Rng, max_len: int = CONTEXT_LEN) -> dict[str, Tensor]:
    params = {
        "item_emb": init_item_embedding(n_items, d, rng),
        "pos_emb": Tensor(rng.glorot((max_len, d)), requires_grad=True, name="pos_emb"),
    }
    for name in ("A_q", "A_k", "A_v", "F_1", "F_2"):
        params[name] = Tensor(rng.glorot((d, d)), requires_grad=True, name=name)
    for name in ("f_b1", "f_b2"):
        params[name] = Tensor(np.zeros(d), requires_grad=True, name=name)
    return params


def attention_mask(ctx: np.ndarray) -> np.ndarray:
    """Additive ``(B, L, L)`` mask: causal, padding keys hidden, self always visible."""
    L = ctx.shape[1]
    causal = np.tril(np.ones((L, L), dtype=bool))
    visible = causal[None, :, :] & (ctx != PAD)[:, None, :]
    visible |= np.eye(L, dtype=bool)[None, :, :]
    return np.where(visible, 0.0, MASK_FILL)


def attn_sequence(contexts, params: dict[str, Tensor]) -> Tensor:
    """Per-position outputs ``(B, L, d)`` of one causal single-head attention block
    followed by a position-wise feed-forward layer."""
    ctx = _check_context(contexts, params)
    L = ctx.shape[1]
    d = params["A_q"].shape[0]
    if L > params["pos_emb"].shape[0]:
        raise ad.ShapeError(f"attn_encode: context length {L} exceeds positional table")
    x = ad.embedding(params["item_emb"], ctx) + params["pos_emb"][-L:]
    q, k, v = x @ params["A_q"], x @ params["A_k"], x @ params["A_v"]
    scores = (q @ ad.swap_last(k)) * (1.0 / math.sqrt(d)) + Tensor(attention_mask(ctx))
    h = x + ad.softmax(scores) @ v
    return h + ad.relu(h @ params["F_1"] + params["f_b1"]) @ params["F_2"] + params["f_b2"]


def attn_encode(contexts, params: dict[str, Tensor]) -> Tensor:
    """State = block output at the last position (always a real item when left-padded)."""
    return attn_sequence(contexts, params)[:, -1, :]


ENCODERS = {
    "gru": (init_gru_params, gru_encode),
    "attn": (init_attn_params, attn_encode),
}
