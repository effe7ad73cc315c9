"""Attention, feed-forward and pooling building blocks shared by both encoders."""
from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor, UsageError

MASK_BIAS = -1e9


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Tensor:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=(fan_in, fan_out)), requires_grad=True, name=name)


def zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def ones(shape, name: str) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


def key_mask_bias(mask: np.ndarray) -> np.ndarray:
    """[B, L] validity mask -> additive bias [B, 1, 1, L] (0 valid, -1e9 padding)."""
    return np.where(mask, 0.0, MASK_BIAS)[:, None, None, :]


def attention(x: Tensor, mask: np.ndarray, wq: Tensor, wk: Tensor, wv: Tensor,
              heads: int = 1, wo: Tensor | None = None, return_weights: bool = False):
    """Scaled dot-product self-attention over [B, L, d] with padded keys masked out.

    Heads split the projected width evenly; each head scales scores by
    1/sqrt(d/heads). ``wo`` (if given) projects the concatenated heads.
    """
    B, L, d = x.shape
    if d % heads:
        raise ValueError(f"model width {d} is not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return ag.permute(ag.reshape(t, (B, L, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(x @ wq), split(x @ wk), split(x @ wv)
    scores = ag.scale(q @ ag.swap_last(k), 1.0 / math.sqrt(dh))
    weights = ag.softmax_rows(scores, key_mask_bias(mask))
    out = ag.reshape(ag.permute(weights @ v, (0, 2, 1, 3)), (B, L, d))
    if wo is not None:
        out = out @ wo
    return (out, weights) if return_weights else out


def ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return ag.relu(x @ w1 + b1) @ w2 + b2


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over valid positions of [B, L, d] -> [B, d]."""
    count = mask.sum(axis=1)
    if np.any(count == 0):
        raise UsageError("cannot pool a context with no valid positions")
    m = mask[:, :, None].astype(np.float64)
    return ag.sum(x * m, axis=1) * (1.0 / count)[:, None]


class Block:
    """One encoder layer.

    ``sim`` layers (multi-head, output projection) are
    LN(M + FFN(M)) with M = LN(X + MHA(X)); ``dim`` layers follow the shorter
    LN(X + FFN(Att(X))) form. Dropout sits on the FFN output in both.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, name: str, kind: str = "dim"):
        if kind not in ("dim", "sim"):
            raise ValueError(kind)
        if d % heads:
            raise ValueError(f"model width {d} is not divisible by {heads} heads")
        self.kind = kind
        self.heads = heads
        p = {
            "wq": xavier(rng, d, d, f"{name}.wq"),
            "wk": xavier(rng, d, d, f"{name}.wk"),
            "wv": xavier(rng, d, d, f"{name}.wv"),
            "ffn_w1": xavier(rng, d, d, f"{name}.ffn_w1"),
            "ffn_b1": zeros(d, f"{name}.ffn_b1"),
            "ffn_w2": xavier(rng, d, d, f"{name}.ffn_w2"),
            "ffn_b2": zeros(d, f"{name}.ffn_b2"),
            "ln_g": ones(d, f"{name}.ln_g"),
            "ln_b": zeros(d, f"{name}.ln_b"),
        }
        if kind == "sim":
            p["wo"] = xavier(rng, d, d, f"{name}.wo")
            p["ln0_g"] = ones(d, f"{name}.ln0_g")
            p["ln0_b"] = zeros(d, f"{name}.ln0_b")
        self.p = p

    def params(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.p.values()}

    def __call__(self, x: Tensor, mask: np.ndarray, dropout: float = 0.0,
                 stream: ag.DropoutStream | None = None, training: bool = False) -> Tensor:
        p = self.p
        a = attention(x, mask, p["wq"], p["wk"], p["wv"], self.heads, p.get("wo"))
        if self.kind == "sim":
            x = ag.layer_norm(x + a, p["ln0_g"], p["ln0_b"])
            a = x
        h = ffn(a, p["ffn_w1"], p["ffn_b1"], p["ffn_w2"], p["ffn_b2"])
        h = ag.dropout(h, dropout, stream, training)
        return ag.layer_norm(x + h, p["ln_g"], p["ln_b"])
