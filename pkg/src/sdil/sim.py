"""Static interest: fused attribute embeddings through position-free multi-head attention."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import N_PRICE_BINS
from .nn import Block, attention, masked_mean


def _table(rng, rows, d, std, name) -> Tensor:
    w = rng.normal(0.0, std, size=(rows, d))
    w[0] = 0.0
    t = Tensor(w, requires_grad=True, name=name)
    t.frozen_rows = (0,)
    return t


class SimEncoder:
    """Attribute tables are indexed 0 = padding, 1 = unknown, 2.. = observed values
    (price: 1..10 deciles, 11 unknown)."""

    def __init__(self, n_categories: int, n_brands: int, d: int, layers: int, heads: int,
                 rng: np.random.Generator, init_std: float = 0.05):
        if d % heads:
            raise ValueError(f"embedding size {d} is not divisible by {heads} heads")
        self.cat_emb = _table(rng, n_categories + 2, d, init_std, "sim.cat_emb")
        self.brand_emb = _table(rng, n_brands + 2, d, init_std, "sim.brand_emb")
        self.price_emb = _table(rng, N_PRICE_BINS + 2, d, init_std, "sim.price_emb")
        self.blocks = [Block(d, heads, rng, f"sim.layer{k}", kind="sim") for k in range(layers)]

    def params(self) -> dict[str, Tensor]:
        out = {t.name: t for t in (self.cat_emb, self.brand_emb, self.price_emb)}
        for b in self.blocks:
            out.update(b.params())
        return out

    def fuse_features(self, ctx: np.ndarray, mask: np.ndarray, item_cat: np.ndarray,
                      item_brand: np.ndarray, item_price: np.ndarray) -> Tensor:
        """C[cat] + B[brand] + P[price] per slot; zero rows for padding."""
        f = (ag.gather(self.cat_emb, item_cat[ctx]) + ag.gather(self.brand_emb, item_brand[ctx])
             + ag.gather(self.price_emb, item_price[ctx]))
        return f * mask[:, :, None].astype(np.float64)

    def encode(self, f: Tensor, mask, dropout=0.0, stream=None, training=False) -> Tensor:
        for block in self.blocks:
            f = block(f, mask, dropout, stream, training)
        return f

    def __call__(self, ctx, mask, catalog, dropout=0.0, stream=None, training=False) -> Tensor:
        """Static interest e_s: [B, d]."""
        f = self.fuse_features(ctx, mask, catalog.item_cat, catalog.item_brand, catalog.item_price)
        return pool_static(self.encode(f, mask, dropout, stream, training), mask)


def multi_head_attention(f: Tensor, mask: np.ndarray, wq: Tensor, wk: Tensor, wv: Tensor,
                         wo: Tensor, heads: int = 4) -> Tensor:
    return attention(f, mask, wq, wk, wv, heads, wo)


def pool_static(encoded: Tensor, mask: np.ndarray) -> Tensor:
    return masked_mean(encoded, mask)
