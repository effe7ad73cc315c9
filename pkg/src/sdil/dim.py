"""Dynamic interest: item-ID + position self-attention encoder and base intensity."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import Block, masked_mean, zeros


class DimEncoder:
    def __init__(self, n_users: int, n_items: int, d: int, max_len: int, layers: int,
                 heads: int, rng: np.random.Generator, init_std: float = 0.05):
        e = rng.normal(0.0, init_std, size=(n_items + 1, d))
        e[0] = 0.0
        self.item_emb = Tensor(e, requires_grad=True, name="dim.item_emb")
        self.item_emb.frozen_rows = (0,)
        self.pos_emb = Tensor(rng.normal(0.0, init_std, size=(max_len, d)), requires_grad=True,
                              name="dim.pos_emb")
        self.user_bias = zeros(n_users, "dim.user_bias")
        self.item_bias = zeros(n_items + 1, "dim.item_bias")
        self.item_bias.frozen_rows = (0,)
        self.blocks = [Block(d, heads, rng, f"dim.layer{k}", kind="dim") for k in range(layers)]

    def params(self) -> dict[str, Tensor]:
        out = {t.name: t for t in (self.item_emb, self.pos_emb, self.user_bias, self.item_bias)}
        for b in self.blocks:
            out.update(b.params())
        return out

    def embed_context(self, ctx: np.ndarray, mask: np.ndarray) -> Tensor:
        """E[id] + POS[slot] for every valid slot, zero rows for padding. ctx: [B, L].

        Slots are right-aligned with the position table, so the most recent item
        always takes the last position whatever the window length.
        """
        L, P = ctx.shape[1], self.pos_emb.shape[0]
        if L > P:
            raise ValueError(f"context length {L} exceeds position table {P}")
        pos = self.pos_emb if L == P else ag.gather(self.pos_emb, np.arange(P - L, P))
        x = ag.gather(self.item_emb, ctx) + pos
        return x * mask[:, :, None].astype(np.float64)

    def encode(self, ctx, mask, dropout=0.0, stream=None, training=False) -> Tensor:
        x = self.embed_context(ctx, mask)
        for block in self.blocks:
            x = block(x, mask, dropout, stream, training)
        return x

    def __call__(self, ctx, mask, dropout=0.0, stream=None, training=False) -> Tensor:
        """History embedding e_h: [B, d]."""
        return pool_history(self.encode(ctx, mask, dropout, stream, training), mask)

    def base_intensity(self, e_h: Tensor, users: np.ndarray, cands: np.ndarray) -> Tensor:
        """lambda_0 = e_h . E[v] + u_b[u] + i_b[v] for candidates [B, C]."""
        lam = dot_candidates(e_h, ag.gather(self.item_emb, cands))
        return lam + ag.gather(self.user_bias, users)[:, None] + ag.gather(self.item_bias, cands)


def pool_history(encoded: Tensor, mask: np.ndarray) -> Tensor:
    return masked_mean(encoded, mask)


def dot_candidates(vec: Tensor, cand_emb: Tensor) -> Tensor:
    """Row-wise dot products: vec [B, d] against cand_emb [B, C, d] -> [B, C]."""
    B, d = vec.shape
    out = cand_emb @ ag.reshape(vec, (B, d, 1))
    return ag.reshape(out, (B, cand_emb.shape[1]))
