"""Relation-gated temporal excitation kernels.

Each historical item v carries its own time scales (days): sigma1 for the
short-term complement boost, (mu2, sigma2) for the delayed substitute boost
and sigma3 for the short-term substitute suppression. They are stored
unconstrained and realised through softplus so they stay positive.
"""
from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import SECONDS_PER_DAY, RelationGraph

MODES = ("TPNE", "TPE", "NONE")

INIT_DAYS = {"sigma1": 7.0, "sigma2": 30.0, "sigma3": 7.0, "mu2": 90.0}


def softplus_inverse(y: float) -> float:
    return y + math.log(-math.expm1(-y))


def gaussian_pdf(dt, mu, sigma) -> float:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return float(ag.gaussian_pdf(dt, mu, sigma).data)


class Excitation:
    """Per-item kernel parameters; time gaps are measured in units of ``time_unit_days`` days."""

    def __init__(self, n_items: int, time_unit_days: float = 1.0):
        self.unit_seconds = SECONDS_PER_DAY * time_unit_days

        def row(name, days):
            t = Tensor(np.full(n_items + 1, softplus_inverse(days / time_unit_days)), requires_grad=True,
                       name=f"tpne.{name}")
            t.frozen_rows = (0,)
            return t

        self.rho1 = row("rho1", INIT_DAYS["sigma1"])
        self.rho2 = row("rho2", INIT_DAYS["sigma2"])
        self.rho3 = row("rho3", INIT_DAYS["sigma3"])
        self.m2 = row("m2", INIT_DAYS["mu2"])

    def params(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.rho1, self.rho2, self.rho3, self.m2)}

    def realized(self) -> dict[str, np.ndarray]:
        sp = lambda t: np.logaddexp(0.0, t.data)  # noqa: E731
        return {"sigma1": sp(self.rho1), "sigma2": sp(self.rho2), "sigma3": sp(self.rho3),
                "mu2": sp(self.m2)}

    def __call__(self, ctx: np.ndarray, ctx_ts: np.ndarray, mask: np.ndarray, cands: np.ndarray,
                 t_n: np.ndarray, graph: RelationGraph) -> tuple[Tensor, Tensor]:
        """Positive and negative (magnitude) excitation for candidates [B, C].

        Complements (also_buy, share_brand) feed N(dt | 0, sigma1); substitutes
        (also_view, similar_item) feed N(dt | mu2, sigma2) and, negatively,
        N(dt | 0, sigma3). Padded slots contribute nothing.
        """
        dt = (np.asarray(t_n)[:, None] - ctx_ts) / self.unit_seconds
        if np.any(dt[mask] < 0):
            raise ValueError("context event after target time (negative time gap)")
        dt = np.where(mask, dt, 0.0)[:, :, None]
        a, b = ctx[:, :, None], cands[:, None, :]
        valid = mask[:, :, None]
        comp = (graph.related(a, b, "complement") & valid).astype(np.float64)
        sub = (graph.related(a, b, "substitute") & valid).astype(np.float64)

        def kernel(mu, rho):
            sigma = ag.reshape(ag.softplus(ag.gather(rho, ctx)), ctx.shape + (1,))
            return ag.gaussian_pdf(dt, mu, sigma)

        mu2 = ag.reshape(ag.softplus(ag.gather(self.m2, ctx)), ctx.shape + (1,))
        k1 = kernel(0.0, self.rho1)
        k2 = kernel(mu2, self.rho2)
        k3 = kernel(0.0, self.rho3)
        pos = ag.sum(k1 * comp + k2 * sub, axis=1)
        neg = ag.sum(k3 * sub, axis=1)
        return pos, neg


def total_intensity(lam0, pos, neg, mode: str = "TPNE"):
    """Combine base intensity and excitation; works on floats and Tensors alike."""
    if mode == "TPNE":
        return lam0 + pos - neg
    if mode == "TPE":
        return lam0 + pos
    if mode == "NONE":
        return lam0
    raise ValueError(f"unknown excitation mode {mode!r}")


def _single(exc: Excitation, ctx_items, ctx_ts, target: int, t_n: int, graph: RelationGraph):
    ctx = np.asarray(ctx_items, dtype=np.int64)[None, :]
    ts = np.asarray(ctx_ts, dtype=np.int64)[None, :]
    return exc(ctx, ts, ctx != 0, np.array([[target]]), np.array([t_n]), graph)


def positive_excitation(exc: Excitation, ctx_items, ctx_ts, target: int, t_n: int,
                        graph: RelationGraph) -> float:
    return float(_single(exc, ctx_items, ctx_ts, target, t_n, graph)[0].data[0, 0])


def negative_excitation(exc: Excitation, ctx_items, ctx_ts, target: int, t_n: int,
                        graph: RelationGraph) -> float:
    return float(_single(exc, ctx_items, ctx_ts, target, t_n, graph)[1].data[0, 0])
