"""Full scorer: gated fusion of static and dynamic interest plus the reactive intensity."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Dataset, Instances, RelationGraph
from .dim import DimEncoder, dot_candidates
from .nn import xavier, zeros
from .sim import SimEncoder
from .tpne import Excitation, total_intensity

VARIANTS = ("sdil", "sdil-1", "sdil-2", "sdil-3", "sdil-tpe")
_MODE = {"sdil": "TPNE", "sdil-2": "TPNE", "sdil-tpe": "TPE", "sdil-3": "NONE"}


def normalize_variant(name: str) -> str:
    v = name.strip().lower().replace("_", "-")
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    return v


@dataclass
class Catalog:
    """Per-item attribute indices and the relation graph the scorer reads."""

    item_cat: np.ndarray
    item_brand: np.ndarray
    item_price: np.ndarray
    graph: RelationGraph

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "Catalog":
        return cls(ds.item_cat, ds.item_brand, ds.item_price, ds.graph)


@dataclass
class ModelConfig:
    d: int = 64
    layers: int = 2
    dim_heads: int = 1
    sim_heads: int = 4
    max_len: int = 20
    dropout: float = 0.1
    time_unit_days: float = 1.0


class SDIL:
    def __init__(self, cfg: ModelConfig, n_users: int, n_items: int, n_categories: int,
                 n_brands: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.sizes = {"n_users": n_users, "n_items": n_items,
                      "n_categories": n_categories, "n_brands": n_brands}
        self.dim = DimEncoder(n_users, n_items, cfg.d, cfg.max_len, cfg.layers, cfg.dim_heads, rng)
        self.sim = SimEncoder(n_categories, n_brands, cfg.d, cfg.layers, cfg.sim_heads, rng)
        self.exc = Excitation(n_items, cfg.time_unit_days)
        self.gate_w1 = xavier(rng, cfg.d, cfg.d, "gate.w1")
        self.gate_w2 = xavier(rng, cfg.d, cfg.d, "gate.w2")
        self.gate_b = zeros(cfg.d, "gate.b")

    def params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.dim.params())
        out.update(self.sim.params())
        out.update(self.exc.params())
        for t in (self.gate_w1, self.gate_w2, self.gate_b):
            out[t.name] = t
        return out

    def gate_fuse(self, e_s: Tensor, e_h: Tensor) -> Tensor:
        return gate_fuse(e_s, e_h, self.gate_w1, self.gate_w2, self.gate_b)

    def score(self, inst: Instances, cands: np.ndarray, catalog: Catalog, variant: str = "sdil",
              training: bool = False, stream: ag.DropoutStream | None = None) -> Tensor:
        """Preference scores [B, C] for candidate item ids ``cands`` [B, C]."""
        variant = normalize_variant(variant)
        ctx, mask = inst.ctx_items, inst.mask
        p = self.cfg.dropout
        cand_emb = ag.gather(self.dim.item_emb, cands)
        e_s = None if variant == "sdil-2" else self.sim(ctx, mask, catalog, p, stream, training)
        if variant == "sdil-1":
            return (dot_candidates(e_s, cand_emb) + ag.gather(self.dim.user_bias, inst.users)[:, None]
                    + ag.gather(self.dim.item_bias, cands))
        e_h = self.dim(ctx, mask, p, stream, training)
        lam0 = self.dim.base_intensity(e_h, inst.users, cands)
        mode = _MODE[variant]
        if mode == "NONE":
            lam = lam0
        else:
            pos, neg = self.exc(ctx, inst.ctx_ts, mask, cands, inst.target_ts, catalog.graph)
            lam = total_intensity(lam0, pos, neg, mode)
        interest = e_h if variant == "sdil-2" else self.gate_fuse(e_s, e_h)
        return dot_candidates(interest, cand_emb) + lam

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.params()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for k, t in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} does not match model {t.shape}")
            t.data[...] = arr


def gate_fuse(e_s: Tensor, e_h: Tensor, w1: Tensor, w2: Tensor, b: Tensor) -> Tensor:
    """g = sigmoid(e_s W1 + e_h W2 + b); e_f = g * e_s + (1 - g) * e_h."""
    g = ag.sigmoid(e_s @ w1 + e_h @ w2 + b)
    return g * e_s + (1.0 - g) * e_h


def bpr_loss(pos: Tensor, neg: Tensor) -> Tensor:
    """Mean of -log sigmoid(pos - neg), computed as softplus(neg - pos)."""
    return ag.mean(ag.softplus(neg - pos))
