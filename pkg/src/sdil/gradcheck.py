"""Finite-difference check of every parameter group of the full model on a small fixed instance."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .data import ALSO_BUY, ALSO_VIEW, SHARE_BRAND, SIMILAR_ITEM, Instances, RelationGraph
from .model import SDIL, Catalog, ModelConfig, bpr_loss

DAY = 86400
TOLERANCE = 1e-4

GROUPS = {
    "E": lambda n: n == "dim.item_emb",
    "POS": lambda n: n == "dim.pos_emb",
    "attention": lambda n: n.split(".")[-1] in ("wq", "wk", "wv", "wo"),
    "FFN": lambda n: ".ffn_" in n,
    "layernorm": lambda n: ".ln" in n,
    "kernels": lambda n: n.startswith("tpne."),
    "gate": lambda n: n.startswith("gate."),
    "biases": lambda n: n in ("dim.user_bias", "dim.item_bias"),
    "attributes": lambda n: n in ("sim.cat_emb", "sim.brand_emb", "sim.price_emb"),
}


def toy_problem(seed: int = 0, d: int = 8, max_len: int = 6):
    """Model, catalog, instances and candidate lists for a 12-item catalog with every relation type."""
    n_items = 12
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(d=d, layers=2, dim_heads=1, sim_heads=2, max_len=max_len, dropout=0.0)
    model = SDIL(cfg, n_users=3, n_items=n_items, n_categories=3, n_brands=4, seed=seed)
    for t in model.params().values():
        # move off the symmetric init so LayerNorm gains, biases and kernels all matter
        noise = rng.normal(scale=0.1, size=t.shape)
        if t.frozen_rows:
            noise[list(t.frozen_rows)] = 0.0
        t.data += noise
    g = RelationGraph(n_items)
    for a, b, rel in [(1, 9, ALSO_BUY), (2, 9, SHARE_BRAND), (3, 9, ALSO_VIEW), (4, 10, SIMILAR_ITEM),
                      (5, 10, ALSO_BUY), (6, 11, ALSO_VIEW), (7, 11, SIMILAR_ITEM), (8, 12, SHARE_BRAND)]:
        g.add(a, b, rel)
    catalog = Catalog(np.concatenate([[0], rng.integers(1, 5, n_items)]),
                      np.concatenate([[0], rng.integers(1, 6, n_items)]),
                      np.concatenate([[0], rng.integers(1, 12, n_items)]), g)
    ctx = np.array([[0, 0, 1, 3, 5, 7], [2, 4, 6, 8, 1, 3], [0, 0, 0, 4, 6, 7]])
    ts = np.array([[0, 0, 0, 2, 4, 5], [0, 1, 2, 3, 4, 5], [1, 1, 1, 2, 3, 5]]) * DAY
    inst = Instances(np.array([0, 1, 2]), np.array([9, 11, 10]), np.array([6, 7, 6]) * DAY, ctx, ts)
    cands = np.array([[9, 2, 10, 12], [11, 9, 1, 10], [10, 11, 9, 12]])
    return model, catalog, inst, cands


def run(seed: int = 0, n_coords: int = 12, variant: str = "sdil") -> dict[str, tuple[float, int]]:
    """Max relative error and number of checked coordinates per parameter group."""
    model, catalog, inst, cands = toy_problem(seed)

    def loss():
        s = model.score(inst, cands, catalog, variant)
        return bpr_loss(s[:, 0], s[:, 1]) + bpr_loss(s[:, 0], s[:, 2]) + bpr_loss(s[:, 0], s[:, 3])

    params = model.params()
    out = {}
    for group, match in GROUPS.items():
        members = [t for name, t in params.items() if match(name)]
        if not members:
            raise RuntimeError(f"parameter group {group!r} matched nothing")
        err = ag.grad_check(loss, members, n_coords=n_coords, seed=seed, floor=1e-6)
        out[group] = (err, sum(min(n_coords, t.data.size) for t in members))
    return out
