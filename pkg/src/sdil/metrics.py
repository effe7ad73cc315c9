"""Rank-based evaluation metrics over one-target-plus-sampled-negatives candidate lists."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_KS = (5, 10, 20)


def rank_candidates(scores, target_index: int = 0) -> int:
    """1 + number of other candidates scoring >= the target (ties count against it)."""
    scores = np.asarray(scores, dtype=np.float64)
    others = np.delete(scores, target_index)
    return 1 + int(np.count_nonzero(others >= scores[target_index]))


def batch_ranks(scores: np.ndarray) -> np.ndarray:
    """Pessimistic ranks for rows of ``scores`` whose target sits in column 0."""
    scores = np.asarray(scores, dtype=np.float64)
    return 1 + np.count_nonzero(scores[:, 1:] >= scores[:, :1], axis=1)


@dataclass
class RankingReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    mrr: float
    ranks: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, dtype=np.int64))

    def to_dict(self) -> dict[str, float]:
        out = {f"HR@{k}": self.hr[k] for k in sorted(self.hr)}
        out.update({f"NDCG@{k}": self.ndcg[k] for k in sorted(self.ndcg)})
        out["MRR"] = self.mrr
        return out

    def __getitem__(self, key: str) -> float:
        return self.to_dict()[key]


def compute_metrics(ranks, ks=DEFAULT_KS) -> RankingReport:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise ValueError("compute_metrics needs at least one rank")
    if ranks.min() < 1:
        raise ValueError("ranks start at 1")
    gain = 1.0 / np.log2(ranks + 1.0)
    hr = {k: float(np.mean(ranks <= k)) for k in ks}
    ndcg = {k: float(np.mean(np.where(ranks <= k, gain, 0.0))) for k in ks}
    return RankingReport(hr, ndcg, float(np.mean(1.0 / ranks)), ranks)


def format_table(rows: dict[str, dict[str, float]], keys: list[str] | None = None,
                 spread: dict[str, dict[str, float]] | None = None) -> str:
    """Aligned text table: one row per name, one column per metric."""
    if not rows:
        return ""
    keys = keys or list(next(iter(rows.values())))
    width = max(len(n) for n in rows) + 2
    cell = 18 if spread else 8
    lines = ["".ljust(width) + "".join(k.rjust(cell) for k in keys)]
    for name, vals in rows.items():
        if spread:
            cells = [f"{vals[k]:.4f} ± {spread[name][k]:.4f}".rjust(cell) for k in keys]
        else:
            cells = [f"{vals[k]:.4f}".rjust(cell) for k in keys]
        lines.append(name.ljust(width) + "".join(cells))
    return "\n".join(lines)
