"""Synthetic event streams drawn from a reactive (excitatory + inhibitory) point process.

Items are grouped into substitute clusters of five (same category, close
prices, linked by ``also_view``); ``also_buy`` complement pairs are planted
between clusters. Each user's next item is drawn with probability
proportional to

    base(u, v)
    + w_comp  * sum over complements of recent purchases of  g(dt | 0, sigma1)
    + w_delay * sum over substitutes of recent purchases of  g(dt | mu2, sigma2)
    - w_supp  * sum over substitutes of recent purchases of  g(dt | 0, sigma3)

clamped at zero, where g is an unnormalised Gaussian bump (peak 1), dt is in
days and the three weights are relative to the user's largest base
preference. Gaps between events are exponential with a mean of seven days.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

DAY = 86400
CLUSTER_SIZE = 5
N_CATEGORIES = 10
START_TS = 1_420_070_400  # 2015-01-01


@dataclass
class KernelParams:
    sigma1: float = 3.0
    sigma2: float = 10.0
    mu2: float = 180.0
    sigma3: float = 5.0
    w_comp: float = 0.5
    w_delay: float = 0.5
    w_supp: float = 5.0
    mean_gap_days: float = 7.0
    # user taste concentration over item clusters
    taste: float = 2.5
    min_events: int = 5
    mean_extra_events: float = 7.0
    n_complements: int = 2


@dataclass
class SyntheticCorpus:
    users: list[list[tuple[int, int]]]    # per user: [(item, timestamp), ...]
    category: np.ndarray                   # [n_items+1]
    brand: np.ndarray
    price: np.ndarray
    also_buy: list[tuple[int, int]]
    also_view: list[tuple[int, int]]


def _bump(dt: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    return np.exp(-0.5 * ((dt - mu) / sigma) ** 2)


def simulate(n_users: int, n_items: int, seed: int, kp: KernelParams | None = None) -> SyntheticCorpus:
    if n_items < 50:
        raise ValueError("synthetic catalog needs at least 50 items")
    kp = kp or KernelParams()
    rng = np.random.default_rng(seed)
    ids = np.arange(1, n_items + 1)
    cluster = (ids - 1) // CLUSTER_SIZE
    n_clusters = int(cluster.max()) + 1

    category = np.zeros(n_items + 1, dtype=np.int64)
    category[1:] = cluster % N_CATEGORIES
    cluster_price = np.exp(rng.uniform(np.log(5.0), np.log(500.0), size=n_clusters))
    price = np.zeros(n_items + 1)
    price[1:] = np.round(cluster_price[cluster] * rng.uniform(0.95, 1.05, size=n_items), 2)
    brand = np.zeros(n_items + 1, dtype=np.int64)
    brand[1:] = rng.integers(0, max(1, n_items // 10), size=n_items)

    sub = np.zeros((n_items + 1, n_items + 1), dtype=bool)
    also_view = []
    for c in range(n_clusters):
        members = ids[cluster == c]
        for a in members:
            for b in members:
                if a < b:
                    sub[a, b] = sub[b, a] = True
                    also_view.append((int(a), int(b)))
    comp = np.zeros_like(sub)
    also_buy = []
    for a in ids:
        for b in rng.choice(ids, size=kp.n_complements, replace=False):
            if cluster[a - 1] != cluster[b - 1] and not comp[a, b]:
                comp[a, b] = comp[b, a] = True
                also_buy.append((int(min(a, b)), int(max(a, b))))
    also_buy = sorted(set(also_buy))

    k = 8
    cluster_vec = rng.normal(size=(n_clusters, k))
    item_vec = cluster_vec[cluster] + 0.3 * rng.normal(size=(n_items, k))
    users = []
    for _ in range(n_users):
        uvec = rng.normal(size=k)
        logits = kp.taste * item_vec @ uvec / np.sqrt(k)
        base = np.exp(logits - logits.max())
        base /= base.sum()
        n_events = kp.min_events + int(rng.poisson(kp.mean_extra_events))
        n_events = min(n_events, n_items)
        t = START_TS + int(rng.uniform(0, 365 * DAY))
        seq: list[tuple[int, int]] = []
        bought = np.zeros(n_items + 1, dtype=bool)
        for _ in range(n_events):
            lam = base.copy()
            if seq:
                past = np.array([i for i, _ in seq])
                dt = (t - np.array([s for _, s in seq])) / DAY
                top = base.max()
                lam += kp.w_comp * top * (_bump(dt, 0.0, kp.sigma1) @ comp[past, 1:])
                lam += kp.w_delay * top * (_bump(dt, kp.mu2, kp.sigma2) @ sub[past, 1:])
                lam -= kp.w_supp * top * (_bump(dt, 0.0, kp.sigma3) @ sub[past, 1:])
            lam = np.clip(lam, 0.0, None)
            lam[bought[1:]] = 0.0
            if lam.sum() <= 0:
                lam = np.where(bought[1:], 0.0, 1.0)
            item = int(rng.choice(ids, p=lam / lam.sum()))
            bought[item] = True
            seq.append((item, t))
            t += max(1, int(rng.exponential(kp.mean_gap_days * DAY)))
        users.append(seq)
    return SyntheticCorpus(users, category, brand, price, also_buy, also_view)


def write_corpus(corpus: SyntheticCorpus, out_dir, seed: int, kp: KernelParams) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "interactions.tsv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("user_id\titem_id\ttimestamp\n")
        for u, seq in enumerate(corpus.users, start=1):
            for item, ts in seq:
                fh.write(f"{u}\t{item}\t{ts}\n")
    with (out / "items.tsv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("item_id\tcategory\tbrand\tprice\n")
        for i in range(1, len(corpus.category)):
            fh.write(f"{i}\tcat{corpus.category[i]}\tbrand{corpus.brand[i]}\t{corpus.price[i]:.2f}\n")
    with (out / "relations.tsv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("item_a\titem_b\trelation\n")
        for a, b in corpus.also_buy:
            fh.write(f"{a}\t{b}\talso_buy\n")
        for a, b in corpus.also_view:
            fh.write(f"{a}\t{b}\talso_view\n")
    manifest = {"generator": "reactive-point-process", "seed": seed, "n_users": len(corpus.users),
                "n_items": len(corpus.category) - 1, "time_unit": "days",
                "cluster_size": CLUSTER_SIZE, "n_categories": N_CATEGORIES,
                "kernel": asdict(kp)}
    (out / "synth_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                             encoding="utf-8")


def generate_synthetic(n_users: int, n_items: int, seed: int, kernel_params: KernelParams | None = None,
                       out_dir=None) -> SyntheticCorpus:
    """Simulate a corpus and, when ``out_dir`` is given, write the raw TSV files and manifest."""
    kp = kernel_params or KernelParams()
    corpus = simulate(n_users, n_items, seed, kp)
    if out_dir is not None:
        write_corpus(corpus, out_dir, seed, kp)
    return corpus


def substitute_repurchase_rate(corpus: SyntheticCorpus, window_days: float = 30.0) -> float:
    """Fraction of consecutive-event pairs within ``window_days`` that are also_view substitutes."""
    subs = set(corpus.also_view) | {(b, a) for a, b in corpus.also_view}
    hits = total = 0
    for seq in corpus.users:
        for (a, ta), (b, tb) in zip(seq, seq[1:]):
            if (tb - ta) / DAY <= window_days:
                total += 1
                hits += (a, b) in subs
    return hits / max(total, 1)
