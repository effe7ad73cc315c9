"""Raw file ingestion, 5-core filtering, attribute binning, item relations and splits."""
from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from decimal import Decimal, InvalidOperation
from functools import cached_property
from itertools import combinations
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400.0
PAD = 0
N_PRICE_BINS = 10
# attribute index layout: 0 = padding, 1 = unknown, 2.. = observed values
ATTR_UNKNOWN = 1
# price index layout: 0 = padding, 1..10 = decile bins, 11 = unknown
PRICE_UNKNOWN = N_PRICE_BINS + 1

ALSO_BUY, ALSO_VIEW, SHARE_BRAND, SIMILAR_ITEM = "also_buy", "also_view", "share_brand", "similar_item"
RELATIONS = (ALSO_BUY, ALSO_VIEW, SHARE_BRAND, SIMILAR_ITEM)
COMPLEMENT = frozenset({ALSO_BUY, SHARE_BRAND})
SUBSTITUTE = frozenset({ALSO_VIEW, SIMILAR_ITEM})
SPLITS = {"train": 0, "val": 1, "test": 2}


class DataError(ValueError):
    pass


class EmptyDatasetError(DataError):
    pass


class SamplingError(DataError):
    pass


@dataclass(frozen=True, slots=True)
class Interaction:
    user_id: int
    item_id: int
    timestamp: int


@dataclass(slots=True)
class ItemMeta:
    item_id: int
    category_id: int = ATTR_UNKNOWN
    brand_id: int = ATTR_UNKNOWN
    price: Decimal | None = None
    price_bin: int | None = None

    @property
    def price_index(self) -> int:
        return PRICE_UNKNOWN if self.price_bin is None else self.price_bin + 1


# ---------------------------------------------------------------- loading

def _read_tsv(path, header: tuple[str, ...]):
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        first = next(reader, None)
        if first is None:
            raise EmptyDatasetError(f"{path}: empty file")
        if tuple(c.strip() for c in first) != header:
            raise DataError(f"{path}:1: expected header {list(header)!r}, got {first!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, row


def load_interactions(path) -> list[Interaction]:
    """Parse ``user_id, item_id, timestamp`` rows; sort per user by time, drop exact duplicates."""
    seen: set[tuple[int, int, int]] = set()
    rows: list[Interaction] = []
    for lineno, row in _read_tsv(path, ("user_id", "item_id", "timestamp")):
        try:
            u, i, t = (int(x) for x in row)
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-integer field in {row!r}") from None
        if u < 1 or i < 1:
            raise DataError(f"{path}:{lineno}: ids must be positive")
        if (u, i, t) in seen:
            continue
        seen.add((u, i, t))
        rows.append(Interaction(u, i, t))
    if not rows:
        raise EmptyDatasetError(f"{path}: no interactions")
    # stable sort keeps file order for equal timestamps
    return sorted(rows, key=lambda r: (r.user_id, r.timestamp))


@dataclass
class RawItem:
    item_id: int
    category: str
    brand: str
    price: Decimal | None


def load_items(path) -> list[RawItem]:
    items = []
    for lineno, (iid, cat, brand, price) in _read_tsv(path, ("item_id", "category", "brand", "price")):
        try:
            iid = int(iid)
            p = Decimal(price) if price.strip() else None
        except (ValueError, InvalidOperation):
            raise DataError(f"{path}:{lineno}: bad item_id or price") from None
        items.append(RawItem(iid, cat.strip(), brand.strip(), p))
    return items


def load_raw_relations(path) -> list[tuple[int, int, str]]:
    rels = []
    for lineno, (a, b, r) in _read_tsv(path, ("item_a", "item_b", "relation")):
        r = r.strip()
        if r not in (ALSO_BUY, ALSO_VIEW):
            raise DataError(f"{path}:{lineno}: relation must be also_buy or also_view, got {r!r}")
        try:
            rels.append((int(a), int(b), r))
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-integer item id") from None
    return rels


# ---------------------------------------------------------------- filtering

def five_core_filter(interactions: list[Interaction], k: int = 5) -> list[Interaction]:
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    rows = list(interactions)
    while True:
        users = Counter(r.user_id for r in rows)
        items = Counter(r.item_id for r in rows)
        kept = [r for r in rows if users[r.user_id] >= k and items[r.item_id] >= k]
        if len(kept) == len(rows):
            return kept
        rows = kept


def bin_prices(items: list[ItemMeta], n_bins: int = N_PRICE_BINS) -> list[ItemMeta]:
    """Quantile bins over observed prices: bin = floor(rank_min * n_bins / n_priced)."""
    priced = np.array([float(m.price) for m in items if m.price is not None])
    if priced.size == 0:
        raise DataError("bin_prices needs at least one priced item")
    srt = np.sort(priced)
    n = srt.size
    for m in items:
        if m.price is None:
            m.price_bin = None
        else:
            rank = int(np.searchsorted(srt, float(m.price), side="left"))
            m.price_bin = min(rank * n_bins // n, n_bins - 1)
    return items


# ---------------------------------------------------------------- relations

@dataclass
class RelationGraph:
    """Symmetric, irreflexive typed item-item edges over dense item ids."""

    n_items: int
    edges: dict[str, set[tuple[int, int]]] = field(default_factory=lambda: {r: set() for r in RELATIONS})
    skipped: int = 0
    _keys: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def add(self, a: int, b: int, rel: str) -> None:
        if a == b:
            return
        if a == PAD or b == PAD:
            raise DataError("padding id cannot take part in a relation")
        self.edges[rel].add((a, b))
        self.edges[rel].add((b, a))
        self._keys.clear()

    def neighbors(self, item: int, rel: str) -> set[int]:
        return {b for a, b in self.edges[rel] if a == item}

    def counts(self) -> dict[str, int]:
        return {r: len(e) // 2 for r, e in self.edges.items()}

    def is_empty(self) -> bool:
        return all(not e for e in self.edges.values())

    def _class_keys(self, cls: str) -> np.ndarray:
        if cls not in self._keys:
            rels = COMPLEMENT if cls == "complement" else SUBSTITUTE
            pairs = set().union(*(self.edges[r] for r in rels))
            n = self.n_items + 1
            self._keys[cls] = np.array(sorted(a * n + b for a, b in pairs), dtype=np.int64)
        return self._keys[cls]

    def related(self, a: np.ndarray, b: np.ndarray, cls: str) -> np.ndarray:
        """Elementwise indicator: is (a, b) linked by any relation of ``cls``?

        ``cls`` is "complement" (also_buy, share_brand) or "substitute" (also_view, similar_item).
        """
        keys = self._class_keys(cls)
        a, b = np.broadcast_arrays(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64))
        if keys.size == 0:
            return np.zeros(a.shape, dtype=bool)
        q = a * (self.n_items + 1) + b
        pos = np.minimum(np.searchsorted(keys, q), keys.size - 1)
        return keys[pos] == q


def build_relation_graph(items: list[ItemMeta], raw_relations, n_items: int | None = None) -> RelationGraph:
    """r1/r2 from the raw file, r3 for shared brand, r4 for same category and price bin.

    ``items`` and ``raw_relations`` use the same (dense) ids; pairs touching an
    unknown item are skipped and counted in ``graph.skipped``.
    """
    known = {m.item_id for m in items}
    graph = RelationGraph(n_items if n_items is not None else max(known, default=0))
    for a, b, rel in raw_relations:
        if a not in known or b not in known:
            graph.skipped += 1
            continue
        graph.add(a, b, rel)
    if graph.skipped:
        log.warning("skipped %d relation rows referencing unknown items", graph.skipped)
    by_brand = defaultdict(list)
    by_cat_price = defaultdict(list)
    for m in items:
        if m.brand_id != ATTR_UNKNOWN:
            by_brand[m.brand_id].append(m.item_id)
        if m.category_id != ATTR_UNKNOWN and m.price_bin is not None:
            by_cat_price[(m.category_id, m.price_bin)].append(m.item_id)
    for group in by_brand.values():
        for a, b in combinations(sorted(group), 2):
            graph.add(a, b, SHARE_BRAND)
    for group in by_cat_price.values():
        for a, b in combinations(sorted(group), 2):
            graph.add(a, b, SIMILAR_ITEM)
    return graph


# ---------------------------------------------------------------- dataset

@dataclass
class Dataset:
    """Dense-id view of a filtered corpus.

    Users are 0..n_users-1; items 1..n_items (0 is padding). ``item_cat``,
    ``item_brand`` and ``item_price`` are attribute indices per item id.
    """

    sequences: list[list[int]]
    timestamps: list[list[int]]
    n_items: int
    item_cat: np.ndarray
    item_brand: np.ndarray
    item_price: np.ndarray
    graph: RelationGraph
    n_categories: int
    n_brands: int
    user_ids: list[int] = field(default_factory=list)
    item_ids: list[int] = field(default_factory=list)
    category_names: list[str] = field(default_factory=list)
    brand_names: list[str] = field(default_factory=list)
    max_len: int = 20

    @property
    def n_users(self) -> int:
        return len(self.sequences)

    @cached_property
    def histories(self) -> list[frozenset[int]]:
        return [frozenset(s) for s in self.sequences]

    def history(self, user: int) -> frozenset[int]:
        return self.histories[user]


def build_dataset(interactions: list[Interaction], raw_items: list[RawItem],
                  raw_relations, max_len: int = 20) -> Dataset:
    """Map raw ids to dense ids and attach metadata and relations (input already filtered)."""
    if not interactions:
        raise EmptyDatasetError("no interactions left after filtering")
    user_ids = sorted({r.user_id for r in interactions})
    item_ids = sorted({r.item_id for r in interactions})
    uidx = {u: k for k, u in enumerate(user_ids)}
    iidx = {i: k + 1 for k, i in enumerate(item_ids)}
    seqs: list[list[int]] = [[] for _ in user_ids]
    ts: list[list[int]] = [[] for _ in user_ids]
    for r in sorted(interactions, key=lambda r: (r.user_id, r.timestamp)):
        seqs[uidx[r.user_id]].append(iidx[r.item_id])
        ts[uidx[r.user_id]].append(r.timestamp)

    raw_by_id = {it.item_id: it for it in raw_items}
    categories = sorted({raw_by_id[i].category for i in item_ids if i in raw_by_id and raw_by_id[i].category})
    brands = sorted({raw_by_id[i].brand for i in item_ids if i in raw_by_id and raw_by_id[i].brand})
    cidx = {c: k + 2 for k, c in enumerate(categories)}
    bidx = {b: k + 2 for k, b in enumerate(brands)}
    metas = []
    for i in item_ids:
        raw = raw_by_id.get(i)
        if raw is None:
            metas.append(ItemMeta(iidx[i]))
            continue
        metas.append(ItemMeta(iidx[i], cidx.get(raw.category, ATTR_UNKNOWN),
                              bidx.get(raw.brand, ATTR_UNKNOWN), raw.price))
    if any(m.price is not None for m in metas):
        bin_prices(metas)
    n = len(item_ids)
    cat = np.zeros(n + 1, dtype=np.int64)
    brand = np.zeros(n + 1, dtype=np.int64)
    price = np.zeros(n + 1, dtype=np.int64)
    for m in metas:
        cat[m.item_id], brand[m.item_id], price[m.item_id] = m.category_id, m.brand_id, m.price_index
    dense_rel = [(iidx.get(a, -1), iidx.get(b, -1), r) for a, b, r in raw_relations]
    graph = build_relation_graph(metas, dense_rel, n_items=n)
    return Dataset(seqs, ts, n, cat, brand, price, graph,
                   n_categories=len(categories), n_brands=len(brands),
                   user_ids=user_ids, item_ids=item_ids,
                   category_names=categories, brand_names=brands, max_len=max_len)


# ---------------------------------------------------------------- splits

@dataclass
class Instances:
    """Parallel arrays of prediction instances (one target each)."""

    users: np.ndarray          # [N]
    targets: np.ndarray        # [N]
    target_ts: np.ndarray      # [N] seconds
    ctx_items: np.ndarray      # [N, L], left-padded with 0
    ctx_ts: np.ndarray         # [N, L] seconds

    def __len__(self) -> int:
        return len(self.users)

    @property
    def mask(self) -> np.ndarray:
        return self.ctx_items != PAD

    def subset(self, idx) -> "Instances":
        return Instances(self.users[idx], self.targets[idx], self.target_ts[idx],
                         self.ctx_items[idx], self.ctx_ts[idx])


def _instance(seq, ts, pos, max_len):
    lo = max(0, pos - max_len)
    items = seq[lo:pos]
    times = ts[lo:pos]
    pad = max_len - len(items)
    fill_t = times[0] if times else ts[pos]
    return [PAD] * pad + list(items), [fill_t] * pad + list(times)


def make_splits(dataset: Dataset, max_len: int | None = None,
                min_context: int = 0) -> dict[str, Instances]:
    """Leave-one-out: last event is test, second last validation, the rest training.

    Every training target gets the up-to-``max_len`` events before it as context.
    ``min_context`` drops training targets with shorter contexts (the first
    event of a sequence has none).
    """
    L = max_len or dataset.max_len
    parts = {k: ([], [], [], [], []) for k in SPLITS}
    for u, (seq, ts) in enumerate(zip(dataset.sequences, dataset.timestamps)):
        n = len(seq)
        assert n >= 3, f"user {u} has {n} interactions; leave-one-out needs >= 3"
        targets = [(p, "train") for p in range(n - 2) if p >= min_context]
        targets += [(n - 2, "val"), (n - 1, "test")]
        for p, split in targets:
            ci, ct = _instance(seq, ts, p, L)
            cols = parts[split]
            cols[0].append(u)
            cols[1].append(seq[p])
            cols[2].append(ts[p])
            cols[3].append(ci)
            cols[4].append(ct)
    out = {}
    for split, (us, tg, tt, ci, ct) in parts.items():
        out[split] = Instances(np.array(us, dtype=np.int64), np.array(tg, dtype=np.int64),
                               np.array(tt, dtype=np.int64),
                               np.array(ci, dtype=np.int64).reshape(-1, L),
                               np.array(ct, dtype=np.int64).reshape(-1, L))
    return out


def sample_negatives(dataset: Dataset, user: int, n: int = 99, seed: int = 0,
                     split: str = "test", target: int | None = None) -> np.ndarray:
    """``n`` distinct items outside the user's whole history, fixed by (seed, user, split)."""
    excluded = np.fromiter(dataset.history(user), dtype=np.int64)
    if target is not None:
        excluded = np.append(excluded, target)
    pool = np.setdiff1d(np.arange(1, dataset.n_items + 1), excluded)
    if pool.size < n:
        raise SamplingError(f"user {user}: only {pool.size} candidate negatives, need {n}")
    rng = np.random.default_rng([seed, user, SPLITS[split]])
    return rng.choice(pool, size=n, replace=False)


def sample_training_negatives(dataset: Dataset, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One uniform non-history item per user (rejection sampling)."""
    out = rng.integers(1, dataset.n_items + 1, size=len(users))
    for k, u in enumerate(users):
        hist = dataset.history(int(u))
        while out[k] in hist:
            out[k] = rng.integers(1, dataset.n_items + 1)
    return out


# ---------------------------------------------------------------- prepared dir

def prepare(interactions_path, items_path, relations_path, min_core: int = 5,
            max_len: int = 20) -> tuple[Dataset, dict]:
    raw = load_interactions(interactions_path)
    filtered = five_core_filter(raw, min_core)
    report = {
        "interactions_before": len(raw),
        "users_before": len({r.user_id for r in raw}),
        "items_before": len({r.item_id for r in raw}),
        "interactions_after": len(filtered),
        "users_after": len({r.user_id for r in filtered}),
        "items_after": len({r.item_id for r in filtered}),
    }
    if not filtered:
        raise EmptyDatasetError("dataset is empty after 5-core filtering")
    ds = build_dataset(filtered, load_items(items_path), load_raw_relations(relations_path), max_len)
    report["avg_seq_length"] = round(len(filtered) / ds.n_users, 4)
    report["relation_edges"] = ds.graph.counts()
    report["relation_rows_skipped"] = ds.graph.skipped
    report["n_categories"] = ds.n_categories
    report["n_brands"] = ds.n_brands
    return ds, report


def _csv(xs) -> str:
    return ",".join(str(int(x)) for x in xs)


def save_dataset(ds: Dataset, out_dir, report: dict | None = None) -> None:
    """Write dataset.json, sequences.tsv, items.tsv, relations.tsv and splits.tsv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": 1,
        "n_users": ds.n_users,
        "n_items": ds.n_items,
        "n_categories": ds.n_categories,
        "n_brands": ds.n_brands,
        "n_price_bins": N_PRICE_BINS,
        "max_len": ds.max_len,
        "user_ids": ds.user_ids,
        "item_ids": ds.item_ids,
        "categories": ds.category_names,
        "brands": ds.brand_names,
    }
    (out / "dataset.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    with (out / "sequences.tsv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("user\titems\ttimestamps\n")
        for u, (s, t) in enumerate(zip(ds.sequences, ds.timestamps)):
            fh.write(f"{u}\t{_csv(s)}\t{_csv(t)}\n")
    with (out / "items.tsv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("item\tcategory\tbrand\tprice\n")
        for i in range(1, ds.n_items + 1):
            fh.write(f"{i}\t{ds.item_cat[i]}\t{ds.item_brand[i]}\t{ds.item_price[i]}\n")
    with (out / "relations.tsv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("item_a\titem_b\trelation\n")
        for rel in RELATIONS:
            for a, b in sorted(e for e in ds.graph.edges[rel] if e[0] < e[1]):
                fh.write(f"{a}\t{b}\t{rel}\n")
    splits = make_splits(ds)
    with (out / "splits.tsv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("split\tuser\ttarget\ttarget_ts\tcontext_items\tcontext_ts\n")
        for name, inst in splits.items():
            for k in range(len(inst)):
                fh.write(f"{name}\t{inst.users[k]}\t{inst.targets[k]}\t{inst.target_ts[k]}\t"
                         f"{_csv(inst.ctx_items[k])}\t{_csv(inst.ctx_ts[k])}\n")
    if report is not None:
        (out / "prepare_report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n",
                                                 encoding="utf-8")


def load_dataset(data_dir) -> Dataset:
    d = Path(data_dir)
    if not (d / "dataset.json").is_file():
        raise FileNotFoundError(f"{d}: not a prepared dataset directory (no dataset.json)")
    meta = json.loads((d / "dataset.json").read_text(encoding="utf-8"))
    n = meta["n_items"]
    seqs, tss = [], []
    for _, (u, s, t) in _read_tsv(d / "sequences.tsv", ("user", "items", "timestamps")):
        seqs.append([int(x) for x in s.split(",")])
        tss.append([int(x) for x in t.split(",")])
    cat = np.zeros(n + 1, dtype=np.int64)
    brand = np.zeros(n + 1, dtype=np.int64)
    price = np.zeros(n + 1, dtype=np.int64)
    for _, (i, c, b, p) in _read_tsv(d / "items.tsv", ("item", "category", "brand", "price")):
        i = int(i)
        cat[i], brand[i], price[i] = int(c), int(b), int(p)
    graph = RelationGraph(n)
    for _, (a, b, r) in _read_tsv(d / "relations.tsv", ("item_a", "item_b", "relation")):
        graph.add(int(a), int(b), r)
    return Dataset(seqs, tss, n, cat, brand, price, graph,
                   n_categories=meta["n_categories"], n_brands=meta["n_brands"],
                   user_ids=meta["user_ids"], item_ids=meta["item_ids"],
                   category_names=meta["categories"], brand_names=meta["brands"],
                   max_len=meta["max_len"])


def load_splits(data_dir, max_len: int) -> dict[str, Instances]:
    parts = {k: ([], [], [], [], []) for k in SPLITS}
    header = ("split", "user", "target", "target_ts", "context_items", "context_ts")
    for _, (split, u, tg, tt, ci, ct) in _read_tsv(Path(data_dir) / "splits.tsv", header):
        cols = parts[split]
        cols[0].append(int(u))
        cols[1].append(int(tg))
        cols[2].append(int(tt))
        cols[3].append([int(x) for x in ci.split(",")])
        cols[4].append([int(x) for x in ct.split(",")])
    return {k: Instances(np.array(a, dtype=np.int64), np.array(b, dtype=np.int64),
                         np.array(c, dtype=np.int64),
                         np.array(d_, dtype=np.int64).reshape(-1, max_len),
                         np.array(e, dtype=np.int64).reshape(-1, max_len))
            for k, (a, b, c, d_, e) in parts.items()}


def without_relations(ds: Dataset) -> Dataset:
    """Copy of ``ds`` sharing everything but with an empty relation graph."""
    return replace(ds, graph=RelationGraph(ds.n_items))

