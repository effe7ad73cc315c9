"""Training loop with embedding pretraining and early stopping, plus the evaluation protocol."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import autograd as ag
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import Dataset, Instances, make_splits, sample_negatives, sample_training_negatives
from .metrics import DEFAULT_KS, RankingReport, batch_ranks, compute_metrics
from .model import SDIL, VARIANTS, Catalog, ModelConfig, bpr_loss, normalize_variant
from .nn import masked_mean

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    d: int = 64
    batch: int = 64
    epochs: int = 150
    patience: int = 10
    lr: float = 1e-4
    pretrain_lr: float = 5e-4
    pretrain_epochs: int = 10
    dropout: float = 0.1
    sim_heads: int = 4
    dim_heads: int = 1
    layers: int = 2
    max_len: int = 20
    seed: int = 0
    variant: str = "sdil"
    negatives: int = 99
    eval_batch: int = 256
    time_unit_days: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            want = {"int": int, "float": (int, float), "str": str}[f.type]
            if isinstance(v, bool) or not isinstance(v, want):
                raise ConfigError(f"config key {f.name!r} must be {f.type}, got {v!r}")
        for name in ("d", "batch", "epochs", "patience", "lr", "pretrain_lr", "sim_heads",
                     "dim_heads", "max_len", "negatives", "eval_batch", "time_unit_days"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"config key {name!r} must be positive")
        if self.layers < 0 or self.pretrain_epochs < 0 or self.seed < 0:
            raise ConfigError("layers, pretrain_epochs and seed must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.d % self.sim_heads or self.d % self.dim_heads:
            raise ConfigError(f"d={self.d} must be divisible by sim_heads and dim_heads")
        try:
            self.variant = normalize_variant(self.variant)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw = dict(raw)
        for f in fields(cls):
            if f.type == "float" and isinstance(raw.get(f.name), int) and not isinstance(raw[f.name], bool):
                raw[f.name] = float(raw[f.name])
        return cls(**raw)

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, layers=self.layers, dim_heads=self.dim_heads,
                           sim_heads=self.sim_heads, max_len=self.max_len, dropout=self.dropout,
                           time_unit_days=self.time_unit_days)

    def to_dict(self) -> dict:
        return asdict(self)


def build_model(ds: Dataset, cfg: TrainConfig) -> SDIL:
    return SDIL(cfg.model_config(), ds.n_users, ds.n_items, ds.n_categories, ds.n_brands, seed=cfg.seed)


def _batches(n: int, size: int, order=None):
    order = np.arange(n) if order is None else order
    for lo in range(0, n, size):
        yield order[lo:lo + size]


# ---------------------------------------------------------------- evaluation

def eval_candidates(ds: Dataset, inst: Instances, split: str, seed: int, n_neg: int) -> np.ndarray:
    """Candidate lists (target in column 0, then sampled negatives), fixed per seed.

    Cached on the dataset object so repeated validation passes reuse one draw.
    """
    store = ds.__dict__.setdefault("_eval_candidates", {})
    digest = hashlib.sha1(inst.users.tobytes() + inst.targets.tobytes()).hexdigest()
    key = (digest, split, seed, n_neg)
    if key not in store:
        rows = [np.concatenate(([t], sample_negatives(ds, int(u), n_neg, seed, split, int(t))))
                for u, t in zip(inst.users, inst.targets)]
        store[key] = np.array(rows, dtype=np.int64).reshape(len(inst), n_neg + 1)
    return store[key]


Scorer = Callable[[Instances, np.ndarray], np.ndarray]


def model_scorer(model: SDIL, catalog: Catalog, variant: str) -> Scorer:
    def score(inst, cands):
        return model.score(inst, cands, catalog, variant, training=False).data
    return score


def evaluate(model: SDIL | None, ds: Dataset, inst: Instances, split: str = "test", seed: int = 0,
             variant: str = "sdil", n_neg: int = 99, ks=DEFAULT_KS, batch: int = 256,
             scorer: Scorer | None = None) -> RankingReport:
    """Rank each target against ``n_neg`` sampled negatives and aggregate HR/NDCG/MRR."""
    if scorer is None:
        scorer = model_scorer(model, Catalog.from_dataset(ds), variant)
    cands = eval_candidates(ds, inst, split, seed, n_neg)
    ranks = np.empty(len(inst), dtype=np.int64)
    for idx in _batches(len(inst), batch):
        ranks[idx] = batch_ranks(scorer(inst.subset(idx), cands[idx]))
    return compute_metrics(ranks, ks)


# ---------------------------------------------------------------- training

class EarlyStopping:
    """Track the best validation value; signal a stop after ``patience`` epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.bad = 0

    def update(self, epoch: int, value: float) -> tuple[bool, bool]:
        """Returns (improved, stop)."""
        if value > self.best:
            self.best, self.best_epoch, self.bad = value, epoch, 0
            return True, False
        self.bad += 1
        return False, self.bad >= self.patience


@dataclass
class TrainResult:
    model: SDIL
    best_epoch: int
    best_val: float
    history: list[dict] = field(default_factory=list)
    pretrain_losses: list[float] = field(default_factory=list)


def _train_instances(splits: dict[str, Instances]) -> Instances:
    tr = splits["train"]
    return tr.subset(np.flatnonzero(tr.mask.any(axis=1)))


def pretrain_item_embeddings(model: SDIL, ds: Dataset, train: Instances, cfg: TrainConfig) -> list[float]:
    """BPR on the attention-free scorer mean(E[context]) . E[v] + u_b + i_b; returns epoch losses."""
    dim = model.dim
    params = {t.name: t for t in (dim.item_emb, dim.user_bias, dim.item_bias)}
    opt = ag.Adam(params, lr=cfg.pretrain_lr)
    rng = np.random.default_rng([cfg.seed, 1])
    losses = []
    for epoch in range(1, cfg.pretrain_epochs + 1):
        total = 0.0
        for bno, idx in enumerate(_batches(len(train), cfg.batch, rng.permutation(len(train)))):
            b = train.subset(idx)
            neg = sample_training_negatives(ds, b.users, rng)
            cands = np.stack([b.targets, neg], axis=1)
            opt.zero_grad()
            with ag.Tape() as tape:
                e_h = masked_mean(ag.gather(dim.item_emb, b.ctx_items), b.mask)
                s = dim.base_intensity(e_h, b.users, cands)
                loss = bpr_loss(s[:, 0], s[:, 1])
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite pretraining loss at epoch {epoch}, batch {bno}")
            ag.backward(loss, tape)
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(train))
    return losses


def train(ds: Dataset, cfg: TrainConfig, splits: dict[str, Instances] | None = None,
          log_path=None, on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Pretrain, then BPR with Adam; keep the best-validation-NDCG@5 parameters."""
    if cfg.max_len != ds.max_len:
        raise ConfigError(f"config max_len={cfg.max_len} but dataset was prepared with {ds.max_len}")
    splits = splits or make_splits(ds)
    train_inst = _train_instances(splits)
    catalog = Catalog.from_dataset(ds)
    model = build_model(ds, cfg)
    pre = pretrain_item_embeddings(model, ds, train_inst, cfg)
    params = model.params()
    opt = ag.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    stream = ag.DropoutStream(cfg.seed)
    stopper = EarlyStopping(cfg.patience)
    best_state = model.state_dict()
    history = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    t0 = time.perf_counter()
    try:
        for epoch in range(1, cfg.epochs + 1):
            total = 0.0
            order = rng.permutation(len(train_inst))
            for bno, idx in enumerate(_batches(len(train_inst), cfg.batch, order)):
                b = train_inst.subset(idx)
                neg = sample_training_negatives(ds, b.users, rng)
                cands = np.stack([b.targets, neg], axis=1)
                opt.zero_grad()
                try:
                    with ag.Tape() as tape:
                        s = model.score(b, cands, catalog, cfg.variant, training=True, stream=stream)
                        loss = bpr_loss(s[:, 0], s[:, 1])
                except ag.NumericError as exc:
                    raise DivergenceError(f"{exc} at epoch {epoch}, batch {bno}") from exc
                if not np.isfinite(loss.item()):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {bno}")
                ag.backward(loss, tape)
                opt.step()
                total += loss.item() * len(idx)
            val = evaluate(model, ds, splits["val"], "val", cfg.seed, cfg.variant, cfg.negatives,
                           ks=(5,), batch=cfg.eval_batch)
            rec = {"epoch": epoch, "loss": total / len(train_inst), "val_ndcg5": val.ndcg[5],
                   "elapsed_sec": round(time.perf_counter() - t0, 3)}
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if on_epoch:
                on_epoch(rec)
            log.debug("epoch %d loss %.5f val NDCG@5 %.4f", epoch, rec["loss"], rec["val_ndcg5"])
            improved, stop = stopper.update(epoch, val.ndcg[5])
            if improved:
                best_state = model.state_dict()
            if stop:
                break
    finally:
        if fh:
            fh.close()
    model.load_state_dict(best_state)
    return TrainResult(model, stopper.best_epoch, stopper.best, history, pre)


# ---------------------------------------------------------------- checkpoints

def checkpoint_meta(model: SDIL, cfg: TrainConfig, **extra) -> dict:
    return {"config": cfg.to_dict(), "sizes": model.sizes, "seed": cfg.seed, **extra}


def save_model(path, model: SDIL, cfg: TrainConfig, **extra) -> None:
    save_checkpoint(path, model.state_dict(), checkpoint_meta(model, cfg, **extra))


def load_model(path, ds: Dataset | None = None) -> tuple[SDIL, TrainConfig]:
    state, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    sizes = meta["sizes"]
    if ds is not None:
        have = {"n_users": ds.n_users, "n_items": ds.n_items,
                "n_categories": ds.n_categories, "n_brands": ds.n_brands}
        if have != sizes:
            raise CheckpointError(f"checkpoint vocabulary {sizes} does not match dataset {have}")
    model = SDIL(cfg.model_config(), seed=cfg.seed, **sizes)
    model.load_state_dict(state)
    return model, cfg


# ---------------------------------------------------------------- ablation

def run_ablation(ds: Dataset, cfg: TrainConfig, seeds=(0,), variants=VARIANTS,
                 splits: dict[str, Instances] | None = None) -> dict[str, list[RankingReport]]:
    """Train and test every variant under identical seeds and configuration."""
    splits = splits or make_splits(ds)
    table: dict[str, list[RankingReport]] = {v: [] for v in variants}
    for seed in seeds:
        for v in variants:
            run_cfg = TrainConfig.from_dict({**cfg.to_dict(), "variant": v, "seed": seed})
            res = train(ds, run_cfg, splits)
            table[v].append(evaluate(res.model, ds, splits["test"], "test", seed, v, cfg.negatives,
                                     batch=cfg.eval_batch))
    return table


def summarize(table: dict[str, list[RankingReport]]) -> tuple[dict, dict]:
    means, stds = {}, {}
    for v, reports in table.items():
        rows = [r.to_dict() for r in reports]
        means[v] = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
        stds[v] = {k: float(np.std([r[k] for r in rows])) for k in rows[0]}
    return means, stds

