"""Command-line entry point: prepare, synth, train, eval, ablate, gradcheck.

Exit codes: 0 ok, 2 usage/config/missing input, 3 empty dataset after filtering,
4 training diverged, 5 checkpoint does not match dataset, 6 negative sampling
impossible, 7 gradient check failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import gradcheck as gc
from . import plotting
from .checkpoint import CheckpointError
from .data import (N_PRICE_BINS, DataError, EmptyDatasetError, SamplingError, load_dataset, load_splits,
                   prepare, save_dataset)
from .metrics import DEFAULT_KS, format_table
from .model import VARIANTS
from .synthetic import KernelParams, generate_synthetic
from .train import (ConfigError, DivergenceError, TrainConfig, evaluate, load_model, run_ablation, save_model,
                    summarize, train)

log = logging.getLogger("sdil")

EXIT_USAGE, EXIT_EMPTY, EXIT_DIVERGED, EXIT_VOCAB, EXIT_SAMPLING, EXIT_GRADCHECK = 2, 3, 4, 5, 6, 7
MODEL_FILE = "model.sdil"
# config documents may carry these alongside the training keys
PATH_KEYS = ("data", "out")


class UsageFailure(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageFailure(f"input file not found: {p}")
    return p


def _require_dataset(path) -> Path:
    p = Path(path)
    if not (p / "dataset.json").is_file():
        raise UsageFailure(f"not a prepared dataset directory: {p}")
    return p


def read_config(path, args: argparse.Namespace | None = None, **defaults) -> tuple[TrainConfig, dict]:
    """JSON config (unknown keys rejected) with command-line overrides applied on top."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(_require_file(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    paths = {k: raw.pop(k) for k in PATH_KEYS if k in raw}
    for key, value in defaults.items():
        raw.setdefault(key, value)
    if args is not None:
        for key in ("variant", "seed", "epochs"):
            value = getattr(args, key, None)
            if value is not None:
                raw[key] = value
    return TrainConfig.from_dict(raw), paths


def _metrics_doc(report, variant: str, seed: int) -> dict:
    return {**report.to_dict(), "variant": variant, "seed": seed}


# ---------------------------------------------------------------- commands

def cmd_prepare(args) -> int:
    for p in (args.interactions, args.items, args.relations):
        _require_file(p)
    if args.price_bins != N_PRICE_BINS:
        raise UsageFailure(f"only {N_PRICE_BINS} price bins are supported")
    if args.min_core < 1 or args.max_len < 1:
        raise UsageFailure("--min-core and --max-len must be positive")
    ds, report = prepare(args.interactions, args.items, args.relations, args.min_core, args.max_len)
    save_dataset(ds, args.out, report)
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    if args.items < 50:
        raise UsageFailure(f"--items must be at least 50 (got {args.items})")
    if args.users < 1:
        raise UsageFailure("--users must be positive")
    kp = KernelParams() if args.suppression is None else KernelParams(w_supp=args.suppression)
    corpus = generate_synthetic(args.users, args.items, args.seed, kp, out_dir=args.out)
    n_events = sum(len(s) for s in corpus.users)
    print(f"wrote {args.users} users, {args.items} items, {n_events} events to {args.out}")
    return 0


def cmd_train(args) -> int:
    data = _require_dataset(args.data)
    ds = load_dataset(data)
    cfg, _ = read_config(args.config, args, max_len=ds.max_len)
    splits = load_splits(data, ds.max_len)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(rec):
        log.info("epoch %3d  loss %.5f  val NDCG@5 %.4f  (%.1fs)", rec["epoch"], rec["loss"],
                 rec["val_ndcg5"], rec["elapsed_sec"])

    res = train(ds, cfg, splits, log_path=out / "train_log.jsonl", on_epoch=progress)
    save_model(out / MODEL_FILE, res.model, cfg, best_epoch=res.best_epoch)
    # report what the stored (float32) checkpoint actually scores
    model, _ = load_model(out / MODEL_FILE, ds)
    val = evaluate(model, ds, splits["val"], "val", cfg.seed, cfg.variant, cfg.negatives, batch=cfg.eval_batch)
    _write_json(out / "val_metrics.json", _metrics_doc(val, cfg.variant, cfg.seed))
    _write_json(out / "config.json", cfg.to_dict())
    plotting.training_curve(res.history, out / "training_curve.png", f"{cfg.variant}, seed {cfg.seed}")
    print(f"best epoch {res.best_epoch} of {len(res.history)}; validation metrics:")
    print(format_table({cfg.variant: val.to_dict()}))
    return 0


def _parse_ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(sorted({int(k) for k in text.split(",") if k.strip()}))
    except ValueError:
        raise UsageFailure(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise UsageFailure("--k values must be positive")
    return ks


def cmd_eval(args) -> int:
    data = _require_dataset(args.data)
    _require_file(args.model)
    ks = _parse_ks(args.k)
    if args.negatives < 1:
        raise UsageFailure("--negatives must be positive")
    ds = load_dataset(data)
    model, cfg = load_model(args.model, ds)
    if cfg.max_len != ds.max_len:
        raise CheckpointError(f"checkpoint max_len {cfg.max_len} does not match dataset {ds.max_len}")
    splits = load_splits(data, ds.max_len)
    seed = cfg.seed if args.seed is None else args.seed
    rep = evaluate(model, ds, splits[args.split], args.split, seed, cfg.variant, args.negatives, ks,
                   batch=cfg.eval_batch)
    out = Path(args.out) if args.out else Path(args.model).parent
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "metrics.json", _metrics_doc(rep, cfg.variant, seed))
    print(format_table({cfg.variant: rep.to_dict()}))
    return 0


def _parse_seeds(text: str | None, default: int) -> list[int]:
    if text is None:
        return [default]
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageFailure(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds or min(seeds) < 0:
        raise UsageFailure("--seeds needs at least one non-negative seed")
    return seeds


def cmd_ablate(args) -> int:
    data = _require_dataset(args.data)
    ds = load_dataset(data)
    cfg, _ = read_config(args.config, args, max_len=ds.max_len)
    seeds = _parse_seeds(args.seeds, cfg.seed)
    splits = load_splits(data, ds.max_len)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    table = run_ablation(ds, cfg, seeds, VARIANTS, splits)
    means, stds = summarize(table)
    doc = {"seeds": seeds, "config": {k: v for k, v in cfg.to_dict().items() if k not in ("seed", "variant")},
           "runs": {v: [r.to_dict() for r in reps] for v, reps in table.items()},
           "mean": means, "std": stds}
    _write_json(out / "ablation.json", doc)
    text = format_table(means, spread=stds)
    (out / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    plotting.ablation_bars(means, stds, out / "ablation.png")
    print(text)
    log.info("ablation over %d seed(s) took %.1fs", len(seeds), time.perf_counter() - t0)
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = gc.run(seed=args.seed)
    width = max(len(g) for g in results)
    print(f"{'group'.ljust(width)}  {'max rel err':>12}  {'coords':>6}")
    bad = []
    for group, (err, n) in results.items():
        ok = err < gc.TOLERANCE
        print(f"{group.ljust(width)}  {err:12.3e}  {n:6d}  {'ok' if ok else 'FAIL'}")
        if not ok:
            bad.append(group)
    total = sum(n for _, n in results.values())
    print(f"{total} coordinates checked in {time.perf_counter() - t0:.1f}s (tolerance {gc.TOLERANCE:g})")
    if bad:
        print(f"gradient check failed for: {', '.join(bad)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdil", description="Static-dynamic interest recommender with "
                                "reactive temporal excitation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="filter raw files and write a prepared dataset directory")
    s.add_argument("--interactions", required=True)
    s.add_argument("--items", required=True)
    s.add_argument("--relations", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--min-core", type=int, default=5)
    s.add_argument("--max-len", type=int, default=20)
    s.add_argument("--price-bins", type=int, default=N_PRICE_BINS)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("synth", help="generate a synthetic corpus with planted substitute suppression")
    s.add_argument("--out", required=True)
    s.add_argument("--users", type=int, default=2000)
    s.add_argument("--items", type=int, default=300)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--suppression", type=float, default=None,
                   help="suppression weight (default from the generator constants; 0 disables)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="pretrain and train one variant, keep the best validation checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="rank held-out targets against sampled negatives")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--split", choices=("test", "val"), default="test")
    s.add_argument("--k", default=",".join(str(k) for k in DEFAULT_KS))
    s.add_argument("--negatives", type=int, default=99)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="directory for metrics.json (default: next to the model)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train and test all five variants over one or more seeds")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seeds")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageFailure, ConfigError, FileNotFoundError) as exc:
        code, msg = EXIT_USAGE, str(exc)
    except EmptyDatasetError as exc:
        code, msg = EXIT_EMPTY, str(exc)
    except SamplingError as exc:
        code, msg = EXIT_SAMPLING, str(exc)
    except DataError as exc:
        code, msg = EXIT_USAGE, str(exc)
    except DivergenceError as exc:
        code, msg = EXIT_DIVERGED, str(exc)
    except CheckpointError as exc:
        code, msg = EXIT_VOCAB, str(exc)
    print(f"sdil {args.command}: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
