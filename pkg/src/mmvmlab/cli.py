"""Command-line entry point: ``gen-data``, ``train``, ``eval`` and ``sweep``.

Exit codes: 0 success, 2 configuration or validation error, 3 runtime or
numeric error (including training divergence).
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import os
import sys
import time
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .aggregation import STRATEGIES
from .data import MultimodalDataset, SyntheticConfig, dataset_hash, generate_synthetic, load_dataset, save_dataset
from .distributions import RngStream
from .errors import ConfigError, ContractViolation, FormatError, NumericError
from .evaluation import CoherenceClassifier, RunMetrics, csv_header, evaluate, train_coherence_classifiers
from .model import MultimodalModel, init_model, load_checkpoint, save_checkpoint
from .training import ACCEPTANCE_BETAS, RunConfig, TrainingDiverged, train

log = logging.getLogger("mmvmlab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
TRAIN_FILE, TEST_FILE, MANIFEST_FILE = "train.mmds", "test.mmds", "manifest.json"
CHECKPOINT_FILE, METRICS_FILE = "checkpoint.mmck", "metrics.json"
SWEEP_CSV, AGGREGATE_CSV = "sweep.csv", "aggregate.csv"


# ---------------------------------------------------------------------------
# configuration plumbing


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None


def _overrides(args: argparse.Namespace, names: Sequence[str]) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


DATA_FLAGS = ("n_modalities", "n_classes", "n_train", "n_test", "dims", "class_scale",
              "style_scale", "noise_std", "seed")
RUN_FLAGS = ("strategy", "beta", "seed", "epochs", "batch_size", "lr", "latent_dim", "hidden",
             "activation", "likelihood", "scale", "log_interval")


def synthetic_config(args: argparse.Namespace) -> SyntheticConfig:
    """JSON file fields, overridden by any flags given on the command line."""
    base = _read_json(args.config) if getattr(args, "config", None) else {}
    base = base.get("data", base) if "data" in base and isinstance(base["data"], dict) else base
    base.update(_overrides(args, DATA_FLAGS))
    return SyntheticConfig.from_dict(base)


def run_config(args: argparse.Namespace) -> RunConfig:
    base = _read_json(args.config) if getattr(args, "config", None) else {}
    base.update(_overrides(args, RUN_FLAGS))
    if getattr(args, "data", None):
        base["data_path"] = str(args.data)
    if getattr(args, "out", None):
        base["out_dir"] = str(args.out)
    return RunConfig.from_dict(base)


def load_data_dir(path) -> tuple[MultimodalDataset, MultimodalDataset]:
    path = Path(path)
    for name in (TRAIN_FILE, TEST_FILE):
        if not (path / name).is_file():
            raise ConfigError(f"dataset directory {path} has no {name}")
    return load_dataset(path / TRAIN_FILE), load_dataset(path / TEST_FILE)


def write_data_dir(cfg: SyntheticConfig, out) -> dict:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    train_ds, test_ds = generate_synthetic(cfg)
    save_dataset(train_ds, out / TRAIN_FILE)
    save_dataset(test_ds, out / TEST_FILE)
    manifest = {"config": cfg.to_dict(), "files": {"train": TRAIN_FILE, "test": TEST_FILE},
                "dataset_hash": dataset_hash(train_ds, test_ds)}
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def _check_dims(model: MultimodalModel, data: MultimodalDataset) -> None:
    if tuple(model.config.input_dims) != tuple(data.dims):
        raise ConfigError(f"checkpoint expects input dims {list(model.config.input_dims)} "
                          f"but the dataset has {list(data.dims)}")


# ---------------------------------------------------------------------------
# coherence classifier cache


def coherence_cache_path(cache_dir, train_ds: MultimodalDataset, test_ds: MultimodalDataset) -> Path:
    return Path(cache_dir) / f"coherence-{dataset_hash(train_ds, test_ds)[:16]}.npz"


def coherence_classifiers(train_ds: MultimodalDataset, test_ds: MultimodalDataset,
                          cache_dir=None) -> CoherenceClassifier:
    """Train the per-modality oracles, or load them from a cache keyed by dataset content."""
    if cache_dir is None:
        return train_coherence_classifiers(train_ds, test_ds)
    cache = coherence_cache_path(cache_dir, train_ds, test_ds)
    if cache.is_file():
        return CoherenceClassifier.load(cache)
    clf = train_coherence_classifiers(train_ds, test_ds)
    cache.parent.mkdir(parents=True, exist_ok=True)
    tmp = cache.with_suffix(f".{os.getpid()}.tmp.npz")
    clf.save(tmp)
    os.replace(tmp, cache)
    return clf


# ---------------------------------------------------------------------------
# train / eval


def train_run(cfg: RunConfig, train_ds: MultimodalDataset, out_dir) -> tuple[MultimodalModel, list[dict]]:
    """Train one run and write its checkpoint and a training-only metrics file.

    On divergence the last finite parameters are still checkpointed before
    the error propagates.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = RngStream(cfg.seed)
    model = init_model(cfg.model_config(train_ds.dims), rng)
    extra = {"run_config": cfg.to_dict()}
    try:
        result = train(model, train_ds, cfg, rng)
    except TrainingDiverged as exc:
        save_checkpoint(out / CHECKPOINT_FILE, exc.model, beta=cfg.beta, seed=cfg.seed, epoch=exc.epoch,
                        extra={**extra, "diverged_at_step": exc.step})
        raise
    save_checkpoint(out / CHECKPOINT_FILE, result.model, beta=cfg.beta, seed=cfg.seed,
                    epoch=result.epochs, extra=extra)
    last = len(result.trace) - 1
    trace = [e for e in result.trace if e["step"] % cfg.log_interval == 0 or e["step"] == last]
    doc = {"run_config": cfg.to_dict(), "epoch": result.epochs, "steps": result.steps,
           "objective_trace": trace, "evaluated": False}
    (out / METRICS_FILE).write_text(json.dumps(doc, indent=1, sort_keys=True))
    return result.model, trace


def append_csv_row(path, header: list[str], row: list) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(header)
        writer.writerow(row)


def eval_run(run_dir, train_ds: MultimodalDataset, test_ds: MultimodalDataset, *,
             classifiers: CoherenceClassifier, deterministic: bool = False,
             csv_path=None) -> RunMetrics:
    run_dir = Path(run_dir)
    model, header = load_checkpoint(run_dir / CHECKPOINT_FILE)
    _check_dims(model, train_ds)
    previous = {}
    if (run_dir / METRICS_FILE).is_file():
        previous = json.loads((run_dir / METRICS_FILE).read_text())
    cfg = header.get("run_config", {})
    metrics = evaluate(model, train_ds, test_ds, classifiers, seed=int(header["seed"]),
                       deterministic=deterministic, beta=float(header["beta"]), epoch=int(header["epoch"]),
                       trace=previous.get("objective_trace", []), config=cfg)
    metrics.save(run_dir / METRICS_FILE)
    if csv_path is not None:
        append_csv_row(csv_path, csv_header(model.config.n_modalities), metrics.csv_row("ok"))
    return metrics


# ---------------------------------------------------------------------------
# sweep


@dataclass(frozen=True)
class SweepSpec:
    strategies: tuple[str, ...]
    betas: tuple[float, ...]
    seeds: tuple[int, ...]

    def cells(self) -> list[tuple[str, float, int]]:
        """Cartesian product in declared order (strategy-major, seed fastest)."""
        return list(itertools.product(self.strategies, self.betas, self.seeds))


def cell_dir(root, strategy: str, beta: float, seed: int) -> Path:
    return Path(root) / "runs" / f"{strategy}_beta{beta:.6g}_seed{seed}"


def _run_cell(job: dict) -> dict:
    """Train and evaluate one sweep cell; never raises, returns a status record."""
    started = time.perf_counter()
    try:
        cfg = RunConfig.from_dict(job["config"])
        train_ds, test_ds = load_data_dir(job["data"])
        classifiers = CoherenceClassifier.load(job["classifiers"])
        out = Path(cfg.out_dir)
        train_run(cfg, train_ds, out)
        metrics = eval_run(out, train_ds, test_ds, classifiers=classifiers,
                           deterministic=job["deterministic"])
        row = metrics.csv_row("ok")
    except (ConfigError, ContractViolation, FormatError) as exc:
        row, metrics = None, None
        status = f"config-error: {exc}"
    except (NumericError, FloatingPointError, OverflowError) as exc:
        row, metrics = None, None
        status = f"numeric-error: {exc}"
    else:
        status = "ok"
    return {"strategy": job["config"]["strategy"], "beta": job["config"]["beta"],
            "seed": job["config"]["seed"], "row": row, "status": status,
            "seconds": time.perf_counter() - started}


def _failed_row(rec: dict, n_modalities: int) -> list:
    n_cols = len(csv_header(n_modalities))
    row = [rec["strategy"], repr(float(rec["beta"])), rec["seed"]] + [""] * (n_cols - 4)
    return row + [rec["status"].replace("\n", " ")]


def aggregate_rows(rows: list[dict], n_modalities: int) -> tuple[list[str], list[list]]:
    """Per-(strategy, beta) mean and population std over seeds of every numeric column."""
    header = csv_header(n_modalities)
    metric_cols = [c for c in header if c not in ("strategy", "beta", "seed", "epoch", "status")]
    groups: dict[tuple[str, float], list[dict]] = {}
    for r in rows:
        if r.get("status", "ok") != "ok":
            continue
        groups.setdefault((r["strategy"], float(r["beta"])), []).append(r)
    out_header = ["strategy", "beta", "n_seeds"]
    for c in metric_cols:
        out_header += [f"{c}_mean", f"{c}_std"]
    out_rows = []
    for (strategy, beta), grp in groups.items():
        row = [strategy, repr(beta), len(grp)]
        for c in metric_cols:
            vals = np.array([float(g[c]) for g in grp])
            row += [repr(float(vals.mean())), repr(float(vals.std()))]
        out_rows.append(row)
    return out_header, out_rows


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_aggregate(sweep_csv, out_path, n_modalities: int) -> list[list]:
    header, rows = aggregate_rows(read_sweep_csv(sweep_csv), n_modalities)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return rows


def worker_count(requested: int | None = None) -> int:
    cap = os.environ.get("MMVAE_THREADS")
    n = requested if requested is not None else (int(cap) if cap else 1)
    if cap:
        try:
            n = min(n, int(cap))
        except ValueError:
            raise ConfigError(f"MMVAE_THREADS must be an integer, got {cap!r}") from None
    return max(1, n)


def run_sweep(spec: SweepSpec, data_dir, out_dir, base: RunConfig, *, workers: int = 1,
              deterministic: bool = False, progress=None) -> Path:
    """Train+evaluate every cell; failures are recorded in the status column."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = load_data_dir(data_dir)
    coherence_classifiers(train_ds, test_ds, out / "cache")
    clf_path = coherence_cache_path(out / "cache", train_ds, test_ds)
    jobs = []
    for strategy, beta, seed in spec.cells():
        cfg = {**base.to_dict(), "strategy": strategy, "beta": float(beta), "seed": int(seed),
               "data_path": str(data_dir), "out_dir": str(cell_dir(out, strategy, beta, seed))}
        jobs.append({"config": cfg, "data": str(data_dir), "classifiers": str(clf_path),
                     "deterministic": deterministic})
    sweep_csv = out / SWEEP_CSV
    M = train_ds.n_modalities
    header = csv_header(M)

    def record(rec: dict) -> None:
        # the parent process is the single CSV writer
        row = rec["row"] if rec["status"] == "ok" else _failed_row(rec, M)
        append_csv_row(sweep_csv, header, row)
        if progress is not None:
            progress(rec)

    if workers <= 1:
        for job in jobs:
            record(_run_cell(job))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rec in pool.map(_run_cell, jobs):
                record(rec)
    write_aggregate(sweep_csv, out / AGGREGATE_CSV, M)
    return sweep_csv


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args: argparse.Namespace) -> int:
    manifest = write_data_dir(synthetic_config(args), args.out)
    print(f"wrote {args.out}/{{{TRAIN_FILE},{TEST_FILE},{MANIFEST_FILE}}} hash={manifest['dataset_hash'][:12]}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = run_config(args)
    if cfg.data_path is None or cfg.out_dir is None:
        raise ConfigError("train needs --data and --out (or data_path/out_dir in the config)")
    train_ds, _ = load_data_dir(cfg.data_path)
    _, trace = train_run(cfg, train_ds, cfg.out_dir)
    for entry in trace:
        log.info("epoch %d step %d total %.6f rate %.6f", entry["epoch"], entry["step"],
                 entry["total"], entry["rate"])
    print(f"wrote {cfg.out_dir}/{CHECKPOINT_FILE} and {METRICS_FILE}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    train_ds, test_ds = load_data_dir(args.data)
    cache = args.cache_dir if args.cache_dir else Path(args.data) / ".coherence-cache"
    clf = coherence_classifiers(train_ds, test_ds, cache)
    if not clf.valid:
        log.warning("coherence classifiers below validity threshold: %s", clf.test_accuracy.tolist())
    metrics = eval_run(args.run, train_ds, test_ds, classifiers=clf,
                       deterministic=args.deterministic, csv_path=args.csv)
    print(json.dumps({"recon_total": metrics.recon_total, "latent_acc_mean": metrics.latent_acc_mean,
                      "coherence_offdiag_mean": metrics.coherence_offdiag_mean}))
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    base = run_config(argparse.Namespace(**{**vars(args), "strategy": None, "beta": None,
                                             "seed": None, "data": None, "out": None}))
    spec = SweepSpec(tuple(args.strategies), tuple(args.betas), tuple(args.seeds))
    data_dir = Path(args.data) if args.data else Path(args.out) / "data"
    if not args.data:
        write_data_dir(synthetic_config(argparse.Namespace(config=None)), data_dir)

    def progress(rec):
        log.info("%s beta=%g seed=%d %s (%.1fs)", rec["strategy"], rec["beta"], rec["seed"],
                 rec["status"], rec["seconds"])

    started = time.perf_counter()
    sweep_csv = run_sweep(spec, data_dir, args.out, base, workers=worker_count(args.workers),
                          deterministic=args.deterministic, progress=progress)
    print(f"{len(spec.cells())} runs in {time.perf_counter() - started:.1f}s -> {sweep_csv} "
          f"and {Path(args.out) / AGGREGATE_CSV}")
    return EXIT_OK


def _floats(text: str) -> list[float]:
    vals = []
    for part in text.split(","):
        part = part.strip()
        try:
            # "2^-3" is accepted as shorthand for 0.125
            v = 2.0 ** float(part[2:]) if part.startswith("2^") else float(part)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {part!r}") from None
        if not math.isfinite(v):
            raise argparse.ArgumentTypeError(f"not finite: {part!r}")
        vals.append(v)
    return vals


def _ints(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {text!r}") from None


def _strategies(text: str) -> list[str]:
    tags = [t.strip() for t in text.split(",")]
    bad = [t for t in tags if t not in STRATEGIES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown strategies {bad}; choose from {list(STRATEGIES)}")
    return tags


def _add_run_flags(p: argparse.ArgumentParser, sweep: bool = False) -> None:
    if not sweep:
        p.add_argument("--strategy", choices=STRATEGIES)
        p.add_argument("--beta", type=float)
        p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--hidden", type=_ints)
    p.add_argument("--activation", choices=("relu", "tanh"))
    p.add_argument("--likelihood", choices=("gaussian-fixed-scale", "laplace-fixed-scale"))
    p.add_argument("--scale", type=float)
    p.add_argument("--log-interval", dest="log_interval", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmvmlab", description="Multimodal VAE laboratory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate train/test datasets and a manifest")
    g.add_argument("--config", help="JSON file with dataset fields")
    g.add_argument("--out", required=True)
    g.add_argument("--n-modalities", dest="n_modalities", type=int)
    g.add_argument("--n-classes", dest="n_classes", type=int)
    g.add_argument("--n-train", dest="n_train", type=int)
    g.add_argument("--n-test", dest="n_test", type=int)
    g.add_argument("--dims", type=_ints)
    g.add_argument("--class-scale", dest="class_scale", type=float)
    g.add_argument("--style-scale", dest="style_scale", type=float)
    g.add_argument("--noise-std", dest="noise_std", type=float)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model and write a checkpoint")
    t.add_argument("--config", help="JSON run config; flags override its fields")
    t.add_argument("--data")
    t.add_argument("--out")
    _add_run_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained run directory")
    e.add_argument("--run", required=True, help="directory holding checkpoint.mmck")
    e.add_argument("--data", required=True)
    e.add_argument("--csv", help="sweep CSV to append the result row to")
    e.add_argument("--cache-dir", dest="cache_dir")
    e.add_argument("--deterministic", action="store_true", help="decode posterior means")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train+evaluate strategies x betas x seeds")
    s.add_argument("--config", help="JSON run config used as the base for every cell")
    s.add_argument("--data", help="dataset directory (default: generate the default dataset)")
    s.add_argument("--out", required=True)
    s.add_argument("--strategies", type=_strategies, default=list(STRATEGIES))
    s.add_argument("--betas", type=_floats, default=list(ACCEPTANCE_BETAS))
    s.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    s.add_argument("--workers", type=int, help="parallel processes (capped by MMVAE_THREADS)")
    s.add_argument("--deterministic", action="store_true")
    _add_run_flags(s, sweep=True)
    s.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractViolation, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"error: training diverged ({exc}); last finite state saved", file=sys.stderr)
        return EXIT_RUNTIME
    except (NumericError, FloatingPointError, OverflowError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
