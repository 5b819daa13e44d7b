"""Experiment orchestration: train, certify, lambda sweep, per-stage evaluation, reports.

Every command writes into a private temporary directory under ``out_dir``
and promotes it to its final name only after success, so a crash never
leaves a half-written result in place. A lock file keeps two processes out
of the same ``out_dir``. Artifacts carry the config hash, the seed and the
library versions and contain nothing time-dependent, so identical inputs
give identical bytes.
"""
from __future__ import annotations

import glob
import json
import os
import shutil
import tempfile
from contextlib import contextmanager

import numpy as np
import scipy
from filelock import FileLock, Timeout

from . import __version__, kernels
from .certify import certify_dataset, latent_robust_mask, metrics_from_verdicts
from .config import ExperimentConfig, parse_lambdas
from .data import DatasetSplit, load_digits_split, load_mnist_idx, synth_blobs
from .errors import CheckpointError, ConfigError, MaarError
from .maar import train
from .nn import checkpoint, init_network

TRAIN_DIR = "train"
CERTIFY_DIR = "certify"
SWEEP_DIR = "sweep"
STAGE_EVAL_DIR = "stage_eval"


# -- provenance and file plumbing -----------------------------------------
def versions() -> dict:
    return {"maarcert": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "kernels": kernels.BACKEND}


def provenance(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.digest(), "seed": cfg.seed, "versions": versions()}


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def _write(path, text: str):
    with open(path, "w") as fh:
        fh.write(text)


def _table_header(cfg: ExperimentConfig) -> str:
    v = versions()
    libs = " ".join(f"{k}={v[k]}" for k in sorted(v))
    return f"# config {cfg.digest()} seed {cfg.seed} {libs}\n"


def format_table(headers, rows) -> str:
    """Right-aligned plain-text table; floats get four decimals."""

    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    body = [[cell(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in body)
    return "\n".join(lines) + "\n"


@contextmanager
def _locked(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    lock = FileLock(os.path.join(out_dir, ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise MaarError(f"another experiment holds the lock on {out_dir}") from None
    try:
        yield
    finally:
        lock.release()


@contextmanager
def _staged(out_dir, name):
    """Yield a scratch directory that replaces ``out_dir/name`` on success."""
    final = os.path.join(out_dir, name)
    scratch = tempfile.mkdtemp(prefix=f".{name}-", dir=out_dir)
    try:
        yield scratch
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    if os.path.exists(final):
        retired = tempfile.mkdtemp(prefix=f".{name}-old-", dir=out_dir)
        os.replace(final, os.path.join(retired, name))
        os.replace(scratch, final)
        shutil.rmtree(retired, ignore_errors=True)
    else:
        os.replace(scratch, final)


# -- data and model construction ---------------------------------------------
def load_data(cfg: ExperimentConfig):
    """Return ``(train, test)`` splits for the configured dataset."""
    if cfg.dataset == "digits":
        return load_digits_split(cfg.n_train, cfg.n_test, cfg.data_seed)
    if cfg.dataset == "idx":
        tr = load_mnist_idx(cfg.train_images, cfg.train_labels, cfg.n_train or None, "train")
        te = load_mnist_idx(cfg.test_images, cfg.test_labels, cfg.n_test or None, "test")
        return tr, te
    pool = synth_blobs(
        cfg.blobs_classes, 2 * cfg.blobs_per_class, cfg.blobs_dim, cfg.blobs_margin, cfg.data_seed, cfg.blobs_spread
    )
    half = cfg.blobs_classes * cfg.blobs_per_class
    return (
        DatasetSplit(pool.X[:half], pool.y[:half], "train", pool.means),
        DatasetSplit(pool.X[half:], pool.y[half:], "test", pool.means),
    )


def build_network(cfg: ExperimentConfig, input_shape, num_classes: int):
    arch = cfg.architecture
    if arch[-1][0] != "dense" or arch[-1][1] != num_classes:
        raise ConfigError(f"last layer must be dense:{num_classes} for this dataset, got {arch[-1]}")
    return init_network(arch, tuple(input_shape), cfg.seed)


def _num_classes(cfg, train_split):
    return cfg.blobs_classes if cfg.dataset == "blobs" else max(10, int(train_split.y.max()) + 1)


# -- commands --------------------------------------------------------------
def _train_into(cfg: ExperimentConfig, target: str, data=None):
    tr, te = data or load_data(cfg)
    net = build_network(cfg, tr.X.shape[1:], _num_classes(cfg, tr))
    prov = provenance(cfg)
    net, reports = train(net, (tr.X, tr.y), cfg.training(), target, meta=prov)
    records = [dict(r, **{"config_hash": prov["config_hash"], "seed": cfg.seed}) for rep in reports for r in rep.as_dicts()]
    _write(os.path.join(target, "stage_reports.jsonl"), _jsonl([{"header": prov}] + records))
    rows = [(r["stage"], r["layer"], r["epoch"], r["accuracy"], r["verified_error"], r["loss_ori"], r["loss_adv"], r["loss_kl"]) for r in records]
    table = format_table(["stage", "layer", "epoch", "acc", "ve", "loss_ori", "loss_adv", "loss_kl"], rows)
    _write(os.path.join(target, "stage_reports.txt"), _table_header(cfg) + table)
    return net, reports


def run_train(cfg: ExperimentConfig, data=None) -> dict:
    """Train per the stage plan; writes ``stage_{i}.json`` checkpoints and stage reports."""
    with _locked(cfg.out_dir), _staged(cfg.out_dir, TRAIN_DIR) as scratch:
        net, reports = _train_into(cfg, scratch, data)
    return {"net": net, "reports": reports, "dir": os.path.join(cfg.out_dir, TRAIN_DIR)}


def _evaluate(cfg: ExperimentConfig, net, test: DatasetSplit):
    X, Y = test.X, test.y
    if cfg.cert_limit:
        X, Y = X[: cfg.cert_limit], Y[: cfg.cert_limit]
    eps = cfg.certify_eps
    verdicts = certify_dataset(net, X, Y, eps, cfg.certification())
    lr_mask = None
    if 0 <= cfg.lr_layer < net.depth:
        lr_mask = latent_robust_mask(net, X, Y, eps, cfg.lr_layer, cfg.latent_attack(), seed=cfg.seed)
    return verdicts, metrics_from_verdicts(verdicts, lr_mask), lr_mask


def _verdict_records(verdicts, labels, lr_mask):
    out = []
    for i, (v, y) in enumerate(zip(verdicts, labels)):
        rec = {
            "index": i,
            "label": int(y),
            "outcome": v.outcome.value,
            "stage": v.stage,
            "verified": v.verified,
            "attack_success": v.attack_success,
            "margins": v.margins,
            "nodes": v.nodes,
            "splits": v.splits,
        }
        if lr_mask is not None:
            rec["latent_robust"] = bool(lr_mask[i])
        out.append(rec)
    return out


def _metrics_table(cfg, rows) -> str:
    return _table_header(cfg) + format_table(["acc", "cr", "ve", "lr"], rows)


def run_certify(cfg: ExperimentConfig, checkpoint_path, data=None) -> dict:
    """Certify the test split with a saved network; writes a verdict log and metrics."""
    net = checkpoint.load(checkpoint_path)
    _, te = data or load_data(cfg)
    with _locked(cfg.out_dir), _staged(cfg.out_dir, CERTIFY_DIR) as scratch:
        verdicts, metrics, lr_mask = _evaluate(cfg, net, te)
        prov = provenance(cfg)
        header = dict(prov, checkpoint=os.path.basename(str(checkpoint_path)), eps=cfg.certify_eps)
        _write(os.path.join(scratch, "verdicts.jsonl"), _jsonl([{"header": header}] + _verdict_records(verdicts, te.y, lr_mask)))
        _write(os.path.join(scratch, "metrics.json"), _json(dict(header, metrics=metrics.as_dict())))
        m = metrics
        _write(os.path.join(scratch, "metrics.txt"), _metrics_table(cfg, [(m.acc, m.cr, m.ve, m.lr)]))
    return {"verdicts": verdicts, "metrics": metrics, "net": net, "dir": os.path.join(cfg.out_dir, CERTIFY_DIR)}


def run_sweep_lambda(cfg: ExperimentConfig, lambdas) -> dict:
    """Train and certify one MAAR model per lambda; one (ACC, CR) pair each."""
    if isinstance(lambdas, str):
        lambdas = parse_lambdas(lambdas)
    if not lambdas or any(v < 0 for v in lambdas):
        raise ConfigError("lambda values must be non-negative")
    data = load_data(cfg)
    rows = []
    with _locked(cfg.out_dir), _staged(cfg.out_dir, SWEEP_DIR) as scratch:
        for lam in lambdas:
            sub = cfg.replace(lam=float(lam), loss_variant="maar")
            target = os.path.join(scratch, f"lambda_{lam:g}")
            os.makedirs(target)
            net, _ = _train_into(sub, target, data)
            _, metrics, _ = _evaluate(sub, net, data[1])
            rows.append({"lambda": float(lam), "acc": metrics.acc, "cr": metrics.cr, "ve": metrics.ve, "counts": metrics.counts})
        prov = provenance(cfg)
        series = {"x": "lambda", "lambda": [r["lambda"] for r in rows], "acc": [r["acc"] for r in rows], "cr": [r["cr"] for r in rows]}
        _write(os.path.join(scratch, "sweep.json"), _json(dict(prov, rows=rows, series=series)))
        table = format_table(["lambda", "acc", "cr", "ve"], [(r["lambda"], r["acc"], r["cr"], r["ve"]) for r in rows])
        _write(os.path.join(scratch, "sweep.txt"), _table_header(cfg) + table)
    return {"rows": rows, "series": series, "dir": os.path.join(cfg.out_dir, SWEEP_DIR)}


def stage_checkpoints(cfg: ExperimentConfig) -> list:
    """Checkpoint paths of a finished training run, in stage order."""
    n = len(cfg.training().stage_plan)
    paths = [os.path.join(cfg.out_dir, TRAIN_DIR, f"stage_{i}.json") for i in range(n)]
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise CheckpointError(f"missing checkpoint {missing[0]}; run train first")
    return paths


def run_stage_eval(cfg: ExperimentConfig, data=None) -> dict:
    """CR and LR of each stage's checkpoint on the test split."""
    paths = stage_checkpoints(cfg)
    _, te = data or load_data(cfg)
    rows = []
    with _locked(cfg.out_dir), _staged(cfg.out_dir, STAGE_EVAL_DIR) as scratch:
        for i, path in enumerate(paths):
            net = checkpoint.load(path)
            layer = checkpoint.load_meta(path).get("layer")
            _, m, _ = _evaluate(cfg, net, te)
            rows.append({"stage": i, "layer": layer, "acc": m.acc, "cr": m.cr, "lr": m.lr, "lr_layer": cfg.lr_layer})
        prov = provenance(cfg)
        _write(os.path.join(scratch, "stage_eval.json"), _json(dict(prov, rows=rows)))
        table = format_table(["stage", "layer", "acc", "cr", "lr"], [(r["stage"], r["layer"], r["acc"], r["cr"], r["lr"]) for r in rows])
        _write(os.path.join(scratch, "stage_eval.txt"), _table_header(cfg) + table)
    return {"rows": rows, "dir": os.path.join(cfg.out_dir, STAGE_EVAL_DIR)}


def report(in_dir) -> str:
    """Collect every table under ``in_dir`` into one text report."""
    if not os.path.isdir(in_dir):
        raise MaarError(f"no such directory: {in_dir}")
    found = sorted(glob.glob(os.path.join(in_dir, "**", "*.txt"), recursive=True))
    found = [p for p in found if not any(part.startswith(".") for part in os.path.relpath(p, in_dir).split(os.sep))]
    if not found:
        raise MaarError(f"no result tables under {in_dir}")
    parts = []
    for path in found:
        with open(path) as fh:
            parts.append(f"== {os.path.relpath(path, in_dir)}\n{fh.read()}")
    return "\n".join(parts)
