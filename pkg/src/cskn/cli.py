"""Command-line entry point: ``cskn {train,eval,diagnose,gradcheck,cv}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Relative output directories are placed under ``$CSKN_OUTPUT_ROOT`` when set.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import data as dio
from . import diagnostics as dg
from . import features as fm
from . import kernels as kn
from . import training as tr
from .config import ConfigError, RunConfig, load_config
from .features import InitSchedule
from .modelio import ModelFormatError, load_model, save_model

log = logging.getLogger("cskn")

METRIC_FIELDS = ["repeat", "epoch", "train_loss", "test_accuracy", "nuclear_norm_W",
                 "frobenius_features", "rademacher_bound", "train_accuracy"]


class UsageError(Exception):
    pass


# -- data plumbing -----------------------------------------------------------

def _require(path: str, what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is not set")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def load_dataset(fmt: str, path: str, labels_path: str = "", label_map: dict | None = None,
                 n_features: int | None = None) -> dio.Dataset:
    if fmt == "idx":
        return dio.load_idx(_require(path, "dataset path"), _require(labels_path, "labels path"))
    return dio.load_libsvm(_require(path, "dataset path"), label_map=label_map, n_features=n_features)


def prepare_data(cfg: RunConfig, seed: int):
    """Train/test datasets after subsampling and normalization (fitted on train)."""
    train = load_dataset(cfg.data_format, cfg.train_path, cfg.train_labels_path)
    test = None
    if cfg.test_path:
        n_feat = train.features.shape[1] if cfg.data_format == "libsvm" else None
        test = load_dataset(cfg.data_format, cfg.test_path, cfg.test_labels_path,
                            label_map=train.label_map or None, n_features=n_feat)
    if cfg.train_size:
        train = dio.subsample(train, cfg.train_size, seed, cfg.stratified, cfg.balanced)
    norm = dio.fit_normalization(train, cfg.normalization)
    train = dio.apply_normalization(train, norm)
    if test is not None:
        test = dio.apply_normalization(test, norm)
    return train, test, norm


def resolve_schedule(cfg: RunConfig, arch, train: dio.Dataset, seed: int) -> InitSchedule:
    if cfg.schedule == "explicit":
        return InitSchedule(tuple(cfg.sigmas), seed)
    X = train.features.reshape(len(train), -1)
    kappa_0 = float((X * X).sum(axis=1).mean())
    return InitSchedule(dg.schedule_from_thresholds(kappa_0, arch.depth, cfg.margin), seed)


def _model_meta(cfg: RunConfig, train: dio.Dataset, norm: dio.Normalization, seed: int) -> dict:
    return {"normalization": norm.to_dict(), "label_map": [[k, v] for k, v in train.label_map.items()],
            "data_format": cfg.data_format, "seed": seed, "n_train": len(train)}


# -- train -------------------------------------------------------------------

def run_repeat(cfg: RunConfig, r: int):
    seed = cfg.seed + r
    train, test, norm = prepare_data(cfg, seed)
    arch = cfg.architecture(train.n_classes if cfg.output_dim == 0 else cfg.output_dim)
    schedule = resolve_schedule(cfg, arch, train, seed)
    result = tr.train(train, arch, schedule, cfg.train_config(seed), eval_dataset=test)
    return result, _model_meta(cfg, train, norm, seed), schedule


def cmd_train(cfg: RunConfig, parallel: bool = False) -> int:
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.dumps())
    repeats = range(cfg.repeats)
    if parallel and cfg.repeats > 1:
        with ProcessPoolExecutor() as ex:
            results = list(ex.map(run_repeat, [cfg] * cfg.repeats, repeats))
    else:
        results = [run_repeat(cfg, r) for r in repeats]

    rows = []
    finals = []
    for r, (res, meta, schedule) in enumerate(results):
        meta["sigmas"] = list(schedule.sigmas)
        save_model(out / f"model_r{r}.cskn", res.state, meta)
        for m in res.metrics:
            rows.append({"repeat": r, **{k: getattr(m, k) for k in METRIC_FIELDS[1:]}})
        last = res.metrics[-1]
        finals.append(last.test_accuracy if not math.isnan(last.test_accuracy) else last.train_accuracy)
    dg.write_csv(out / "metrics.csv", rows)
    acc = 100.0 * np.asarray(finals)
    summary = [{"repeat": r, "accuracy": a} for r, a in enumerate(acc)]
    summary.append({"repeat": "mean", "accuracy": float(acc.mean())})
    summary.append({"repeat": "std", "accuracy": float(acc.std(ddof=1)) if len(acc) > 1 else 0.0})
    dg.write_csv(out / "summary.csv", summary)
    print(f"accuracy {acc.mean():.2f} +- {summary[-1]['accuracy']:.2f} over {len(acc)} repeat(s); outputs in {out}")
    return 0


# -- eval --------------------------------------------------------------------

def cmd_eval(model_path: str, data_path: str, labels_path: str = "", fmt: str | None = None,
             out_csv: str | None = None) -> int:
    state, meta = load_model(_require(model_path, "model path"))
    fmt = fmt or meta.get("data_format", "idx")
    label_map = {k: v for k, v in meta.get("label_map", [])} or None
    n_feat = int(np.prod(state.arch.input_shape)) if fmt == "libsvm" else None
    ds = load_dataset(fmt, data_path, labels_path, label_map=label_map if fmt == "libsvm" else None,
                      n_features=n_feat)
    if ds.n_classes != state.arch.output_dim:
        raise UsageError(f"dataset has {ds.n_classes} classes but model outputs {state.arch.output_dim}")
    if "normalization" in meta:
        ds = dio.apply_normalization(ds, dio.Normalization.from_dict(meta["normalization"]))
    try:
        X = fm.to_network_input(state.arch, ds.features)
    except ValueError as e:
        raise UsageError(str(e)) from None
    stats = tr.evaluate(state, X, ds.labels, "softmax_cross_entropy")
    row = {"model": model_path, "data": data_path, "n": len(ds),
           "accuracy": 100.0 * stats["accuracy"], "loss": stats["loss"]}
    print(f"accuracy {row['accuracy']:.4f} loss {row['loss']:.6f} n {row['n']}")
    if out_csv:
        new = not Path(out_csv).exists()
        with open(out_csv, "a", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(row))
            if new:
                w.writeheader()
            w.writerow(row)
    return 0


# -- diagnose ----------------------------------------------------------------

def cmd_diagnose(sub: str, cfg: RunConfig) -> int:
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.dumps())
    if sub == "decay":
        rng = np.random.default_rng(cfg.seed)
        probes = rng.normal(size=(cfg.probes, cfg.probe_dim))
        probes /= np.linalg.norm(probes, axis=1, keepdims=True)
        if cfg.schedule == "thresholds":
            sigmas = dg.schedule_from_thresholds(1.0, cfg.decay_depth, cfg.margin)
        else:
            sigmas = tuple(cfg.sigmas)
        rep = dg.decay_report([cfg.decay_width] * len(sigmas), sigmas, probes, cfg.seed)
        dg.write_csv(out / "decay.csv", rep.rows())
        mono = rep.closed_form_trace.is_strictly_decreasing()
        print(f"closed-form strictly decreasing: {mono}; violations: {rep.violations}")
    elif sub == "hoeffding":
        res = dg.hoeffding_envelope_test(kn.GaussianSpectralDensity(cfg.hoeffding_sigma), cfg.hoeffding_D,
                                         cfg.hoeffding_eta, cfg.hoeffding_trials, cfg.seed)
        rows = [{"trial": t, "deviation": d, "bound": res.bound, "exceeds": int(d > res.bound)}
                for t, d in enumerate(res.deviations)]
        dg.write_csv(out / "hoeffding.csv", rows)
        print(f"violation fraction {res.violation_fraction:.4f} (bound {res.bound:.6f})")
    elif sub == "bounds":
        res, _, _ = run_repeat(cfg, 0)
        factor = 4.0 * math.sqrt(2.0) * cfg.lipschitz
        rows = [{"epoch": m.epoch, "trace": m.frobenius_features, "nuclear_norm_W": m.nuclear_norm_W,
                 "rademacher_bound": m.rademacher_bound, "excess_risk_term": factor * m.rademacher_bound}
                for m in res.metrics]
        dg.write_csv(out / "bounds.csv", rows)
        print(f"final rademacher bound {rows[-1]['rademacher_bound']:.6f}")
    else:
        raise UsageError(f"unknown subreport {sub!r}")
    return 0


# -- gradcheck ---------------------------------------------------------------

GRADCHECK_DEFAULTS = {
    "input_shape": "6,6,1", "layers": "conv:3:2x2,conv:3:3x3", "sigmas": "1.0,0.7",
    "output_dim": "3", "lambda2": "0.01", "dtype": "float64",
}


def cmd_gradcheck(cfg: RunConfig, corrupt: bool = False) -> int:
    arch = cfg.architecture()
    state = tr.ModelState.fresh(arch, InitSchedule(tuple(cfg.sigmas), cfg.seed))
    n_params = fm.param_count(state.layer_params) + state.W.size
    if n_params > cfg.max_gradcheck_params:
        raise UsageError(f"architecture has {n_params} parameters (> {cfg.max_gradcheck_params})")
    rng = np.random.default_rng(cfg.seed + 1)
    state.W = rng.normal(0.0, 0.5, state.W.shape)
    if cfg.train_path:
        train, _, _ = prepare_data(cfg, cfg.seed)
        ds = train.take(np.arange(min(cfg.gradcheck_batch, len(train))))
        batch, labels = fm.to_network_input(arch, ds.features), ds.labels
    else:
        batch = rng.normal(0.0, 1.0, (cfg.gradcheck_batch, *arch.network_input_shape))
        labels = rng.integers(0, arch.output_dim, cfg.gradcheck_batch)
    res = dg.gradient_check(state, batch, labels, cfg.train_config(), cfg.gradcheck_epsilon,
                            corrupt=("W", 0, 0.1) if corrupt else None)
    ok = res.passed(1e-5)
    print(f"{'PASS' if ok else 'FAIL'} max relative error {res.max_error:.3e} at {res.worst} "
          f"({res.checked} coordinates, {res.excluded} excluded)")
    return 0 if ok else 1


# -- cv ----------------------------------------------------------------------

def cmd_cv(cfg: RunConfig) -> int:
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.dumps())
    train, _, _ = prepare_data(cfg, cfg.seed)
    arch = cfg.architecture(train.n_classes if cfg.output_dim == 0 else cfg.output_dim)
    schedule = resolve_schedule(cfg, arch, train, cfg.seed)
    grid = [(a, b) for a in cfg.lambda1_grid for b in cfg.lambda2_grid]
    res = tr.cross_validate(train, arch, schedule, cfg.train_config(), grid, cfg.cv_folds)
    rows = [{"lambda1": c.lambda1, "lambda2": c.lambda2, "fold": f, "score": s}
            for c in res.cells for f, s in enumerate(c.fold_scores)]
    dg.write_csv(out / "cv.csv", rows)
    print(f"best lambda1={res.best[0]:g} lambda2={res.best[1]:g}")
    return 0


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cskn", description="Convolutional spectral kernel networks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("train", help="train and evaluate, writing metrics.csv and model files")
    with_config(sp)
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--parallel", action="store_true", help="run repeats in separate processes")

    sp = sub.add_parser("eval", help="evaluate a saved model")
    sp.add_argument("model")
    sp.add_argument("data")
    sp.add_argument("--labels", default="", help="IDX label file")
    sp.add_argument("--format", choices=["idx", "libsvm"])
    sp.add_argument("--out", help="append a CSV row here")

    sp = sub.add_parser("diagnose", help="kernel-theory diagnostics")
    sp.add_argument("subreport", choices=["decay", "hoeffding", "bounds"])
    with_config(sp)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check")
    with_config(sp)
    sp.add_argument("--corrupt", action="store_true", help="inject a gradient error (debug)")

    sp = sub.add_parser("cv", help="k-fold cross-validation over lambda1 x lambda2")
    with_config(sp)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "eval":
            return cmd_eval(args.model, args.data, args.labels, args.format, args.out)
        overrides = list(args.set)
        if args.command == "gradcheck" and not args.config:
            given = {o.partition("=")[0].strip() for o in overrides}
            overrides = [f"{k}={v}" for k, v in GRADCHECK_DEFAULTS.items() if k not in given] + overrides
        if args.command == "train" and args.repeats is not None:
            overrides.append(f"repeats={args.repeats}")
        cfg = load_config(args.config, overrides)
        if args.command == "train":
            return cmd_train(cfg, args.parallel)
        if args.command == "diagnose":
            return cmd_diagnose(args.subreport, cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.corrupt)
        if args.command == "cv":
            return cmd_cv(cfg)
    except (UsageError, ConfigError, ModelFormatError, dio.DataFormatError, kn.ContractError) as e:
        print(f"cskn: error: {e}", file=sys.stderr)
        return 2
    except (tr.TrainingDiverged, np.linalg.LinAlgError, OSError) as e:
        print(f"cskn: runtime failure: {e}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
