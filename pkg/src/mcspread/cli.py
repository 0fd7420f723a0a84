"""Command-line entry points: train, features, eval, simulate, gradcheck.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import bnn
from . import simulations as sims
from .data_io import BundleError, Dataset, IDXError, load_bundle, load_idx, load_idx_images, read_features, save_bundle, synth_ood_pair, write_features
from .evaluation import DETECTORS, ExperimentConfig, format_table, run_experiment
from .features import FEATURE_SETS, METRICS, feature_table
from .numerics import Conv2d, Flatten, Linear, MaxPool2d, ReLU, ShapeError, finite_difference_check

log = logging.getLogger("mcspread")

GRADCHECK_TOL = 1e-4


class ValidationError(Exception):
    def __init__(self, errors):
        self.errors = [errors] if isinstance(errors, str) else list(errors)
        super().__init__("; ".join(self.errors))


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {p} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ValidationError(f"config {p} must be a JSON object")
    return cfg


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_manifest(out_dir: Path, subcommand: str, args, seeds: dict, inputs: dict, outputs: list[str]) -> None:
    _dump(out_dir / "manifest.json", {
        "subcommand": subcommand,
        "config": args.config,
        "seeds": seeds,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "tool_version": __version__,
    })


def _dataset_errors(spec, label: str) -> list[str]:
    if not isinstance(spec, dict):
        return [f"{label}: expected an object, got {type(spec).__name__}"]
    kind = spec.get("kind", "idx")
    if kind == "idx":
        errors = []
        for key in ("images", "labels"):
            if key not in spec:
                errors.append(f"{label}: missing '{key}' path")
            elif not Path(spec[key]).exists():
                errors.append(f"{label}: {key} file not found: {spec[key]}")
        return errors
    if kind == "synthetic":
        if spec.get("part", "indist") not in ("indist", "ood"):
            return [f"{label}: synthetic part must be 'indist' or 'ood'"]
        return []
    return [f"{label}: unknown dataset kind {kind!r}"]


def _resolve_dataset(spec: dict) -> Dataset:
    kind = spec.get("kind", "idx")
    if kind == "idx":
        if spec.get("labels"):
            return load_idx(spec["images"], spec["labels"])
        images = load_idx_images(spec["images"])
        return Dataset(images, np.full(len(images), -1), Path(spec["images"]).name)
    indist, ood = synth_ood_pair(spec.get("seed", 0), spec.get("n", 500), spec.get("d", 2),
                                 spec.get("separation", 8.0))
    return indist if spec.get("part", "indist") == "indist" else ood


def _fit_inputs(net: bnn.Network, data: Dataset) -> np.ndarray:
    X = data.inputs
    per = int(np.prod(net.input_shape))
    if X[0].size != per:
        raise ShapeError(f"dataset {data.name!r} items have shape {X.shape[1:]} but the network expects "
                         f"{net.input_shape}")
    return X.reshape(len(X), *net.input_shape)


def _arch_from_config(cfg: dict, n_classes: int, item_shape) -> tuple[list[dict], tuple]:
    arch = cfg.get("arch", "mlp")
    size = int(np.prod(item_shape))
    if arch == "mlp":
        return bnn.mlp_arch(cfg.get("hidden", [128, 64]), n_classes), tuple(cfg.get("input_shape", (size,)))
    if arch == "lenet":
        return bnn.lenet_arch(n_classes), tuple(cfg.get("input_shape", (1, *item_shape[-2:])))
    if isinstance(arch, list):
        return arch, tuple(cfg.get("input_shape", item_shape))
    raise ValidationError(f"unknown arch {arch!r}")


# -- train -------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    train_cfg = dict(cfg.get("train", {}))
    if args.seed is not None:
        train_cfg["seed"] = args.seed
        cfg["init_seed"] = args.seed
    if args.epochs is not None:
        train_cfg["epochs"] = args.epochs
    if args.images:
        cfg["dataset"] = {"kind": "idx", "images": args.images, "labels": args.labels}

    errors = []
    if "dataset" not in cfg:
        errors.append("no training dataset: set 'dataset' in the config or pass --images/--labels")
    else:
        errors += _dataset_errors(cfg["dataset"], "dataset")
    if "test_dataset" in cfg:
        errors += _dataset_errors(cfg["test_dataset"], "test_dataset")
    drop = cfg.get("drop_prob", 0.1)
    if not isinstance(drop, (int, float)) or not 0 <= drop < 1:
        errors.append(f"drop_prob must be in [0, 1), got {drop!r}")
    unknown = set(train_cfg) - set(bnn.TrainConfig.__dataclass_fields__)
    if unknown:
        errors.append(f"unknown train settings: {sorted(unknown)}")
    else:
        try:
            tc = bnn.TrainConfig(**train_cfg)
        except (TypeError, ValueError) as exc:
            errors += str(exc).split("; ")
    if errors:
        raise ValidationError(errors)

    data = _resolve_dataset(cfg["dataset"])
    n_classes = int(cfg.get("n_classes", data.labels.max() + 1))
    arch, input_shape = _arch_from_config(cfg, n_classes, data.inputs.shape[1:])
    net = bnn.build_network(arch, input_shape, float(drop), bool(cfg.get("spectral_norm", False)),
                            int(cfg.get("init_seed", 0)))
    X = _fit_inputs(net, data)
    net, losses = bnn.train(net, X, data.labels, tc)
    train_log = {"epoch_loss": losses, "train_accuracy": float(np.mean(bnn.predict(net, X) == data.labels))}
    if "test_dataset" in cfg:
        test = _resolve_dataset(cfg["test_dataset"])
        train_log["test_accuracy"] = float(np.mean(bnn.predict(net, _fit_inputs(net, test)) == test.labels))
    log.info("training log: %s", train_log)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {**cfg, "train": asdict(tc), "arch": arch, "input_shape": list(input_shape)}
    save_bundle(out / "bundle.json", net, configs={"train": resolved})
    _dump(out / "train_log.json", train_log)
    _write_manifest(out, "train", args, {"init_seed": net.init_seed, "train_seed": tc.seed},
                    {"dataset": cfg["dataset"], "test_dataset": cfg.get("test_dataset")},
                    ["bundle.json", "train_log.json"])
    print(json.dumps(train_log, sort_keys=True))
    return 0


# -- features ----------------------------------------------------------------

def cmd_features(args) -> int:
    cfg = _load_config(args.config)
    bundle = args.bundle or cfg.get("bundle")
    spec = {"kind": "idx", "images": args.images, "labels": args.labels} if args.images else cfg.get("dataset")
    T = args.samples if args.samples is not None else cfg.get("samples", bnn.DEFAULT_SAMPLES)
    metric = args.metric or cfg.get("metric", "cosine")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    errors = []
    if not bundle:
        errors.append("no model bundle: pass --bundle or set 'bundle' in the config")
    elif not Path(bundle).exists():
        errors.append(f"bundle file not found: {bundle}")
    if spec is None:
        errors.append("no dataset: pass --images or set 'dataset' in the config")
    else:
        spec = {k: v for k, v in spec.items() if v is not None}
        if spec.get("kind", "idx") == "idx" and "labels" not in spec:
            if "images" not in spec:
                errors.append("dataset: missing 'images' path")
            elif not Path(spec["images"]).exists():
                errors.append(f"dataset: images file not found: {spec['images']}")
        else:
            errors += _dataset_errors(spec, "dataset")
    if not isinstance(T, int) or T < 2:
        errors.append(f"samples must be an integer >= 2, got {T!r}")
    if metric not in METRICS:
        errors.append(f"metric must be one of {METRICS}, got {metric!r}")
    if errors:
        raise ValidationError(errors)

    net, _, _ = load_bundle(bundle)
    data = _resolve_dataset(spec)
    X = _fit_inputs(net, data)
    labels = data.labels if (data.labels >= 0).all() else None
    table = feature_table(net, X, T, metric, seed, args.include_norms or cfg.get("include_norms", False), labels)
    if table.mi_clamped:
        log.info("mutual information clamped at 0 for %d of %d items", table.mi_clamped, len(table))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_features(out, table)
    _write_manifest(out.parent, "features", args, {"sampling_seed": seed},
                    {"bundle": bundle, "dataset": spec, "samples": T, "metric": metric}, [out.name])
    print(f"wrote {len(table)} rows x {len(table.columns)} features to {out}")
    return 0


# -- eval --------------------------------------------------------------------

def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    paths = {
        "id": args.id or cfg.get("id_features"),
        "ood_train": args.ood_train or cfg.get("ood_train_features"),
        "ood_test": args.ood_test or cfg.get("ood_test_features"),
    }
    detectors = args.detector or cfg.get("detectors", ["lr", "rf"])
    feature_sets = args.features or cfg.get("feature_sets", list(FEATURE_SETS))
    base = {k: v for k, v in cfg.get("experiment", {}).items()}
    for key, val in (("n_per_class", args.n_per_class), ("repetitions", args.repetitions), ("seed", args.seed),
                     ("n_trees", args.trees), ("metric", args.metric)):
        if val is not None:
            base[key] = val
    errors = []
    for key in ("id", "ood_train"):
        if not paths[key]:
            errors.append(f"missing --{key.replace('_', '-')} feature CSV")
    for key, p in paths.items():
        if p and not Path(p).exists():
            errors.append(f"{key} feature CSV not found: {p}")
    unknown = set(base) - set(ExperimentConfig.__dataclass_fields__)
    if unknown:
        errors.append(f"unknown experiment settings: {sorted(unknown)}")
    bad_det = [d for d in detectors if d not in DETECTORS]
    bad_fs = [f for f in feature_sets if f not in FEATURE_SETS]
    if bad_det:
        errors.append(f"unknown detectors {bad_det}; expected {DETECTORS}")
    if bad_fs:
        errors.append(f"unknown feature sets {bad_fs}; expected {FEATURE_SETS}")
    if not unknown:
        errors += ExperimentConfig(**base).validate()
    if errors:
        raise ValidationError(errors)

    tables = {k: read_features(p) for k, p in paths.items() if p}
    ref = tables["id"].columns
    for k, t in tables.items():
        if t.columns != ref:
            raise ValidationError(f"column names of {k} ({t.columns}) differ from id ({ref})")

    rows, reports = [], []
    for d in detectors:
        for fs in feature_sets:
            ec = ExperimentConfig(**{**base, "detector": d, "feature_set": fs})
            rep = run_experiment(tables["id"], tables["ood_train"], tables.get("ood_test"), ec)
            rows.append({"train": Path(paths["ood_train"]).stem,
                         "test": Path(paths["ood_test"]).stem if paths["ood_test"] else "(held-out)",
                         "model": d, "features": fs, "n": ec.n_per_class, "report": rep})
            reports.append({"detector": d, "feature_set": fs, **rep.to_dict()})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "report.json", {"inputs": paths, "cells": reports})
    text = format_table(rows)
    (out / "report.txt").write_text(text)
    _write_manifest(out, "eval", args, {"experiment_seed": ExperimentConfig(**base).seed}, paths,
                    ["report.json", "report.txt"])
    print(text, end="")
    return 0


# -- simulate ----------------------------------------------------------------

def _sim_config(cfg: dict, seed, defaults=None) -> sims.SimConfig:
    params = {k: v for k, v in cfg.items() if k in sims.SimConfig.__dataclass_fields__}
    if seed is not None:
        params["seed"] = seed
    sc = (defaults or sims.SimConfig)(**params)
    errors = sc.validate()
    if errors:
        raise ValidationError(errors)
    return sc


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    which = args.which
    if which == "norms":
        report = sims.sim_embedding_norms(_sim_config(cfg, args.seed))
    elif which == "correlations":
        report = sims.sim_feature_correlations(_sim_config(cfg, args.seed, sims.correlation_defaults))
    elif which == "softmax":
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        trials = cfg.get("trials", 1000)
        report = {"config": {"trials": trials, "seed": seed}, **sims.softmax_property_report(trials, seed)}
    elif which == "variance":
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        c = {"cases": cfg.get("cases", 20), "draws": cfg.get("draws", 100_000), "seed": seed}
        report = {"config": c, **sims.variance_closed_form_check(**c)}
    elif which == "confounding":
        report, scatter = _confounding(cfg, args)
        for name, lines in scatter.items():
            (out / f"confounding_{name}.csv").write_text(lines)
            outputs.append(f"confounding_{name}.csv")
    else:
        raise ValidationError(f"unknown simulation {which!r}")
    _dump(out / f"{which}.json", report)
    outputs.append(f"{which}.json")
    _write_manifest(out, "simulate", args, {"seed": report["config"].get("seed")}, {"which": which}, outputs)
    print(json.dumps({k: v for k, v in report.items() if k not in ("pools", "cases")}, sort_keys=True)[:2000])
    return 0


def _confounding(cfg: dict, args):
    errors = []
    if not cfg.get("bundle") or not Path(cfg["bundle"]).exists():
        errors.append(f"confounding: bundle not found: {cfg.get('bundle')!r}")
    pools = cfg.get("pools", {})
    if not pools:
        errors.append("confounding: config needs 'pools' mapping names to datasets")
    for name, spec in pools.items():
        if isinstance(spec, dict) and spec.get("kind", "idx") == "idx" and not spec.get("labels"):
            if not Path(spec.get("images", "")).exists():
                errors.append(f"pool {name}: images file not found: {spec.get('images')!r}")
        else:
            errors += _dataset_errors(spec, f"pool {name}")
    metric = args.metric or cfg.get("metric", "euclidean")
    if metric not in METRICS:
        errors.append(f"metric must be one of {METRICS}")
    if errors:
        raise ValidationError(errors)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    T = cfg.get("samples", bnn.DEFAULT_SAMPLES)
    limit = cfg.get("max_items")
    net, _, _ = load_bundle(cfg["bundle"])
    runs = {}
    for k, (name, spec) in enumerate(sorted(pools.items())):
        X = _fit_inputs(net, _resolve_dataset(spec))
        runs[name] = bnn.mc_sample_many(net, X[:limit], T, seed + k)
    report = sims.norm_confounding_diagnostic(runs, cfg.get("layer", -1), metric)
    report["config"] = {"seed": seed, "samples": T, "metric": metric, "layer": cfg.get("layer", -1),
                        "max_items": limit}
    scatter = {}
    for name, pool in report["pools"].items():
        scatter[name] = "mean_embed_norm,max_spread\n" + "".join(f"{a!r},{b!r}\n" for a, b in pool["points"])
    return report, scatter


# -- gradcheck ---------------------------------------------------------------

def gradcheck_layers(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    x_relu = rng.uniform(0.1, 1.0, 12) * rng.choice([-1.0, 1.0], 12)
    cases = {
        "linear": (Linear(rng.standard_normal((2, 3)), rng.standard_normal(2)), rng.standard_normal(3)),
        "conv2d": (Conv2d(rng.standard_normal((2, 1, 3, 3)), rng.standard_normal(2), (8, 8)),
                   rng.standard_normal((1, 8, 8))),
        "relu": (ReLU(), x_relu),
        "maxpool2d": (MaxPool2d(2, (2, 6, 6)), rng.standard_normal((2, 6, 6))),
        "flatten": (Flatten((2, 3, 3)), rng.standard_normal((2, 3, 3))),
    }
    return {name: finite_difference_check(layer, x, 1e-5, seed) for name, (layer, x) in cases.items()}


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    errs = gradcheck_layers(seed)
    worst = max(errs, key=errs.get)
    ok = all(v < GRADCHECK_TOL for v in errs.values())
    for name, err in errs.items():
        print(f"{name:10s} max_rel_err={err:.3e} {'PASS' if err < GRADCHECK_TOL else 'FAIL'}")
    print(f"worst: {worst} ({errs[worst]:.3e})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "gradcheck.json", {"max_relative_error": errs, "worst": worst, "tolerance": GRADCHECK_TOL,
                                       "passed": ok})
        _write_manifest(out, "gradcheck", args, {"seed": seed}, {}, ["gradcheck.json"])
    return 0 if ok else 2


# -- entry -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcspread", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default=out_default)

    p = sub.add_parser("train", help="train an MC-dropout classifier")
    common(p, "run")
    p.add_argument("--images")
    p.add_argument("--labels")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("features", help="MC-sample a dataset and write per-datum features")
    common(p, "features.csv")
    p.add_argument("--bundle")
    p.add_argument("--images")
    p.add_argument("--labels")
    p.add_argument("--samples", type=int, help="MC samples per datum (T)")
    p.add_argument("--metric", choices=METRICS)
    p.add_argument("--include-norms", action="store_true")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("eval", help="fit and score OOD detectors over repeated draws")
    common(p, "eval")
    p.add_argument("--id", help="in-distribution feature CSV")
    p.add_argument("--ood-train")
    p.add_argument("--ood-test")
    p.add_argument("--detector", action="append", choices=DETECTORS)
    p.add_argument("--features", action="append", choices=FEATURE_SETS)
    p.add_argument("--n-per-class", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--trees", type=int)
    p.add_argument("--metric", choices=METRICS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", help="run a simulation study")
    p.add_argument("which", choices=["norms", "correlations", "softmax", "confounding", "variance"])
    common(p, "simulate")
    p.add_argument("--metric", choices=METRICS)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer kind")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        for err in exc.errors:
            print(f"error: {err}", file=sys.stderr)
        return 1
    except (ShapeError, IDXError, BundleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 2


if __name__ == "__main__":
    sys.exit(main())
