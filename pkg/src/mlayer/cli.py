"""Command-line front end: ``mlayer {gen,train,eval,certify,compile}``.

Exit codes: 0 success, 1 audit found a violation, 2 configuration or usage
error, 3 data error (missing or malformed files), 4 numerical abort.
"""

import argparse
import datetime
import hashlib
import json
import math
import os
import re
import sys

import numpy as np

from . import certify as cert
from ._atomic import atomic_write_text
from .errors import ConfigError, DimensionError, FormatError, TrainingDiverged
from .layer import Dims, MLayerParams, init_periodic, init_standard, load_model, param_count, save_model
from .polycompile import PolynomialSyntaxError, compile_polynomial, det3_gadget, feature_cross_gadget, parse_polynomial
from .tasks import (FIG2_TARGETS, Dataset, dataset_from_csv, dataset_to_csv, gen_determinant, gen_periodic,
                    gen_spirals, load_cifar10, load_mnist)
from .train import RMSprop, SGD, Plateau, TrainConfig, evaluate, fit, predict

EXIT_OK, EXIT_AUDIT, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

# -- configuration ---------------------------------------------------------

# key -> type; every config value is parsed through one of these.
CONFIG_KEYS = {
    "preset": str,
    "dataset": str,
    "d": int,
    "n": int,
    "init": str,
    "init_sigma": float,
    "optimizer": str,
    "learning_rate": float,
    "momentum": float,
    "decay": float,
    "rho": float,
    "batch_size": int,
    "max_epochs": int,
    "plateau_patience": int,
    "plateau_factor": float,
    "early_stop_patience": int,
    "loss": str,
    "activity_lambda": float,
    "seed": int,
    "validation_fraction": float,
    "train_size": int,
    "val_size": int,
    "test_size": int,
    "spacing": float,
    "monitor": str,
}

_BASE = {
    "init": "standard", "init_sigma": 0.05, "optimizer": "rmsprop", "learning_rate": 1e-3,
    "momentum": 0.0, "decay": 0.0, "rho": 0.9, "batch_size": 32, "max_epochs": 100,
    "plateau_patience": 0, "plateau_factor": 0.2, "early_stop_patience": 0,
    "activity_lambda": 1e-4, "seed": 0, "validation_fraction": 0.0, "train_size": 0,
    "val_size": 0, "test_size": 0, "spacing": 1e-3, "monitor": "",
}

PRESETS = {
    # With n = 1 the class score difference is monotone in one affine form
    # of x, so the boundary is a straight line; "spiral-wide" fits the arms.
    "spiral": dict(_BASE, dataset="spirals", d=10, n=1, loss="spiral_xent", max_epochs=100),
    "spiral-wide": dict(_BASE, dataset="spirals", d=10, n=10, loss="spiral_xent", max_epochs=100),
    # lr 5e-2 and batch 32 stand in for the step count of a 1e-5 grid at
    # the default 1e-3 spacing; the model starts with exp(M) near zero.
    "periodic": dict(_BASE, dataset="periodic:0", d=1, n=6, init="periodic", learning_rate=5e-2,
                     decay=1e-5, batch_size=32, max_epochs=300, loss="periodic_penalty",
                     activity_lambda=0.0),
    "det3": dict(_BASE, dataset="det3", d=9, n=8, decay=1e-6, max_epochs=256, plateau_patience=10,
                 early_stop_patience=30, loss="mse", train_size=2 ** 14, val_size=2 ** 12,
                 test_size=100000, init_sigma=0.1),
    "det5": dict(_BASE, dataset="det5", d=23, n=24, decay=1e-6, max_epochs=256, plateau_patience=10,
                 early_stop_patience=30, loss="mse", train_size=2 ** 20, val_size=2 ** 18,
                 test_size=100000),
    "mnist": dict(_BASE, dataset="mnist", d=35, n=30, optimizer="sgd", momentum=0.9, max_epochs=150,
                  plateau_patience=5, early_stop_patience=15, loss="softmax_xent",
                  validation_fraction=0.1),
    "cifar10": dict(_BASE, dataset="cifar10", d=35, n=30, optimizer="sgd", momentum=0.9, max_epochs=150,
                    plateau_patience=5, early_stop_patience=15, loss="softmax_xent",
                    validation_fraction=0.1),
}
PRESETS["mnist-desk"] = dict(PRESETS["mnist"], max_epochs=20)
PRESETS["cifar10-desk"] = dict(PRESETS["cifar10"], max_epochs=10)


def _coerce(key, raw):
    if key not in CONFIG_KEYS:
        raise ConfigError(f"unknown config key '{key}'", key)
    typ = CONFIG_KEYS[key]
    if isinstance(raw, typ) and not isinstance(raw, bool):
        return raw
    try:
        if typ is int:
            val = float(raw)
            if not val.is_integer():
                raise ValueError
            return int(val)
        return typ(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"config key '{key}' expects {typ.__name__}, got {raw!r}", key) from None


def parse_config_text(text):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def resolve_config(preset=None, config_file=None, overrides=None):
    """Merge preset, config file (whose own ``preset`` key is honoured) and
    command-line overrides, then validate."""
    file_values = {}
    if config_file:
        try:
            with open(config_file, encoding="utf-8") as fh:
                file_values = parse_config_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}", "config") from exc
    name = preset or file_values.get("preset")
    if name is None:
        raise ConfigError("no preset given (use --preset or 'preset = ...' in the config)", "preset")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}'; choose from {sorted(PRESETS)}", "preset")
    cfg = dict(PRESETS[name], preset=name)
    cfg.update(file_values)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = _coerce(k, v)
    for key in ("d", "n"):
        if cfg[key] < 1:
            raise ConfigError(f"config key '{key}' must be a positive integer, got {cfg[key]}", key)
    if cfg["optimizer"] not in ("sgd", "rmsprop"):
        raise ConfigError("optimizer must be 'sgd' or 'rmsprop'", "optimizer")
    if cfg["init"] not in ("standard", "periodic"):
        raise ConfigError("init must be 'standard' or 'periodic'", "init")
    train_config(cfg)
    return cfg


def train_config(cfg):
    if cfg["optimizer"] == "sgd":
        opt = SGD(momentum=cfg["momentum"], decay=cfg["decay"])
    else:
        opt = RMSprop(decay=cfg["decay"], rho=cfg["rho"])
    plateau = Plateau(cfg["plateau_patience"], cfg["plateau_factor"]) if cfg["plateau_patience"] > 0 else None
    return TrainConfig(
        optimizer=opt,
        learning_rate=cfg["learning_rate"],
        batch_size=cfg["batch_size"],
        max_epochs=cfg["max_epochs"],
        plateau=plateau,
        early_stop_patience=cfg["early_stop_patience"] or None,
        loss=cfg["loss"],
        activity_lambda=cfg["activity_lambda"],
        seed=cfg["seed"],
        validation_fraction=cfg["validation_fraction"],
        monitor=cfg["monitor"] or None,
    )


# -- datasets --------------------------------------------------------------

def _data_dir(name):
    root = os.environ.get("MLAYER_DATA_DIR", "data")
    sub = os.path.join(root, name)
    return sub if os.path.isdir(sub) else root


def load_dataset(spec, seed=0, size=None, spacing=1e-3):
    """Resolve a dataset spec to ``(train, test)``.

    ``spec`` is a CSV path or one of ``spirals``, ``periodic[:i]`` (``i``
    picks a plotted target, ``random`` draws one from the seed),
    ``det<k>[:N]``, ``perm<k>[:N]``, ``mnist``, ``cifar10``. Synthetic
    specs without a separate test set return the training set as test.
    """
    if spec.endswith(".csv"):
        ds = dataset_from_csv(spec)
        return ds, ds
    if spec == "spirals":
        ds = gen_spirals(seed=seed)
        return ds, ds
    m = re.fullmatch(r"periodic(?::(\w+))?", spec)
    if m:
        which = m.group(1) or "0"
        target = None if which == "random" else FIG2_TARGETS[int(which)]
        train, test, _ = gen_periodic(seed=seed, spacing=spacing, target=target)
        return train, test
    m = re.fullmatch(r"(det|perm)(\d)(?::(\d+))?", spec)
    if m:
        k = int(m.group(2))
        n = int(m.group(3) or size or 2 ** 14)
        mode = "determinant" if m.group(1) == "det" else "permanent"
        train = gen_determinant(k, n, seed, mode)
        test = gen_determinant(k, n, seed + 1_000_003, mode)
        return train, test
    if spec == "mnist":
        return load_mnist(_data_dir("mnist"))
    if spec == "cifar10":
        return load_cifar10(_data_dir("cifar10"))
    raise ConfigError(f"unknown dataset spec '{spec}'", "dataset")


# -- manifests -------------------------------------------------------------

def git_blob_hash(path):
    with open(path, "rb") as fh:
        data = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out_path, command, config, seed, inputs, outputs, started):
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": {p: git_blob_hash(p) for p in outputs if os.path.exists(p)},
        "started": started,
        "finished": _now(),
    }
    path = _stem(out_path) + ".manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _stem(path):
    root, ext = os.path.splitext(path)
    return root if ext in (".json", ".csv") else path


# -- plot data -------------------------------------------------------------

def boundary_grid_csv(params, path, lo=-10.5, hi=10.5, size=400):
    """Class-1 probability on a ``size x size`` lattice (decision boundary plot)."""
    xs = np.linspace(lo, hi, size)
    gx, gy = np.meshgrid(xs, xs)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    out = predict(params, pts, batch_size=4000)
    z = out - out.max(axis=1, keepdims=True)
    prob = np.exp(z[:, 1]) / np.exp(z).sum(axis=1)
    lines = ["x,y,p1"] + [f"{a:.6g},{b:.6g},{c:.6g}" for (a, b), c in zip(pts, prob)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def curve_csv(params, train, test, path):
    x = np.concatenate([train.inputs[:, 0], test.inputs[:, 0]])
    y = np.concatenate([train.targets[:, 0], test.targets[:, 0]])
    f = predict(params, x[:, None])[:, 0]
    lines = ["x,target,prediction"] + [f"{a:.17g},{b:.17g},{c:.17g}" for a, b, c in zip(x, y, f)]
    atomic_write_text(path, "\n".join(lines) + "\n")


# -- commands --------------------------------------------------------------

def cmd_gen(args):
    started = _now()
    task = args.task
    if task == "spirals":
        ds = gen_spirals(n_points=args.n or 2000, seed=args.seed)
    elif re.fullmatch(r"periodic(:\w+)?", task):
        train, test = load_dataset(task, args.seed, spacing=args.spacing)
        dataset_to_csv(test, _stem(args.out) + "-test.csv")
        ds = train
    elif re.fullmatch(r"(det|perm)[2-6]", task):
        k = int(task[-1])
        mode = "determinant" if task.startswith("det") else "permanent"
        ds = gen_determinant(k, args.n or 2 ** 14, args.seed, mode)
    else:
        raise ConfigError(f"unknown task '{task}'", "task")
    dataset_to_csv(ds, args.out)
    write_manifest(args.out, "gen", {"task": task, "n": args.n, "spacing": args.spacing},
                   args.seed, [], [args.out], started)
    print(f"wrote {len(ds)} examples to {args.out}")
    return EXIT_OK


def cmd_train(args):
    started = _now()
    overrides = {"seed": args.seed, "spacing": args.spacing, "dataset": args.data,
                 "max_epochs": args.epochs, "train_size": args.train_size,
                 "d": args.d, "n": args.n}
    cfg = resolve_config(args.preset, args.config, overrides)
    seed = cfg["seed"]
    params, train, test, tcfg = prepare_run(cfg)
    dims = params.dims
    print(f"model dims p={dims.p} d={dims.d} n={dims.n} h={dims.h}; parameters: {param_count(dims)}")

    def report(rec, _):
        print(f"epoch {rec.epoch:4d} loss {rec.train_loss:.6g} val_loss {rec.val_loss:.6g} "
              f"val_acc {rec.val_acc:.4f} lr {rec.lr:.3g} ({rec.seconds:.1f}s)", flush=True)

    best, metrics = fit(params, train, tcfg, callback=None if args.quiet else report)
    stem = _stem(args.out)
    save_model(args.out, best, {"config": cfg})
    outputs = [args.out, stem + ".metrics.csv"]
    metrics.to_csv(stem + ".metrics.csv")
    if test is not None:
        ev = evaluate(best, test, tcfg.loss)
        key = "accuracy" if "accuracy" in ev else "mse"
        print(f"test {key}: {ev[key]:.6g}")
    if cfg["dataset"] == "spirals" and dims.p == 2:
        boundary_grid_csv(best, stem + ".boundary.csv")
        outputs.append(stem + ".boundary.csv")
    if cfg["dataset"].startswith("periodic"):
        curve_csv(best, train, test, stem + ".curve.csv")
        outputs.append(stem + ".curve.csv")
    write_manifest(args.out, "train", cfg, seed, [cfg["dataset"]], outputs, started)
    return EXIT_OK


def prepare_run(cfg):
    """Data, initial parameters and training config for a resolved config.

    Returns ``(params, train, test, train_config)``; ``test`` is None when
    the dataset has no separate test split. May update
    ``cfg["validation_fraction"]`` for determinant data.
    """
    train, test = _load_for_training(cfg)
    tcfg = train_config(cfg)
    dims = Dims(train.n_features, cfg["d"], cfg["n"], train.n_outputs)
    if cfg["init"] == "periodic":
        params = init_periodic(dims, cfg["seed"])
    else:
        params = init_standard(dims, cfg["seed"], cfg["init_sigma"])
    return params, train, test, tcfg


def _load_for_training(cfg):
    spec = cfg["dataset"]
    m = re.fullmatch(r"(det|perm)(\d)(?::(\d+))?", spec)
    if m:
        k = int(m.group(2))
        mode = "determinant" if m.group(1) == "det" else "permanent"
        n_train = int(m.group(3) or cfg["train_size"] or 2 ** 14)
        n_val = cfg["val_size"] or n_train // 4
        full = gen_determinant(k, n_train + n_val, cfg["seed"], mode)
        # Validation examples come in addition to the training size.
        cfg["validation_fraction"] = n_val / (n_train + n_val)
        test = gen_determinant(k, cfg["test_size"] or 100000, cfg["seed"] + 1_000_003, mode)
        return full, test
    train, test = load_dataset(spec, cfg["seed"], cfg["train_size"] or None, cfg["spacing"])
    return train, (None if test is train else test)


def _load_model_checked(path):
    try:
        return load_model(path)
    except OSError as exc:
        raise FileNotFoundError(str(exc)) from exc


def cmd_eval(args):
    started = _now()
    params, extra = _load_model_checked(args.model)
    _, test = load_dataset(args.data, args.seed, spacing=args.spacing)
    if test.n_features != params.dims.p:
        raise DimensionError(f"model expects p={params.dims.p}, dataset has {test.n_features} features")
    out = predict(params, test.inputs)
    stem = _stem(args.out or args.model) + ".eval"
    outputs = [stem + ".csv"]
    if test.kind == "classification":
        if out.shape[1] < test.n_classes:
            raise DimensionError(f"model has {out.shape[1]} outputs, dataset has {test.n_classes} classes")
        pred = out.argmax(axis=1)
        acc = float(np.mean(pred == test.targets))
        print(f"accuracy: {acc:.6f}")
        h = out.shape[1]
        conf = np.zeros((h, h), dtype=np.int64)
        np.add.at(conf, (test.targets, pred), 1)
        lines = ["true," + ",".join(f"pred{j}" for j in range(h))]
        lines += [f"{i}," + ",".join(str(v) for v in row) for i, row in enumerate(conf)]
        atomic_write_text(stem + ".confusion.csv", "\n".join(lines) + "\n")
        outputs.append(stem + ".confusion.csv")
        atomic_write_text(stem + ".csv", f"metric,value\naccuracy,{acc!r}\n")
    else:
        if out.shape[1] != test.targets.shape[1]:
            raise DimensionError("model output size does not match regression targets")
        mse = float(np.mean((out - test.targets) ** 2))
        print(f"mse: {mse:.6g}")
        atomic_write_text(stem + ".csv", f"metric,value\nmse,{mse!r}\n")
    write_manifest(stem + ".csv", "eval", {"model": args.model, "dataset": args.data}, args.seed,
                   [args.model], outputs, started)
    return EXIT_OK


def cmd_certify(args):
    started = _now()
    params, _ = _load_model_checked(args.model)
    _, test = load_dataset(args.data, args.seed)
    if test.kind != "classification":
        raise ConfigError("certification needs a classification model and dataset", "dataset")
    if test.n_features != params.dims.p:
        raise DimensionError(f"model expects p={params.dims.p}, dataset has {test.n_features} features")
    pred = predict(params, test.inputs).argmax(axis=1)
    ok = np.nonzero(pred == test.targets)[0]
    if args.limit:
        ok = ok[:args.limit]
    certs = cert.certify_examples(params, test.inputs[ok], test.targets[ok], ok)
    cert.certificates_to_csv(certs, args.out)
    edges, counts = cert.radius_histogram([c.radius for c in certs])
    hist_path = _stem(args.out) + ".hist.csv"
    lines = ["lower,upper,count"] + [f"{a:.6g},{b:.6g},{c}" for a, b, c in zip(edges[:-1], edges[1:], counts)]
    atomic_write_text(hist_path, "\n".join(lines) + "\n")
    radii = np.array([c.radius for c in certs])
    print(f"certified {len(certs)} correctly classified examples "
          f"(of {len(test)}); median radius {np.median(radii) if radii.size else float('nan'):.3g}")
    status = EXIT_OK
    if args.audit:
        violations = 0
        for c in certs[:args.audit_examples]:
            x = test.inputs[c.example_id]
            if not cert.attack_audit(params, x, c.radius, args.trials, seed=c.example_id,
                                     label=int(test.targets[c.example_id])):
                violations += 1
        print(f"audit: {violations} violations over {min(len(certs), args.audit_examples)} examples")
        status = EXIT_AUDIT if violations else EXIT_OK
    write_manifest(args.out, "certify", {"model": args.model, "dataset": args.data}, args.seed,
                   [args.model], [args.out, hist_path], started)
    return status


BUILTIN_POLYS = {
    "det3": lambda: det3_gadget("determinant"),
    "perm3": lambda: det3_gadget("permanent"),
    "feature-cross": feature_cross_gadget,
}


def cmd_compile(args):
    started = _now()
    text = args.poly.strip()
    if text in BUILTIN_POLYS:
        compiled = BUILTIN_POLYS[text]()
    else:
        try:
            poly = parse_polynomial(text)
        except PolynomialSyntaxError as exc:
            print(f"error: {exc}\n{exc.pointer()}", file=sys.stderr)
            return EXIT_CONFIG
        if poly.degree < 1:
            print("error: polynomial has no term of degree >= 1; constants belong in the bias",
                  file=sys.stderr)
            return EXIT_CONFIG
        compiled = compile_polynomial(poly)
    save_model(args.out, compiled.params, compiled.annotation())
    print(f"matrix size: {compiled.matrix_size}")
    write_manifest(args.out, "compile", {"poly": text}, None, [], [args.out], started)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="mlayer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset as CSV")
    p.add_argument("task", help="spirals, periodic[:i], det2..det6, perm2..perm6")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=None, help="number of examples")
    p.add_argument("--spacing", type=float, default=1e-3, help="grid spacing for periodic")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model from a preset and/or config file")
    p.add_argument("--preset")
    p.add_argument("--config")
    p.add_argument("--data", help="dataset spec overriding the preset's")
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--train-size", type=int)
    p.add_argument("--d", type=int, help="embedding size override")
    p.add_argument("--n", type=int, help="matrix size override")
    p.add_argument("--spacing", type=float)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy or MSE of a saved model")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spacing", type=float, default=1e-3)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("certify", help="certified L-infinity radii for correctly classified examples")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=0, help="certify at most this many examples")
    p.add_argument("--audit", action="store_true", help="run random sign attacks inside each radius")
    p.add_argument("--audit-examples", type=int, default=100)
    p.add_argument("--trials", type=int, default=1000)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("compile", help="compile a polynomial into M-layer weights")
    p.add_argument("poly", help="e.g. '3.5*x0^2*x1 - x2 + 4', or det3 / perm3 / feature-cross")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compile)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DimensionError as exc:
        print(f"dimension error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
