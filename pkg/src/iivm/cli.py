"""Command-line interface: ``iivm {synth,train,predict,eval,selftrain,gridsearch}``.

Parameters come from built-in defaults, then an optional INI-style config
file (one ``[section]`` per command, plain ``key = value`` lines, unknown keys
rejected), then command-line flags. Every command writes ``manifest.json``
(config hash, seed, library versions) next to its outputs.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__, data, drf, metrics, modelio, modelselect, selftrain
from .errors import ConfigError, DataError, NumericalError
from .incremental import IncrementalState
from .ivm import ConvergenceProbe, train
from .kernel import KernelParams

log = logging.getLogger("iivm")


def _floats(text):
    try:
        return tuple(float(v) for v in str(text).replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"expected a list of numbers, got {text!r}") from None


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _optint(text):
    return None if str(text).lower() in ("", "none") else int(text)


# (name, type, default, help); paths are plain strings
COMMON = [
    ("seed", int, 0, "random seed"),
    ("threads", int, 0, "upper bound on BLAS threads (0 = library default)"),
]
OPTIONS = {
    "synth": [
        ("out", str, None, "output directory"),
        ("classes", int, 3, "number of classes"),
        ("height", int, 64, "image height"),
        ("width", int, 64, "image width"),
        ("bands", int, 5, "number of bands"),
        ("separation", float, 2.5, "distance between class means"),
        ("noise", float, 1.0, "per-band noise standard deviation"),
        ("samples_per_class", int, 10, "labeled training pixels per class"),
    ],
    "train": [
        ("cube", str, None, "input cube file"),
        ("labels", str, None, "training label raster (PGM or CSV)"),
        ("csv", str, None, "training table (label,band_1..band_B) instead of cube+labels"),
        ("out", str, None, "output directory"),
        ("gamma", float, 0.1, "RBF kernel width"),
        ("lam", float, 1e-2, "regularization weight"),
        ("cv", _bool, False, "choose gamma and lambda by cross-validation first"),
        ("gammas", _floats, modelselect.DEFAULT_GAMMAS, "CV gamma grid"),
        ("lambdas", _floats, modelselect.DEFAULT_LAMBDAS, "CV lambda grid"),
        ("folds", int, 5, "CV fold count"),
        ("fraction", float, 1.0, "stratified subsample fraction of the labeled pixels"),
        ("min_per_class", int, 10, "subsample floor per class"),
        ("epsilon", float, 1e-3, "selection convergence threshold"),
        ("lag", int, 1, "selection convergence lag"),
        ("max_iv", _optint, None, "import vector cap (default min(N, 500))"),
        ("n_candidates", _optint, None, "random candidate subset per forward step"),
        ("normalize", _bool, True, "z-score features with training statistics"),
    ],
    "predict": [
        ("model", str, None, "model file"),
        ("cube", str, None, "input cube file"),
        ("out", str, None, "output directory"),
        ("beta", float, None, "also write a DRF-smoothed label raster with this Potts weight"),
        ("connectivity", int, 4, "DRF neighbourhood (4 or 8)"),
    ],
    "eval": [
        ("truth", str, None, "reference label raster (0 = ignore)"),
        ("pred", str, None, "predicted label raster"),
        ("probs", str, None, "probability cube (enables the rejection curve)"),
        ("out", str, None, "output directory"),
        ("thresholds", _floats, metrics.DEFAULT_THRESHOLDS, "rejection thresholds"),
    ],
    "selftrain": [
        ("model", str, None, "initial model file"),
        ("cube", str, None, "input cube file"),
        ("labels", str, None, "label raster the initial model was trained on"),
        ("truth", str, None, "optional reference raster, used only for report metrics"),
        ("out", str, None, "output directory"),
        ("beta", float, 1.0, "Potts weight"),
        ("cv_beta", _bool, False, "choose beta by spatial cross-validation first"),
        ("betas", _floats, modelselect.DEFAULT_BETAS, "beta grid for cv_beta"),
        ("folds", int, 5, "spatial fold count for cv_beta"),
        ("connectivity", int, 4, "DRF neighbourhood (4 or 8)"),
        ("uncertainty_ceiling", float, 0.5, "acquire only pixels with max p below this"),
        ("probability_floor", float, 0.1, "drop candidates with max p below this"),
        ("per_class_quota", int, 20, "samples added per class and iteration"),
        ("noise_sigma_fraction", float, 0.01, "oversampling noise relative to feature std"),
        ("max_iterations", int, 20, "iteration cap"),
        ("prune", _bool, True, "prune after every iteration"),
        ("prune_limit", float, 1.05, "allowed objective growth while pruning"),
        ("epsilon", float, 1e-3, "selection convergence threshold"),
        ("lag", int, 1, "selection convergence lag"),
        ("max_iv", _optint, None, "import vector cap"),
    ],
    "gridsearch": [
        ("cube", str, None, "input cube file"),
        ("labels", str, None, "training label raster"),
        ("csv", str, None, "training table instead of cube+labels"),
        ("out", str, None, "output directory"),
        ("gammas", _floats, modelselect.DEFAULT_GAMMAS, "gamma grid"),
        ("lambdas", _floats, modelselect.DEFAULT_LAMBDAS, "lambda grid"),
        ("betas", _floats, None, "also cross-validate beta over this grid (needs cube)"),
        ("folds", int, 5, "fold count"),
        ("tile", int, 8, "spatial tile size for beta folds"),
        ("epsilon", float, 1e-3, "selection convergence threshold"),
        ("lag", int, 1, "selection convergence lag"),
        ("max_iv", _optint, None, "import vector cap"),
        ("n_candidates", _optint, None, "random candidate subset per forward step"),
    ],
}
REQUIRED = {
    "synth": ("out",),
    "train": ("out",),
    "predict": ("model", "cube", "out"),
    "eval": ("truth", "out"),
    "selftrain": ("model", "cube", "labels", "out"),
    "gridsearch": ("out",),
}


def build_parser():
    p = argparse.ArgumentParser(prog="iivm", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"iivm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for cmd, opts in OPTIONS.items():
        sp = sub.add_parser(cmd, help=f"{cmd} command")
        sp.add_argument("--config", help="INI file; section [%s] is read" % cmd)
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        for name, typ, default, help_ in COMMON + opts:
            sp.add_argument("--" + name.replace("_", "-"), dest=name, default=None,
                            help=f"{help_} (default: {default})")
    return p


def resolve_config(command, args):
    """Defaults < config file section < command-line flags, all type-checked."""
    known = {name: (typ, default) for name, typ, default, _ in COMMON + OPTIONS[command]}
    raw = {}
    if args.config:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            read = cp.read(args.config)
        except configparser.Error as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
        if not read:
            raise ConfigError(f"cannot read config file {args.config}")
        unknown_sections = set(cp.sections()) - set(OPTIONS)
        if unknown_sections:
            raise ConfigError(f"{args.config}: unknown sections {sorted(unknown_sections)}")
        if cp.has_section(command):
            for key, value in cp.items(command):
                key = key.replace("-", "_")
                if key not in known:
                    raise ConfigError(f"{args.config}: unknown key {key!r} in [{command}]")
                raw[key] = value
    for name in known:
        v = getattr(args, name, None)
        if v is not None:
            raw[name] = v
    cfg = {}
    for name, (typ, default) in known.items():
        if name in raw:
            try:
                cfg[name] = typ(raw[name])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {name}: {raw[name]!r} ({exc})") from None
        else:
            cfg[name] = default
    missing = [n for n in REQUIRED[command] if cfg.get(n) is None]
    if missing:
        raise ConfigError(f"{command}: missing required option(s) {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return cfg


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, float):
        return repr(v)
    return v


def write_manifest(out, command, cfg, extra=None):
    # the output directory is implied by where the manifest lives
    payload = {k: _jsonable(v) for k, v in sorted(cfg.items()) if k not in ("threads", "out")}
    blob = json.dumps({"command": command, "config": payload}, sort_keys=True).encode()
    manifest = {
        "command": command,
        "config": payload,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "seed": cfg.get("seed"),
        "versions": {"iivm": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }
    if extra:
        manifest.update(extra)
    (Path(out) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _outdir(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _probe(cfg):
    try:
        return ConvergenceProbe(cfg["epsilon"], cfg["lag"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _kernel(gamma):
    try:
        return KernelParams(gamma)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _training_set(cfg):
    if cfg.get("csv"):
        X, y = data.read_dataset_csv(cfg["csv"])
        names = None
        ds = data.from_table(X, y, names, cfg.get("normalize", True))
    elif cfg.get("cube") and cfg.get("labels"):
        cube, labels = data.load(cfg["cube"], cfg["labels"])
        ds = data.extract_training(cube, labels, cfg.get("normalize", True),
                                   data.read_class_names(cfg["cube"]))
    else:
        raise ConfigError("need --csv or both --cube and --labels")
    missing = [k for k in range(1, ds.n_classes + 1) if not np.any(ds.y == k)]
    if missing:
        raise DataError(f"classes without training samples: {missing}")
    return ds


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# commands ------------------------------------------------------------------

def cmd_synth(cfg):
    out = _outdir(cfg)
    try:
        scene = data.synthesize(cfg["classes"], cfg["height"], cfg["width"], cfg["bands"],
                                cfg["separation"], cfg["noise"], cfg["samples_per_class"],
                                seed=cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    names = [f"class_{k}" for k in range(1, cfg["classes"] + 1)]
    data.write_cube(out / "cube.bin", scene.cube, names)
    data.write_labels(out / "labels.pgm", scene.labels)
    data.write_labels(out / "truth.pgm", scene.truth)
    write_manifest(out, "synth", cfg, {"scene": scene.manifest()})
    return 0


def cmd_train(cfg):
    out = _outdir(cfg)
    ds = _training_set(cfg)
    if cfg["fraction"] < 1.0:
        ds = data.stratified_subsample(ds, cfg["fraction"], cfg["min_per_class"], cfg["seed"])
    gamma, lam = cfg["gamma"], cfg["lam"]
    kw = dict(probe=_probe(cfg), max_iv=cfg["max_iv"], n_candidates=cfg["n_candidates"], seed=cfg["seed"])
    if cfg["cv"]:
        plan = modelselect.CvPlan(cfg["folds"], cfg["gammas"], cfg["lambdas"], seed=cfg["seed"],
                                  train_kw=kw)
        gamma, lam, _ = modelselect.grid_search(ds.X, ds.y, plan, ds.n_classes,
                                                table_path=out / "cv_table.csv")
    t0 = time.perf_counter()
    model = train(ds.X, ds.y, _kernel(gamma), lam, class_names=ds.class_names,
                  mean=ds.mean, std=ds.std, **kw)
    train_sec = time.perf_counter() - t0
    modelio.save(out / "model.ivm", model)
    _dump_json(out / "train_log.json", {"N": int(ds.y.size), "V": model.V, "Q": repr(model.q),
                                         "gamma": repr(gamma), "lambda": repr(lam),
                                         "train_sec": round(train_sec, 3)})
    write_manifest(out, "train", cfg)
    log.info("trained: N=%d V=%d Q=%.6g (%.2f s)", ds.y.size, model.V, model.q, train_sec)
    return 0


def _cube_features(model, cube):
    if cube.shape[2] != model.n_features:
        raise DataError(f"cube has {cube.shape[2]} bands, model expects {model.n_features}")
    X = cube.reshape(-1, cube.shape[2]).astype(float)
    if model.mean is not None:
        X = data.normalize(X, model.mean, model.std)
    return X


def cmd_predict(cfg):
    out = _outdir(cfg)
    model = modelio.load(cfg["model"])
    cube = data.read_cube(cfg["cube"])
    H, W, _ = cube.shape
    t0 = time.perf_counter()
    P = model.predict_proba(_cube_features(model, cube))
    test_sec = time.perf_counter() - t0
    P32 = P.astype(np.float32)
    labels = (np.argmax(P32, axis=1) + 1).reshape(H, W)
    data.write_cube(out / "probs.bin", P32.reshape(H, W, -1), model.class_names)
    data.write_labels(out / "labels.pgm", labels)
    if cfg["beta"] is not None:
        lab = drf.smooth(P.reshape(H, W, -1), cfg["beta"], cfg["connectivity"])
        data.write_labels(out / "drf_labels.pgm", lab)
    _dump_json(out / "predict_log.json", {"pixels": H * W, "test_sec": round(test_sec, 3)})
    write_manifest(out, "predict", cfg)
    return 0


def cmd_eval(cfg):
    out = _outdir(cfg)
    truth = data.read_labels(cfg["truth"])
    if cfg["probs"]:
        P = data.read_cube(cfg["probs"])
        if P.shape[:2] != truth.shape:
            raise DataError(f"{cfg['probs']}: shape {P.shape[:2]} does not match truth {truth.shape}")
        P = P.reshape(-1, P.shape[2]).astype(float)
        pred = np.argmax(P, axis=1) + 1
        K = P.shape[1]
    elif cfg["pred"]:
        pred = data.read_labels(cfg["pred"])
        if pred.shape != truth.shape:
            raise DataError(f"{cfg['pred']}: shape {pred.shape} does not match truth {truth.shape}")
        pred = pred.ravel()
        K = None
    else:
        raise ConfigError("eval needs --pred or --probs")
    t = truth.ravel()
    ref = t > 0
    if not ref.any():
        raise DataError(f"{cfg['truth']}: no reference pixels")
    if K is None:
        K = int(max(t.max(), pred[ref].max()))
    if pred[ref].min() < 1:
        raise DataError("prediction has unlabeled pixels inside the reference area")
    try:
        summary, cm = metrics.summarize(t[ref], pred[ref], K)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    metrics.write_summary_csv(out / "metrics.csv", summary)
    metrics.write_confusion_csv(out / "confusion.csv", cm)
    if cfg["probs"]:
        try:
            curve = metrics.rejection_curve(P[ref], t[ref], cfg["thresholds"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        metrics.write_rejection_csv(out / "rejection.csv", curve, cfg["thresholds"])
    write_manifest(out, "eval", cfg)
    oa, aa, kappa = summary.formatted()
    print(f"OA {oa}  AA {aa}  kappa {kappa}  (n={summary.n})")
    return 0


def cmd_selftrain(cfg):
    out = _outdir(cfg)
    model = modelio.load(cfg["model"])
    cube, labels = data.load(cfg["cube"], cfg["labels"])
    truth = data.read_labels(cfg["truth"]) if cfg["truth"] else None
    if truth is not None and truth.shape != labels.shape:
        raise DataError(f"{cfg['truth']}: shape does not match {cfg['labels']}")
    H, W, B = cube.shape
    X_all = _cube_features(model, cube)
    flat = labels.ravel()
    pixels = np.flatnonzero(flat > 0)
    try:
        state = IncrementalState.from_model(model, X_all[pixels], flat[pixels], pixel=pixels)
    except ValueError as exc:
        raise DataError(f"training labels do not fit the model: {exc}") from None
    beta = cfg["beta"]
    if cfg["cv_beta"]:
        plan = modelselect.CvPlan(cfg["folds"], betas=cfg["betas"], seed=cfg["seed"])
        beta, _ = modelselect.select_beta(X_all.reshape(H, W, B), labels, model.params, model.lam,
                                          plan, model.class_names, out / "beta_table.csv",
                                          cfg["connectivity"])
    try:
        acq = selftrain.AcquisitionConfig(cfg["uncertainty_ceiling"], cfg["probability_floor"],
                                          cfg["per_class_quota"], cfg["noise_sigma_fraction"],
                                          cfg["max_iterations"], cfg["seed"], cfg["prune"],
                                          cfg["prune_limit"], beta, cfg["connectivity"],
                                          _probe(cfg), cfg["max_iv"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    writer = selftrain.ReportWriter(out / "report.csv")
    try:
        final, report = selftrain.run(state, X_all.reshape(H, W, B), acq, truth=truth, on_record=writer)
    except selftrain.SelfTrainingAborted as exc:
        writer.close()
        modelio.save(out / "model.ivm", exc.state.model())
        raise exc.__cause__ if isinstance(exc.__cause__, Exception) else exc
    writer.close()
    # no committed iteration: the model is unchanged and written back verbatim
    final_model = model if len(report) == 1 else final.model()
    modelio.save(out / "model.ivm", final_model)
    write_manifest(out, "selftrain", cfg, {"beta_used": repr(float(beta)),
                                           "iterations": len(report) - 1})
    return 0


def cmd_gridsearch(cfg):
    out = _outdir(cfg)
    ds = _training_set(cfg)
    kw = dict(probe=_probe(cfg), max_iv=cfg["max_iv"], n_candidates=cfg["n_candidates"], seed=cfg["seed"])
    plan = modelselect.CvPlan(cfg["folds"], cfg["gammas"], cfg["lambdas"],
                              cfg["betas"] or modelselect.DEFAULT_BETAS, cfg["seed"], cfg["tile"], kw)
    gamma, lam, _ = modelselect.grid_search(ds.X, ds.y, plan, ds.n_classes,
                                            table_path=out / "cv_table.csv")
    best = {"gamma": repr(gamma), "lambda": repr(lam)}
    if cfg["betas"] is not None:
        if not cfg.get("cube"):
            raise ConfigError("beta search needs --cube and --labels")
        cube, labels = data.load(cfg["cube"], cfg["labels"])
        feats = ds.transform(cube.reshape(-1, cube.shape[2])).reshape(cube.shape)
        beta, _ = modelselect.select_beta(feats, labels, _kernel(gamma), lam, plan, ds.class_names,
                                          out / "beta_table.csv")
        best["beta"] = repr(float(beta))
    _dump_json(out / "best.json", best)
    write_manifest(out, "gridsearch", cfg)
    print(" ".join(f"{k}={v}" for k, v in best.items()))
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval,
            "selftrain": cmd_selftrain, "gridsearch": cmd_gridsearch}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args.command, args)
        limit = cfg["threads"] or None
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=limit):
            return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"iivm: config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"iivm: data error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"iivm: numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"iivm: data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
