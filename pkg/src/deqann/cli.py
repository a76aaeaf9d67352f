"""``deqann`` command line: prepare, train, infer, bench, tune, report.

Every command reads one INI config (see :mod:`deqann.config`) and writes
under ``[output] dir``::

    <out>/data/         manifest.csv, train.csv, test.csv, images/
    <out>/<solver>/     model.bin, history.csv, metadata.json, metrics.json,
                        confusion_train.csv, confusion_test.csv
    <out>/bench/        traces/<case>_<solver>.csv, summary.csv, report.csv
    <out>/tune/         grid.csv
    <out>/report/       accuracy.csv, speedup.csv, confusion_<solver>.csv, scatter.csv

Exit codes: 0 success, 1 solver divergence, 2 bad input or config.
"""

import argparse
import csv
import json
import logging
import shutil
import statistics
import sys
from pathlib import Path

import numpy as np

from . import deq
from .config import ConfigError, load_config
from .fixedpoint import DivergenceError, anderson_solve, forward_iterate, write_trace_csv
from .graphimage import (XYZParseError, load_manifest_images, n_classes_for,
                         prepare_dataset, read_manifest, read_ppm, image_to_tensor,
                         stack_images, write_manifest, write_synthetic_dataset)
from .problems import contraction_suite, linear_contraction, linear_map, tanh_contraction, tanh_map

logger = logging.getLogger("deqann")

EXIT_OK, EXIT_DIVERGED, EXIT_INPUT = 0, 1, 2

PREDICTION_HEADER = ["image_path", "predicted_class", "confidence"]
SUMMARY_HEADER = ["case", "solver", "status", "iterations", "elapsed_seconds",
                  "final_residual"]
GRID_HEADER = ["m", "beta", "iterations", "final_residual", "elapsed_seconds"]
SCATTER_HEADER = ["task", "solver", "speedup", "test_accuracy"]


class InputError(Exception):
    """Bad or missing input; mapped to exit code 2."""


def solver_name(accelerated):
    return "accelerated" if accelerated else "standard"


def _write_csv(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path, header=None):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or (header is not None and rows[0] != header):
        raise InputError(f"{path}: unexpected CSV header")
    return rows[1:]


def _write_json(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _num(x):
    return repr(float(x))


# -- prepare ----------------------------------------------------------------

def _split(manifest, cfg):
    """Train/test row split: by index for synthetic data, seeded shuffle otherwise."""
    d = cfg["data"]
    rows = manifest.rows
    if d["source"] == "synthetic":
        n = d["n_per_class"]
        test = [r for r in rows if int(r[0].rsplit("_", 1)[1]) >= n]
    else:
        rng = np.random.default_rng(d["seed"])
        n_test = int(round(d["test_fraction"] * len(rows)))
        picked = set(rng.permutation(len(rows))[:n_test].tolist())
        test = [r for i, r in enumerate(rows) if i in picked]
    test_ids = {r[0] for r in test}
    return [r for r in rows if r[0] not in test_ids], test


def cmd_prepare(cfg, accelerated=True):
    d = cfg["data"]
    data_dir = cfg.out_dir / "data"
    if data_dir.exists():
        shutil.rmtree(data_dir)
    if d["source"] == "synthetic":
        manifest = write_synthetic_dataset(data_dir, d["n_per_class"] + d["n_test_per_class"],
                                           d["seed"], d["image_size"], d["cutoff"])
    else:
        if not d["property_csv"] or not Path(d["property_csv"]).is_file():
            raise InputError(f"property CSV not found: {d['property_csv'] or '(unset)'}")
        if not d["structure_dir"] or not Path(d["structure_dir"]).is_dir():
            raise InputError(f"structure directory not found: {d['structure_dir'] or '(unset)'}")
        manifest = prepare_dataset(d["structure_dir"], d["property_csv"], d["task"],
                                   d["cutoff"], data_dir, cfg.thresholds(), d["image_size"])
    train_rows, test_rows = _split(manifest, cfg)
    write_manifest(data_dir / "train.csv", train_rows)
    write_manifest(data_dir / "test.csv", test_rows)
    counts = manifest.class_counts(_n_classes(cfg))
    print(manifest.path)
    print("class balance: " + ", ".join(f"{c}={n}" for c, n in enumerate(counts)))
    print(f"train {len(train_rows)} / test {len(test_rows)}")
    return EXIT_OK


# -- train ------------------------------------------------------------------

def _n_classes(cfg):
    d = cfg["data"]
    return 2 if d["source"] == "synthetic" else n_classes_for(d["task"])


def _load_split(cfg, name):
    path = cfg.out_dir / "data" / f"{name}.csv"
    if not path.is_file():
        raise InputError(f"manifest not found: {path} (run 'deqann prepare' first)")
    return read_manifest(path)


def fit_model(X, y, cfg, n_classes, accelerated, callback=None):
    """Fresh model from config, input statistics from ``X``, trained in place."""
    m = cfg["model"]
    model = deq.init_model(X.shape[1], m["k1"], n_classes, seed=cfg["train"]["seed"],
                           solver=cfg.solver_config(), norm_eps=m["norm_eps"],
                           lipschitz_cap=m["lipschitz_cap"])
    model.mean = X.mean(axis=(0, 2, 3))
    model.std = np.maximum(X.std(axis=(0, 2, 3)), 1e-8)
    tcfg = cfg.train_config()
    if tcfg.batch_size > len(y):
        tcfg = deq.TrainConfig(**{**tcfg.__dict__, "batch_size": len(y)})
    return deq.train(model, (X, y), tcfg, accelerated, callback)


def cmd_train(cfg, accelerated=True):
    train_m = _load_split(cfg, "train")
    test_m = _load_split(cfg, "test")
    if not train_m.rows:
        raise InputError(f"{train_m.path} has no rows")
    X, y = stack_images(load_manifest_images(train_m))
    n_classes = _n_classes(cfg)
    run_dir = cfg.out_dir / solver_name(accelerated)
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "metadata.json", {
        "solver": solver_name(accelerated), "seed": cfg["train"]["seed"],
        "n_train": len(y), "n_test": len(test_m.rows), "n_classes": n_classes,
        "config": cfg.to_ini()})
    try:
        model, history = fit_model(X, y, cfg, n_classes, accelerated)
    except deq.TrainingDiverged as exc:
        deq.write_history_csv(exc.history, run_dir / "history.csv")
        raise
    deq.write_history_csv(history, run_dir / "history.csv")
    deq.save_model(model, run_dir / "model.bin")
    metrics = {"train_seconds": history[-1].elapsed_seconds,
               "epochs": len(history),
               "solver_iterations": sum(r.iterations for r in history)}
    for name, man in (("train", train_m), ("test", test_m)):
        if not man.rows:
            metrics[f"{name}_accuracy"] = None
            continue
        cm, acc, failed = deq.evaluate(model, load_manifest_images(man), accelerated)
        cm.to_csv(run_dir / f"confusion_{name}.csv")
        metrics[f"{name}_accuracy"] = acc
        metrics[f"{name}_failed"] = failed
    _write_json(run_dir / "metrics.json", metrics)
    print(run_dir / "model.bin")
    print(f"{solver_name(accelerated)}: train acc {metrics['train_accuracy']}, "
          f"test acc {metrics['test_accuracy']}, {metrics['train_seconds']:.2f}s")
    return EXIT_OK


# -- infer ------------------------------------------------------------------

def predict_images(model, paths, accelerated=True):
    """``(path, class, confidence)`` rows; diverged samples get class -1, confidence nan."""
    if not paths:
        return []
    images = []
    for p in paths:
        try:
            images.append(image_to_tensor(read_ppm(p)))
        except OSError as exc:
            raise InputError(f"cannot read image {p}: {exc.strerror}") from None
        except ValueError as exc:
            raise InputError(f"{p}: {exc}") from None
    probs = deq.softmax(deq.predict_logits(model, np.stack(images), accelerated))
    rows = []
    for p, row in zip(paths, probs):
        if np.all(np.isfinite(row)):
            rows.append((str(p), int(np.argmax(row)), float(row.max())))
        else:
            rows.append((str(p), -1, float("nan")))
    return rows


def cmd_infer(cfg, accelerated=True, images=None):
    model_path = cfg["infer"]["model"] or str(cfg.out_dir / solver_name(accelerated) / "model.bin")
    if not Path(model_path).is_file():
        raise InputError(f"model file not found: {model_path}")
    model = deq.load_model(model_path)
    paths = list(images) if images else cfg["infer"]["images"]
    rows = predict_images(model, paths, accelerated)
    out = cfg.out_dir / "predictions.csv"
    _write_csv(out, PREDICTION_HEADER, [(p, c, _num(conf)) for p, c, conf in rows])
    print(out)
    return EXIT_OK


def read_predictions(path):
    return [(p, int(c), float(conf)) for p, c, conf in _read_csv(path, PREDICTION_HEADER)]


# -- bench ------------------------------------------------------------------

def _bench_model(cfg):
    """Randomly initialized (or configured) model and a seeded random input batch."""
    b, m = cfg["bench"], cfg["model"]
    size = cfg["data"]["image_size"]
    if cfg["infer"]["model"]:
        model = deq.load_model(cfg["infer"]["model"])
    else:
        model = deq.init_model(3, m["k1"], 2, seed=b["seed"], solver=cfg.solver_config(),
                               norm_eps=m["norm_eps"], lipschitz_cap=m["lipschitz_cap"])
    rng = np.random.default_rng(b["seed"])
    x = rng.standard_normal((b["model_batch"], model.n_channels, size, size))

    def cell(z, xx):
        return deq.deq_cell(model.params, z, xx, model.norm_eps)
    return cell, x


def bench_cases(cfg):
    b = cfg["bench"]
    cases = contraction_suite(b["cases"], b["dim"], b["seed"])
    cell, x = _bench_model(cfg)
    cases.append(("deq_forward", cell, x, np.zeros_like(x)))
    return cases


def cmd_bench(cfg, accelerated=True):
    solver = cfg.solver_config()
    bench_dir = cfg.out_dir / "bench"
    (bench_dir / "traces").mkdir(parents=True, exist_ok=True)
    rows = []
    for name, f, x, z0 in bench_cases(cfg):
        for label, fn in (("standard", forward_iterate), ("accelerated", anderson_solve)):
            try:
                _, trace = fn(f, x, z0, solver)
                status = "converged" if trace.converged else "max_iter"
            except DivergenceError as exc:
                trace, status = exc.trace, "diverged"
            if trace is not None:
                write_trace_csv(trace, bench_dir / "traces" / f"{name}_{label}.csv")
            n = trace.iterations if trace is not None else 0
            final = trace.final_residual if trace is not None and n else float("inf")
            elapsed = trace.elapsed if trace is not None and n else 0.0
            rows.append((name, label, status, n, _num(elapsed), _num(final)))
    _write_csv(bench_dir / "summary.csv", SUMMARY_HEADER, rows)
    report = summarize_bench(rows)
    _write_csv(bench_dir / "report.csv", list(report), [list(report.values())])
    print(bench_dir / "summary.csv")
    print(f"median iterations: standard {report['median_iterations_standard']}, "
          f"accelerated {report['median_iterations_accelerated']}; "
          f"speedup {report['speedup']:.2f}x, compute saved {100 * report['compute_saved']:.1f}%")
    return EXIT_OK


def summarize_bench(rows):
    """Speedup report from summary rows, restricted to cases both solvers converged on."""
    ok = {}
    for case, label, status, n, elapsed, _ in rows:
        if status == "converged":
            ok.setdefault(case, {})[label] = (int(n), float(elapsed))
    both = {c: v for c, v in ok.items() if len(v) == 2}
    std_s = sum(v["standard"][1] for v in both.values())
    acc_s = sum(v["accelerated"][1] for v in both.values())
    speedup = std_s / acc_s if acc_s > 0 else float("nan")
    med = lambda label: (statistics.median(v[label][0] for v in both.values())  # noqa: E731
                         if both else float("nan"))
    return {"cases": len(both),
            "failed": len({r[0] for r in rows}) - len(both),
            "median_iterations_standard": med("standard"),
            "median_iterations_accelerated": med("accelerated"),
            "standard_seconds": std_s, "accelerated_seconds": acc_s,
            "speedup": speedup,
            "compute_saved": 1.0 - acc_s / std_s if std_s > 0 else float("nan")}


def read_bench_summary(path):
    return [(c, s, st, int(n), float(e), float(r))
            for c, s, st, n, e, r in _read_csv(path, SUMMARY_HEADER)]


# -- tune -------------------------------------------------------------------

def tune_problem(cfg):
    t = cfg["tune"]
    rng = np.random.default_rng(t["seed"])
    if t["problem"] == "linear":
        A, b = linear_contraction(t["dim"], 0.9, rng)
        return linear_map(A, b), None, np.zeros(t["dim"])
    if t["problem"] == "tanh":
        A = tanh_contraction(t["dim"], rng)
        return tanh_map(A), rng.standard_normal(t["dim"]), np.zeros(t["dim"])
    if t["problem"] == "model":
        cell, x = _bench_model(cfg)
        return cell, x, np.zeros_like(x)
    raise InputError(f"unknown tune problem {t['problem']!r} (linear, tanh or model)")


def tune_grid(cfg):
    t = cfg["tune"]
    if not t["m_grid"] or not t["beta_grid"]:
        raise InputError("tune grids must be non-empty")
    if min(t["m_grid"]) < 1:
        raise InputError("tune m_grid values must be >= 1")
    if not all(0.0 < b <= 1.0 for b in t["beta_grid"]):
        raise InputError("tune beta_grid values must lie in (0, 1]")
    f, x, z0 = tune_problem(cfg)
    base = cfg.solver_config()
    rows = []
    for m in t["m_grid"]:
        for beta in t["beta_grid"]:
            try:
                _, trace = anderson_solve(f, x, z0, base.replace(m=m, beta=beta))
                final = trace.final_residual if trace.converged else float("inf")
                rows.append((m, beta, trace.iterations, final, trace.elapsed))
            except DivergenceError as exc:
                n = exc.trace.iterations if exc.trace is not None else 0
                rows.append((m, beta, n, float("inf"), 0.0))
    return rows


def cmd_tune(cfg, accelerated=True):
    rows = tune_grid(cfg)
    out = cfg.out_dir / "tune" / "grid.csv"
    _write_csv(out, GRID_HEADER, [(m, _num(b), n, _num(r), _num(e)) for m, b, n, r, e in rows])
    best = min(rows, key=lambda r: (r[3] == float("inf"), r[2]))
    print(out)
    print(f"best cell m={best[0]} beta={best[1]}: {best[2]} iterations")
    return EXIT_OK


def read_grid(path):
    return [(int(m), float(b), int(n), float(r), float(e))
            for m, b, n, r, e in _read_csv(path, GRID_HEADER)]


# -- report -----------------------------------------------------------------

def cmd_report(cfg, accelerated=True):
    out = cfg.out_dir
    report_dir = out / "report"
    metrics, missing = {}, []
    for label in ("standard", "accelerated"):
        path = out / label / "metrics.json"
        if path.is_file():
            with open(path) as fh:
                metrics[label] = json.load(fh)
        else:
            missing.append(str(path))
    for path in missing:
        print(f"missing artifact: {path}", file=sys.stderr)
    if not metrics:
        raise InputError("no training runs to report on; missing " + ", ".join(missing))
    meta_path = out / "data" / "manifest_meta.json"
    task = "unknown"
    if meta_path.is_file():
        with open(meta_path) as fh:
            task = json.load(fh).get("task", task)

    def cell(label, key):
        v = metrics.get(label, {}).get(key)
        return "" if v is None else _num(v)
    _write_csv(report_dir / "accuracy.csv", ["split", "standard", "accelerated"],
               [(split, cell("standard", f"{split}_accuracy"),
                 cell("accelerated", f"{split}_accuracy")) for split in ("train", "test")])

    std_s = metrics.get("standard", {}).get("train_seconds")
    acc_s = metrics.get("accelerated", {}).get("train_seconds")
    speedup = std_s / acc_s if std_s and acc_s else None
    speed_rows = [(task, "training", "" if std_s is None else _num(std_s),
                   "" if acc_s is None else _num(acc_s),
                   "" if speedup is None else _num(speedup),
                   "" if speedup is None else _num(1.0 - acc_s / std_s))]
    bench_path = out / "bench" / "summary.csv"
    if bench_path.is_file():
        b = summarize_bench(_read_csv(bench_path, SUMMARY_HEADER))
        speed_rows.append((task, "bench", _num(b["standard_seconds"]),
                           _num(b["accelerated_seconds"]), _num(b["speedup"]),
                           _num(b["compute_saved"])))
    else:
        print(f"missing artifact: {bench_path}", file=sys.stderr)
    _write_csv(report_dir / "speedup.csv",
               ["task", "phase", "standard_seconds", "accelerated_seconds", "speedup",
                "compute_saved"], speed_rows)

    for label in metrics:
        src = out / label / "confusion_test.csv"
        if src.is_file():
            shutil.copyfile(src, report_dir / f"confusion_{label}.csv")
        else:
            print(f"missing artifact: {src}", file=sys.stderr)

    scatter = []
    for label in ("standard", "accelerated"):
        if label in metrics and metrics[label].get("test_accuracy") is not None:
            s = 1.0 if label == "standard" else speedup
            scatter.append((task, label, "" if s is None else _num(s),
                            _num(metrics[label]["test_accuracy"])))
    _write_csv(report_dir / "scatter.csv", SCATTER_HEADER, scatter)
    print(report_dir)
    return EXIT_OK


# -- entry point ------------------------------------------------------------

COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "infer": cmd_infer,
            "bench": cmd_bench, "tune": cmd_tune, "report": cmd_report}


def build_parser():
    p = argparse.ArgumentParser(prog="deqann",
                                description="Deep equilibrium classifiers on molecular "
                                            "graph images, with Anderson-accelerated solves.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="INI run configuration")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--accelerated", dest="accelerated", action="store_true", default=True,
                      help="Anderson extrapolation (default)")
    mode.add_argument("--standard", dest="accelerated", action="store_false",
                      help="plain forward iteration")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.add_argument("--out", help="override [output] dir")
    p.add_argument("images", nargs="*", help="PPM images (infer only)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def apply_overrides(cfg, seed=None, out=None):
    if seed is not None:
        for section in ("data", "train", "bench", "tune"):
            cfg[section]["seed"] = seed
    if out is not None:
        cfg["output"]["dir"] = str(Path(out).resolve())
    return cfg


def main(argv=None):
    args = build_parser().parse_intermixed_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args.seed, args.out)
        if args.images and args.command != "infer":
            raise InputError("image paths are only accepted by 'infer'")
        if args.command == "infer":
            return cmd_infer(cfg, args.accelerated, args.images)
        return COMMANDS[args.command](cfg, args.accelerated)
    except DivergenceError as exc:
        print(f"deqann: solver diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InputError, ConfigError, deq.ModelFormatError, XYZParseError,
            FileNotFoundError) as exc:
        print(f"deqann: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"deqann: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
