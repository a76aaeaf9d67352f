"""Acceptance criteria, one test per criterion, at their stated tolerances and budgets.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Run directly with ``python tests/test_acceptance.py``.
"""
import json
import statistics
import time

import numpy as np
import pytest

import conftest
from deqann import cli, deq
from deqann.config import parse_config
from deqann.deq import CERTIFICATES, cross_entropy, deq_forward, init_model, loss_and_grads
from deqann.fixedpoint import SolverConfig, anderson_solve, forward_iterate, solve_alpha
from deqann.graphimage import (MolecularStructure, build_neighbor_graph,
                               generate_synthetic_structures, render_graph_image)
from deqann.problems import contraction_suite, linear_contraction, linear_map


def record(key, ok, detail):
    conftest.ACCEPTANCE.append((key, bool(ok), detail))
    assert ok, f"criterion {key}: {detail}"


def kkt_oracle(G, lam):
    n = G.shape[1]
    A = np.zeros((n + 1, n + 1))
    A[0, 1:] = A[1:, 0] = 1.0
    for i in range(n):
        for j in range(n):
            A[i + 1, j + 1] = float(np.dot(G[:, i], G[:, j]))
        A[i + 1, i + 1] += lam
    rhs = np.zeros(n + 1)
    rhs[0] = 1.0
    return np.linalg.solve(A, rhs)[1:]


def brute_force_edges(pos, cutoff):
    pos = pos.tolist()
    return {(i, j) for i in range(len(pos)) for j in range(i + 1, len(pos))
            if sum((pos[i][k] - pos[j][k]) ** 2 for k in range(3)) ** 0.5 <= cutoff}


SYNTHETIC_RUN = """
[data]
source = synthetic
n_per_class = 100
n_test_per_class = 50
seed = 0
image_size = 32

[model]
k1 = 8

[train]
learning_rate = 0.5
epochs = 20
batch_size = 20
seed = 0

[output]
dir = {out}
"""


@pytest.fixture(scope="module")
def synthetic_run(tmp_path_factory):
    """Prepared 200/100 chain-vs-ring data; returns a config factory."""
    root = tmp_path_factory.mktemp("acceptance")
    cfg = parse_config(SYNTHETIC_RUN.format(out=root / "base"))
    cli.cmd_prepare(cfg)

    def config(out=None):
        return parse_config(SYNTHETIC_RUN.format(out=out or root / "base"))
    return root, config


def train_metrics(cfg, accelerated):
    cli.cmd_train(cfg, accelerated)
    run_dir = cfg.out_dir / cli.solver_name(accelerated)
    return json.loads((run_dir / "metrics.json").read_text())


def test_criterion_01_reduction_identity():
    start = time.perf_counter()
    cfg = SolverConfig(m=1, beta=1.0, tol=1e-6)
    worst = 0.0
    for name, f, x, z0 in contraction_suite(10, dim=16, seed=101):
        _, ta = anderson_solve(f, x, z0, cfg, keep_iterates=True)
        _, tf = forward_iterate(f, x, z0, cfg, keep_iterates=True)
        assert len(ta.iterates) == len(tf.iterates), name
        worst = max(worst, max(float(np.max(np.abs(a - b)))
                               for a, b in zip(ta.iterates, tf.iterates)))
    seconds = time.perf_counter() - start
    record(1, worst <= 1e-12 and seconds < 1.0,
           f"max iterate gap {worst:.1e} over 10 maps in {seconds:.2f}s")


def test_criterion_02_kkt_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    sum_err = alpha_err = 0.0
    for _ in range(100):
        G = rng.standard_normal((rng.integers(2, 40), rng.integers(1, 9)))
        lam = 10.0 ** rng.uniform(-8, 0)
        alpha, _ = solve_alpha(G, lam)
        sum_err = max(sum_err, abs(alpha.sum() - 1.0))
        alpha_err = max(alpha_err, float(np.max(np.abs(alpha - kkt_oracle(G, lam)))))
    seconds = time.perf_counter() - start
    record(2, sum_err <= 1e-10 and alpha_err <= 1e-8 and seconds < 5.0,
           f"|sum-1| {sum_err:.1e}, oracle gap {alpha_err:.1e} in {seconds:.2f}s")


def test_criterion_03_linear_exactness():
    start = time.perf_counter()
    rng = np.random.default_rng(303)
    cfg = SolverConfig(tol=1e-8)
    worst = 0.0
    for _ in range(10):
        A, b = linear_contraction(10, rng.uniform(0.3, 0.9), rng)
        z, trace = anderson_solve(linear_map(A, b), None, np.zeros(10), cfg)
        assert trace.converged
        worst = max(worst, float(np.max(np.abs(z - np.linalg.solve(np.eye(10) - A, b)))))
    seconds = time.perf_counter() - start
    record(3, worst <= 1e-6 and seconds < 5.0,
           f"max gap to direct solve {worst:.1e} in {seconds:.2f}s")


def test_criterion_04_speedup_direction(synthetic_run):
    start = time.perf_counter()
    cfg = SolverConfig(tol=1e-2, m=5, beta=1.0, lam=1e-5)
    acc, fwd = [], []
    for _, f, x, z0 in contraction_suite(24, dim=64, seed=404):
        acc.append(anderson_solve(f, x, z0, cfg)[1].iterations)
        fwd.append(forward_iterate(f, x, z0, cfg)[1].iterations)
    med_a, med_f = statistics.median(acc), statistics.median(fwd)

    # wall clock on one core is noisy, so each solver keeps its best of two runs
    root, config = synthetic_run
    seconds = {True: [], False: []}
    for rep in range(2):
        for accelerated in (True, False):
            metrics = train_metrics(config(root / "base"), accelerated)
            seconds[accelerated].append(metrics["train_seconds"])
    t_acc, t_std = min(seconds[True]), min(seconds[False])
    total = time.perf_counter() - start
    record(4, med_a <= med_f / 2 and t_acc < t_std and total < 300,
           f"median iterations {med_a} vs {med_f} over 24 maps; training "
           f"{t_acc:.2f}s vs {t_std:.2f}s (speedup {t_std / t_acc:.2f}x) in {total:.0f}s")


def test_criterion_05_gradient_fidelity():
    start = time.perf_counter()
    m = init_model(2, 3, 2, seed=5, solver=SolverConfig(tol=1e-10, lam=1e-10, max_iter=500))
    rng = np.random.default_rng(505)
    for name in ("b1", "b2", "head_b"):
        m.params[name] = 0.3 * rng.standard_normal(m.params[name].shape)
    m.feat_mean, m.feat_std = 0.1 * rng.standard_normal(2), 0.5 + rng.random(2)
    x, y = rng.standard_normal((1, 2, 2, 2)), np.array([1])
    _, grads, _, _, _ = loss_and_grads(m, x, y, backward_tol=1e-12)
    h, worst = 1e-5, 0.0
    for name in deq.PARAM_NAMES:
        P = m.params[name]
        for i in np.ndindex(P.shape):
            old = P[i]
            P[i] = old + h
            lp = cross_entropy(deq_forward(m, x)[1], y)
            P[i] = old - h
            lm = cross_entropy(deq_forward(m, x)[1], y)
            P[i] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(grads[name][i] - fd) / max(abs(fd), 1e-7))
    seconds = time.perf_counter() - start
    record(5, worst < 1e-4 and seconds < 30.0,
           f"max relative error {worst:.1e} in {seconds:.2f}s")


def test_criterion_06_end_to_end_learning(synthetic_run):
    start = time.perf_counter()
    root, config = synthetic_run
    cfg = config(root / "learn")
    (root / "learn").mkdir()
    (root / "learn" / "data").symlink_to(root / "base" / "data")
    acc = train_metrics(cfg, True)["test_accuracy"]
    std = train_metrics(cfg, False)["test_accuracy"]
    seconds = time.perf_counter() - start
    record(6, acc >= 0.90 and acc >= std - 0.02 and seconds < 600,
           f"test accuracy accelerated {acc:.3f}, standard {std:.3f} in {seconds:.0f}s")


def test_criterion_07_tuning_grid():
    start = time.perf_counter()
    cfg = parse_config("[tune]\nproblem = linear\nm_grid = 1, 2, 3, 5, 8\n"
                       "beta_grid = 0.5, 0.8, 1.0\n")
    rows = cli.tune_grid(cfg)
    base = next(r[2] for r in rows if r[0] == 1 and r[1] == 1.0)
    best = min(r[2] for r in rows)
    seconds = time.perf_counter() - start
    record(7, base >= best and seconds < 60,
           f"(m=1, beta=1) {base} iterations, grid minimum {best} in {seconds:.2f}s")


def test_criterion_08_pipeline_determinism(tmp_path):
    start = time.perf_counter()
    text = SYNTHETIC_RUN.replace("n_per_class = 100", "n_per_class = 10") \
        .replace("n_test_per_class = 50", "n_test_per_class = 5").replace("epochs = 20", "epochs = 3")
    snapshots = []
    for _ in range(2):
        cfg = parse_config(text.format(out=tmp_path / "run"))
        cli.cmd_prepare(cfg)
        cli.cmd_train(cfg, True)
        snap = {str(p.relative_to(tmp_path)): p.read_bytes()
                for p in sorted((tmp_path / "run").rglob("*")) if p.is_file()}
        # timing columns are excluded
        snap.pop("run/accelerated/metrics.json")
        history = snap.pop("run/accelerated/history.csv").decode().splitlines()
        snap["history"] = [line.rsplit(",", 1)[0] for line in history]
        s, _ = generate_synthetic_structures(3, seed=8)[1]
        snap["render"] = render_graph_image(build_neighbor_graph(s, 2.0), s, 64, 64).tobytes()
        snapshots.append(snap)
    same = snapshots[0] == snapshots[1]
    seconds = time.perf_counter() - start
    record(8, same and seconds < 120,
           f"{len(snapshots[0])} artifacts bit-identical across two runs in {seconds:.1f}s")


def test_criterion_09_neighbor_graph_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(909)
    mismatches = 0
    for k in range(100):
        s = MolecularStructure(f"cloud{k}", ["C"] * 50, rng.uniform(0, 8.0, (50, 3)))
        for cutoff in (2.0, 3.4):
            mismatches += build_neighbor_graph(s, cutoff).edges != \
                brute_force_edges(s.positions, cutoff)
    seconds = time.perf_counter() - start
    record(9, mismatches == 0 and seconds < 10,
           f"{mismatches} mismatching edge sets of 200 in {seconds:.2f}s")


def test_criterion_10_equilibrium_certificate():
    m = init_model(3, 4, 2, seed=10)
    x = np.random.default_rng(1010).standard_normal((8, 3, 8, 8))
    checked = CERTIFICATES["checked"]
    for accelerated in (True, False):
        deq_forward(m, x, accelerated)
    # the autouse fixture holds every other test to the same check
    ok = CERTIFICATES["violations"] == 0 and CERTIFICATES["checked"] > checked
    record(10, ok, f"{CERTIFICATES['checked']} certificates checked so far, "
                   f"{CERTIFICATES['violations']} violations")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
