import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deqann import deq
from deqann.deq import (ConfusionMatrix, DeqModel, ModelFormatError, TrainConfig,
                        TrainingDiverged, cross_entropy, deq_backward, deq_cell, deq_forward,
                        init_model, load_model, loss_and_grads, save_model, zero_model)
from deqann.fixedpoint import DivergenceError, SolverConfig, relative_residual
from deqann.graphimage import generate_synthetic_dataset, stack_images

TIGHT = SolverConfig(tol=1e-10, lam=1e-10, max_iter=500)


def tiny_model(seed=1):
    m = init_model(2, 3, 2, seed=seed, solver=TIGHT)
    rng = np.random.default_rng(seed + 100)
    for name in ("b1", "b2", "head_b"):
        m.params[name] = 0.3 * rng.standard_normal(m.params[name].shape)
    m.feat_mean = 0.1 * rng.standard_normal(2)
    m.feat_std = 0.5 + rng.random(2)
    return m


def dense_jacobian(g, z, h=1e-6):
    """Central-difference Jacobian of a map on flattened ``z``."""
    cols = []
    for i in range(z.size):
        e = np.zeros(z.size)
        e[i] = h
        cols.append((g((z.ravel() + e).reshape(z.shape)) - g((z.ravel() - e).reshape(z.shape)))
                    .ravel() / (2 * h))
    return np.stack(cols, axis=1)


@pytest.fixture(scope="module")
def toy():
    """Trained model on a small chain-vs-ring set plus held-out data."""
    X, y = stack_images(generate_synthetic_dataset(60, seed=11, size=32))
    m = init_model(3, 8, 2, seed=0)
    m.mean, m.std = X.mean(axis=(0, 2, 3)), X.std(axis=(0, 2, 3))
    m, _ = deq.train(m, (X[:80], y[:80]), TrainConfig(learning_rate=0.5, epochs=15,
                                                      batch_size=20))
    return m, X[80:], y[80:]


# -- cell ---------------------------------------------------------------------

def test_zero_weight_cell_is_normalized_passthrough():
    p = zero_model(3, 4, 2).params
    z = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    out = deq_cell(p, z, np.zeros_like(z))
    rms2 = np.mean(z * z, axis=(1, 2, 3), keepdims=True)
    np.testing.assert_allclose(out, z / np.sqrt(4.0 + rms2), atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 5), st.integers(1, 5),
       st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_cell_preserves_shape(n, d, H, W, k1, seed):
    m = init_model(d, k1, 2, seed=seed % 1000)
    rng = np.random.default_rng(seed)
    z, x = rng.standard_normal((2, n, d, H, W))
    assert deq_cell(m.params, z, x).shape == (n, d, H, W)


def test_cell_shape_errors():
    p = init_model(3, 4, 2).params
    with pytest.raises(ValueError):
        deq_cell(p, np.zeros((1, 3, 2, 2)), np.zeros((1, 3, 2, 3)))
    bad = dict(p, W_in=np.full_like(p["W_in"], np.nan))
    with pytest.raises(ValueError):
        deq_cell(bad, np.zeros((1, 3, 2, 2)), np.zeros((1, 3, 2, 2)))


def test_cell_jacobian_is_contractive():
    rng = np.random.default_rng(3)
    m = init_model(3, 6, 2, seed=3)
    x, z = rng.standard_normal((2, 1, 3, 3, 3))
    J = dense_jacobian(lambda zz: deq_cell(m.params, zz, x), z)
    v = rng.standard_normal(J.shape[1])
    for _ in range(200):
        v = J.T @ (J @ v)
        v /= np.linalg.norm(v)
    sigma = np.linalg.norm(J @ v)
    assert sigma == pytest.approx(np.linalg.norm(J, 2), rel=1e-6)
    assert sigma < 0.9 + 1e-6


def test_lipschitz_projection_holds_after_init():
    for seed in range(5):
        m = init_model(3, 16, 2, seed=seed)
        assert deq.inner_lipschitz(m.params) <= m.lipschitz_cap + 1e-12


def test_vjp_matches_dense_jacobian():
    rng = np.random.default_rng(4)
    m = tiny_model()
    x, z, g = rng.standard_normal((3, 2, 2, 2, 2))
    J = dense_jacobian(lambda zz: deq_cell(m.params, zz, x), z)
    ev = deq._CellEval(m.params, z, x, m.norm_eps)
    np.testing.assert_allclose(ev.vjp_z(g).ravel(), J.T @ g.ravel(), atol=1e-8)


# -- forward ------------------------------------------------------------------

def test_zero_model_forward():
    m = zero_model(3, 4, 3)
    m.params["head_b"] = np.array([0.5, -1.0, 2.0])
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    zstar, logits, trace = deq_forward(m, x)
    assert trace.converged and trace.iterations <= 2
    np.testing.assert_array_equal(zstar, 0.0)
    np.testing.assert_array_equal(logits, np.tile(m.params["head_b"], (2, 1)))


def test_forward_logits_shape_and_certificate():
    m = init_model(3, 5, 4, seed=2)
    x = np.random.default_rng(1).standard_normal((4, 3, 6, 6))
    for accelerated in (True, False):
        zstar, logits, trace = deq_forward(m, x, accelerated)
        assert logits.shape == (4, 4)
        cell = deq_cell(m.params, zstar, x)
        assert relative_residual(cell, zstar, m.solver.lam) < m.solver.tol


def test_cross_solver_agreement(toy):
    m, X, _ = toy
    xs = deq.standardize(m, X)
    za, la, _ = deq_forward(m, xs, True)
    zs, ls, _ = deq_forward(m, xs, False)
    f = lambda z: deq_cell(m.params, z, xs)  # noqa: E731
    assert relative_residual(f(za), za, m.solver.lam) < 10 * m.solver.tol
    assert relative_residual(f(zs), zs, m.solver.lam) < 10 * m.solver.tol
    np.testing.assert_array_equal(np.argmax(la, 1), np.argmax(ls, 1))


def test_argmax_invariance_tight_tol(toy):
    m, X, _ = toy
    m = m.copy()
    m.solver = m.solver.replace(tol=1e-4)
    pa = np.argmax(deq.predict_logits(m, X, True), 1)
    ps = np.argmax(deq.predict_logits(m, X, False), 1)
    assert np.mean(pa == ps) >= 0.95


# -- backward -----------------------------------------------------------------

def test_zero_upstream_gradient():
    m = tiny_model()
    x = np.random.default_rng(0).standard_normal((1, 2, 2, 2))
    zstar, _, _ = deq_forward(m, x)
    grads = deq_backward(m, x, zstar, np.zeros_like(zstar))
    assert set(grads) == set(deq.LAYER_PARAMS)
    assert all(np.all(g == 0) for g in grads.values())


def fd_gradients(loss_fn, model, h=1e-5):
    out = {}
    for name in deq.PARAM_NAMES:
        P = model.params[name]
        fd = np.zeros_like(P)
        for i in np.ndindex(P.shape):
            old = P[i]
            P[i] = old + h
            lp = loss_fn()
            P[i] = old - h
            lm = loss_fn()
            P[i] = old
            fd[i] = (lp - lm) / (2 * h)
        out[name] = fd
    return out


def max_rel_error(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-7)))


@pytest.mark.parametrize("accelerated", [True, False])
def test_implicit_gradient_matches_finite_differences(accelerated):
    m = tiny_model()
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((1, 2, 2, 2)), np.array([1])
    _, grads, _, _, _ = loss_and_grads(m, x, y, accelerated, backward_tol=1e-12)
    fd = fd_gradients(lambda: cross_entropy(deq_forward(m, x, accelerated)[1], y), m)
    for name in deq.PARAM_NAMES:
        assert max_rel_error(grads[name], fd[name]) < 1e-4, name


def test_batch_statistics_gradient_matches_finite_differences():
    m = tiny_model(seed=2)
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((3, 2, 2, 2)), np.array([0, 1, 1])
    _, grads, _, _, _ = loss_and_grads(m, x, y, backward_tol=1e-12, batch_stats=True)

    def loss():
        pooled = deq.solve_equilibrium(m, x)[0].mean(axis=(2, 3))
        feats = (pooled - pooled.mean(0)) / np.sqrt(pooled.var(0) + deq.BATCH_NORM_EPS)
        return cross_entropy(feats @ m.params["head_W"].T + m.params["head_b"], y)
    fd = fd_gradients(loss, m)
    for name in deq.PARAM_NAMES:
        assert max_rel_error(grads[name], fd[name]) < 1e-4, name


def test_head_gradient_closed_form():
    m = tiny_model()
    rng = np.random.default_rng(5)
    x, y = rng.standard_normal((4, 2, 2, 2)), np.array([0, 1, 1, 0])
    _, grads, logits, _, pooled = loss_and_grads(m, x, y)
    feats = (pooled - m.feat_mean) / m.feat_std
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    onehot = np.eye(2)[y]
    np.testing.assert_allclose(grads["head_W"], (p - onehot).T @ feats / 4, atol=1e-12)
    np.testing.assert_allclose(grads["head_b"], (p - onehot).mean(0), atol=1e-12)


def test_adjoint_failure_is_explicit():
    m = tiny_model()
    m.solver = SolverConfig(max_iter=3, tol=1e-2)
    x = np.random.default_rng(0).standard_normal((1, 2, 2, 2))
    zstar = np.zeros_like(x)
    with pytest.raises(DivergenceError, match="adjoint"):
        deq_backward(m, x, zstar, np.ones_like(x), tol=1e-14)


# -- training -----------------------------------------------------------------

def small_data(n_per_class=6, seed=0):
    return stack_images(generate_synthetic_dataset(n_per_class, seed=seed, size=32))


def fresh(X, seed=0):
    m = init_model(3, 4, 2, seed=seed)
    m.mean, m.std = X.mean(axis=(0, 2, 3)), X.std(axis=(0, 2, 3))
    return m


def test_zero_learning_rate_leaves_model_unchanged():
    X, y = small_data()
    m = fresh(X)
    before = m.copy()
    m, hist = deq.train(m, (X, y), TrainConfig(learning_rate=0.0, epochs=3, batch_size=4))
    for name in deq.PARAM_NAMES:
        np.testing.assert_array_equal(m.params[name], before.params[name])
    np.testing.assert_array_equal(m.feat_mean, before.feat_mean)
    # batches are solved jointly, so reshuffling moves each tol-approximate
    # equilibrium slightly; the loss is constant to solver accuracy
    losses = [h.loss for h in hist]
    assert max(losses) - min(losses) < 1e-4 * losses[0]


def test_overfit_single_sample():
    X, y = small_data(1, seed=3)
    X1, y1 = X[1:2], y[1:2]
    m = fresh(X)
    m, hist = deq.train(m, (X1, y1), TrainConfig(learning_rate=0.5, epochs=200, batch_size=1))
    assert hist[-1].loss < math.log(2) / 10
    assert np.argmax(deq.predict_logits(m, X1)) == y1[0]


def test_training_is_deterministic():
    X, y = small_data()
    cfg = TrainConfig(learning_rate=0.3, epochs=2, batch_size=4, seed=5)
    runs = [deq.train(fresh(X), (X, y), cfg) for _ in range(2)]
    for name in deq.PARAM_NAMES:
        assert runs[0][0].params[name].tobytes() == runs[1][0].params[name].tobytes()
    assert [(h.loss, h.accuracy) for h in runs[0][1]] == [(h.loss, h.accuracy) for h in runs[1][1]]


def test_training_keeps_lipschitz_cap_and_history():
    X, y = small_data()
    m, hist = deq.train(fresh(X), (X, y), TrainConfig(learning_rate=2.0, epochs=3,
                                                      batch_size=5))
    assert deq.inner_lipschitz(m.params) <= m.lipschitz_cap + 1e-12
    assert [h.epoch for h in hist] == [1, 2, 3]
    assert all(b.elapsed_seconds >= a.elapsed_seconds for a, b in zip(hist, hist[1:]))


def test_cosine_schedule():
    cfg = TrainConfig(learning_rate=1.0, epochs=4, cosine_annealing=True)
    rates = [deq.learning_rate_at(cfg, e) for e in range(4)]
    np.testing.assert_allclose(rates, [1.0, (1 + math.cos(math.pi / 4)) / 2, 0.5,
                                       (1 + math.cos(3 * math.pi / 4)) / 2])
    assert deq.learning_rate_at(TrainConfig(learning_rate=0.3), 7) == 0.3


def test_train_input_errors():
    X, y = small_data()
    with pytest.raises(ValueError):
        deq.train(fresh(X), (X, y), TrainConfig(batch_size=len(y) + 1))
    with pytest.raises(ValueError):
        deq.train(fresh(X), (X, y + 5), TrainConfig(batch_size=4))
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_divergence_keeps_partial_history(monkeypatch):
    X, y = small_data()
    calls = {"n": 0}
    real = deq.loss_and_grads

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] > 3:
            raise DivergenceError("synthetic blow-up")
        return real(*args, **kwargs)
    monkeypatch.setattr(deq, "loss_and_grads", flaky)
    with pytest.raises(TrainingDiverged) as info:
        deq.train(fresh(X), (X, y), TrainConfig(epochs=3, batch_size=4))
    assert len(info.value.history) == 1


# -- evaluation ---------------------------------------------------------------

def test_constant_predictor():
    X, y = small_data(5)
    m = fresh(X)
    m.params["head_W"][:] = 0.0
    m.params["head_b"] = np.array([1.0, 0.0])
    cm, acc, failed = deq.evaluate(m, (X, y))
    assert acc == 0.5 and failed == 0
    np.testing.assert_array_equal(cm.counts, [[5, 0], [5, 0]])


def test_perfect_confusion():
    y = np.array([0, 1, 2, 2, 1])
    cm = ConfusionMatrix.from_labels(y, y, 3)
    np.testing.assert_array_equal(cm.counts, np.diag([1, 2, 2]))
    assert cm.accuracy == 1.0 and cm.total == 5


def test_cross_solver_evaluation(toy):
    m, X, y = toy
    _, acc_a, _ = deq.evaluate(m, (X, y), True)
    _, acc_s, _ = deq.evaluate(m, (X, y), False)
    assert abs(acc_a - acc_s) < 0.02


def test_failed_samples_are_excluded(monkeypatch):
    X, y = small_data(3)
    m = fresh(X)
    real = deq.deq_forward

    def picky(model, x, accelerated=True, solver=None):
        if len(x) > 1 or np.array_equal(x[0], deq.standardize(model, X[:1])[0]):
            raise DivergenceError("no")
        return real(model, x, accelerated, solver)
    monkeypatch.setattr(deq, "deq_forward", picky)
    cm, _, failed = deq.evaluate(m, (X, y))
    assert failed == 1 and cm.total == len(y) - 1


def test_confusion_csv_roundtrip(tmp_path):
    cm = ConfusionMatrix(np.array([[3, 1, 0], [0, 2, 2], [1, 0, 5]]))
    cm.to_csv(tmp_path / "cm.csv")
    assert (tmp_path / "cm.csv").read_text().splitlines()[0] == "true\\pred,0,1,2"
    np.testing.assert_array_equal(ConfusionMatrix.from_csv(tmp_path / "cm.csv").counts,
                                  cm.counts)


# -- serialization ------------------------------------------------------------

def test_model_roundtrip(tmp_path):
    m = tiny_model()
    m.mean, m.std = np.array([0.5, 1.0]), np.array([2.0, 3.0])
    save_model(m, tmp_path / "m.bin")
    assert (tmp_path / "m.bin").read_bytes()[:7] == b"DEQANN1"
    back = load_model(tmp_path / "m.bin")
    for name in deq.PARAM_NAMES:
        assert back.params[name].tobytes() == m.params[name].tobytes()
    assert back.solver == m.solver
    for attr in ("mean", "std", "feat_mean", "feat_std"):
        np.testing.assert_array_equal(getattr(back, attr), getattr(m, attr))
    assert (back.norm_eps, back.lipschitz_cap) == (m.norm_eps, m.lipschitz_cap)


def test_model_format_errors(tmp_path):
    save_model(tiny_model(), tmp_path / "m.bin")
    blob = (tmp_path / "m.bin").read_bytes()
    cases = {"magic": b"NOTDEQ1" + blob[7:], "truncated": blob[:-8],
             "trailing": blob + b"\0" * 8, "header": blob[:10]}
    for name, data in cases.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / name)


def test_history_csv_roundtrip(tmp_path):
    hist = [deq.EpochRecord(1, 0.6931471805599453, 0.5, 0.125),
            deq.EpochRecord(2, 1 / 3, 0.75, 0.3)]
    deq.write_history_csv(hist, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == \
        "epoch,loss,accuracy,elapsed_seconds"
    back = deq.read_history_csv(tmp_path / "h.csv")
    assert [(r.epoch, r.loss, r.accuracy, r.elapsed_seconds) for r in back] == \
        [(r.epoch, r.loss, r.accuracy, r.elapsed_seconds) for r in hist]


def test_model_needs_two_classes():
    with pytest.raises(ValueError):
        DeqModel(zero_model(2, 2, 2).params | {"head_W": np.zeros((1, 2)),
                                               "head_b": np.zeros(1)})
