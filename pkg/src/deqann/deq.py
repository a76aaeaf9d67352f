"""Single implicit-layer deep equilibrium (DEQ) image classifier.

The layer acts per pixel on ``(n, d, H, W)`` tensors:

    s = tanh(W_out tanh(W_in z + U x + b1) + b2) + z
    f(z, x) = s / sqrt(norm_eps + mean(s**2))          # mean per sample

The inner transform expands to ``k1`` channels and contracts back to ``d``
so ``f(z, x)`` has the shape of ``z`` and ``x``.  Its Jacobian in ``z`` is
bounded by ``(1 + ||W_out|| ||W_in||) / sqrt(norm_eps)``; with the default
``norm_eps = 4`` and the Lipschitz cap ``||W_out|| ||W_in|| <= 0.8`` enforced
at init and after every update, every cell is a 0.9-contraction.

The equilibrium ``z*`` is mean-pooled over space, standardized (batch
statistics while training, frozen population statistics otherwise) and fed
to a linear softmax head.
Gradients through ``z*`` come from implicit differentiation: the adjoint
``u = J^T u + dL/dz*`` is solved with the same fixed-point solver family as
the forward pass, then pushed through the cell's parameter vector-Jacobian
product once.
"""

import csv
import logging
import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import DivergenceError, SolverConfig, get_solver, relative_residual

logger = logging.getLogger(__name__)

LAYER_PARAMS = ("W_in", "U", "b1", "W_out", "b2")
HEAD_PARAMS = ("head_W", "head_b")
PARAM_NAMES = LAYER_PARAMS + HEAD_PARAMS
MAGIC = b"DEQANN1"

# checked / violated equilibrium certificates across every converged forward pass
CERTIFICATES = {"checked": 0, "violations": 0}


class EquilibriumError(AssertionError):
    """A solve reported convergence but the returned state is not an equilibrium."""


class ModelFormatError(ValueError):
    """A model file is not a valid ``DEQANN1`` container."""


@dataclass
class DeqModel:
    params: dict
    solver: SolverConfig = field(default_factory=SolverConfig)
    mean: np.ndarray = None
    std: np.ndarray = None
    norm_eps: float = 4.0
    lipschitz_cap: float = 0.8
    feat_mean: np.ndarray = None
    feat_std: np.ndarray = None

    def __post_init__(self):
        d = self.n_channels
        if self.mean is None:
            self.mean = np.zeros(d)
        if self.std is None:
            self.std = np.ones(d)
        if self.feat_mean is None:
            self.feat_mean = np.zeros(d)
        if self.feat_std is None:
            self.feat_std = np.ones(d)
        if self.n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.n_classes}")
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(self.params[name])):
                raise ValueError(f"parameter {name} has non-finite entries")

    @property
    def n_channels(self):
        return self.params["W_in"].shape[1]

    @property
    def n_inner(self):
        return self.params["W_in"].shape[0]

    @property
    def n_classes(self):
        return self.params["head_W"].shape[0]

    def copy(self):
        return DeqModel({k: v.copy() for k, v in self.params.items()}, self.solver,
                        self.mean.copy(), self.std.copy(), self.norm_eps, self.lipschitz_cap,
                        self.feat_mean.copy(), self.feat_std.copy())


def init_model(d, k1, n_classes, seed=0, solver=None, norm_eps=4.0, lipschitz_cap=0.8):
    """Random model with weights ~ N(0, (0.9 / sqrt(fan_in))^2) and zero biases."""
    rng = np.random.default_rng(seed)
    params = {
        "W_in": rng.standard_normal((k1, d)) * 0.9 / math.sqrt(d),
        "U": rng.standard_normal((k1, d)) * 0.9 / math.sqrt(d),
        "b1": np.zeros(k1),
        "W_out": rng.standard_normal((d, k1)) * 0.9 / math.sqrt(k1),
        "b2": np.zeros(d),
        "head_W": rng.standard_normal((n_classes, d)) * 0.9 / math.sqrt(d),
        "head_b": np.zeros(n_classes),
    }
    model = DeqModel(params, solver or SolverConfig(), norm_eps=norm_eps,
                     lipschitz_cap=lipschitz_cap)
    project_lipschitz(model)
    return model


def zero_model(d, k1, n_classes, solver=None):
    params = {"W_in": np.zeros((k1, d)), "U": np.zeros((k1, d)), "b1": np.zeros(k1),
              "W_out": np.zeros((d, k1)), "b2": np.zeros(d),
              "head_W": np.zeros((n_classes, d)), "head_b": np.zeros(n_classes)}
    return DeqModel(params, solver or SolverConfig())


def inner_lipschitz(params):
    return np.linalg.norm(params["W_out"], 2) * np.linalg.norm(params["W_in"], 2)


def project_lipschitz(model):
    """Rescale ``W_in`` and ``W_out`` so their spectral-norm product respects the cap."""
    lip = inner_lipschitz(model.params)
    if lip > model.lipschitz_cap:
        shrink = math.sqrt(model.lipschitz_cap / lip)
        model.params["W_in"] = model.params["W_in"] * shrink
        model.params["W_out"] = model.params["W_out"] * shrink


def _check_pair(z, x):
    if z.shape != x.shape or z.ndim != 4:
        raise ValueError(f"z and x must share an (n, d, H, W) shape, got {z.shape} and {x.shape}")


def input_injection(params, x):
    """``U x + b1`` per pixel; constant along a fixed-point solve."""
    n, d = x.shape[:2]
    return params["U"] @ x.reshape(n, d, -1) + params["b1"][:, None]


class _CellEval:
    """Cell activations at one ``(z, x)``, kept for vector-Jacobian products."""

    def __init__(self, params, z, x, norm_eps, injection=None):
        _check_pair(z, x)
        self.params = params
        self.shape = z.shape
        n, d = z.shape[:2]
        self.z = z.reshape(n, d, -1)
        self.x = x.reshape(n, d, -1)
        p = params
        if injection is None:
            injection = input_injection(p, x)
        a = p["W_in"] @ self.z + injection
        self.h = np.tanh(a)
        self.t = np.tanh(p["W_out"] @ self.h + p["b2"][:, None])
        self.s = self.t + self.z
        self.size = self.s[0].size
        ms = np.mean(self.s * self.s, axis=(1, 2), keepdims=True)
        self.q = np.sqrt(norm_eps + ms)
        self.out = (self.s / self.q).reshape(self.shape)

    def _ds(self, gout):
        g = gout.reshape(self.s.shape)
        dot = np.sum(g * self.s, axis=(1, 2), keepdims=True)
        return g / self.q - self.s * dot / (self.size * self.q ** 3)

    def _tanh_slopes(self):
        if not hasattr(self, "dt"):
            self.dt = 1.0 - self.t ** 2
            self.dh = 1.0 - self.h ** 2
        return self.dt, self.dh

    def vjp_z(self, gout):
        """``J_z^T gout`` for the cell Jacobian in ``z``."""
        dt, dh = self._tanh_slopes()
        ds = self._ds(gout)
        da = (self.params["W_out"].T @ (ds * dt)) * dh
        return (ds + self.params["W_in"].T @ da).reshape(self.shape)

    def vjp_params(self, gout):
        dt, dh = self._tanh_slopes()
        ds = self._ds(gout)
        dc = ds * dt
        da = (self.params["W_out"].T @ dc) * dh
        return {
            "W_in": np.einsum("nkp,ndp->kd", da, self.z),
            "U": np.einsum("nkp,ndp->kd", da, self.x),
            "b1": da.sum(axis=(0, 2)),
            "W_out": np.einsum("ndp,nkp->dk", dc, self.h),
            "b2": dc.sum(axis=(0, 2)),
        }


def deq_cell(params, z, x, norm_eps=4.0):
    """One application of the implicit layer; output has the shape of ``z``."""
    for name in LAYER_PARAMS:
        if not np.all(np.isfinite(params[name])):
            raise ValueError(f"parameter {name} has non-finite entries")
    return _CellEval(params, z, x, norm_eps).out


def standardize(model, images):
    """Map raw ``(n, d, H, W)`` inputs to the model's normalized input space."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1] != model.n_channels:
        raise ValueError(f"expected inputs of shape (n, {model.n_channels}, H, W), "
                         f"got {images.shape}")
    if not np.all(np.isfinite(images)):
        raise ValueError("inputs contain non-finite values")
    return (images - model.mean[:, None, None]) / model.std[:, None, None]


def solve_equilibrium(model, x, accelerated=True, solver=None):
    """Equilibrium of the layer for standardized inputs ``x`` starting from zero."""
    cfg = solver or model.solver
    injection = input_injection(model.params, x)

    def cell(z, xx):
        return _CellEval(model.params, z, xx, model.norm_eps, injection).out
    zstar, trace = get_solver(accelerated)(cell, x, np.zeros_like(x), cfg)
    if trace.converged:
        res = relative_residual(cell(zstar, x), zstar, cfg.lam)
        CERTIFICATES["checked"] += 1
        if not res < cfg.tol:
            CERTIFICATES["violations"] += 1
            raise EquilibriumError(f"converged solve left residual {res:.3e} >= tol {cfg.tol}")
    else:
        logger.warning("forward solve stopped at max_iter with residual %.3e",
                       trace.final_residual)
    return zstar, trace


def pool(model, zstar):
    """Spatial mean of ``z*``, standardized with the model's feature statistics."""
    return (zstar.mean(axis=(2, 3)) - model.feat_mean) / model.feat_std


def head_logits(model, zstar):
    feats = pool(model, zstar)
    return feats @ model.params["head_W"].T + model.params["head_b"], feats


def refresh_feature_stats(model, xs, accelerated=True, batch_size=64):
    """Freeze population statistics of the pooled equilibrium over standardized ``xs``."""
    pooled = np.concatenate([solve_equilibrium(model, xs[lo:lo + batch_size], accelerated)[0]
                             .mean(axis=(2, 3)) for lo in range(0, len(xs), batch_size)])
    model.feat_mean = pooled.mean(axis=0)
    model.feat_std = np.sqrt(pooled.var(axis=0) + BATCH_NORM_EPS)


def deq_forward(model, x, accelerated=True, solver=None):
    """Solve for ``z*`` on standardized inputs and return ``(z*, logits, trace)``."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs contain non-finite values")
    zstar, trace = solve_equilibrium(model, x, accelerated, solver)
    logits, _ = head_logits(model, zstar)
    return zstar, logits, trace


def deq_backward(model, x, zstar, loss_grad_at_zstar, accelerated=True, tol=None):
    """Layer-parameter gradients by implicit differentiation at the equilibrium.

    Solves ``u = J_z(z*)^T u + g`` with ``g = dL/dz*`` and returns
    ``J_theta^T u`` for every layer parameter.  The linear system is solved
    with ``g`` rescaled to unit root-mean-square, the same scale as the
    forward state, so the solver's fixed regularization stays negligible
    against the residual Gram matrix.
    """
    g = np.asarray(loss_grad_at_zstar, dtype=np.float64)
    ev = _CellEval(model.params, zstar, x, model.norm_eps)
    gnorm = float(np.sqrt(np.sum(g * g)))
    if gnorm == 0.0:
        return {name: np.zeros_like(model.params[name]) for name in LAYER_PARAMS}
    scale = gnorm / math.sqrt(g.size)
    g_unit = g / scale
    cfg = model.solver
    if tol is not None:
        cfg = cfg.replace(tol=tol)
    adjoint = lambda u, _: ev.vjp_z(u) + g_unit  # noqa: E731
    u, trace = get_solver(accelerated)(adjoint, None, np.zeros_like(g), cfg)
    if not trace.converged:
        raise DivergenceError(
            "adjoint solve failed to converge (Jacobian spectral radius >= 1?); "
            f"residual {trace.final_residual:.3e} after {trace.iterations} iterations", trace)
    grads = ev.vjp_params(u)
    return {name: scale * grads[name] for name in LAYER_PARAMS}


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, y):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(y)), y]))


BATCH_NORM_EPS = 1e-12


def loss_and_grads(model, x, y, accelerated=True, backward_tol=None, batch_stats=False):
    """Mean softmax cross-entropy on a standardized batch and its full gradient.

    With ``batch_stats`` the pooled features are standardized with the
    batch's own mean and standard deviation (and differentiated through
    them); otherwise the model's frozen feature statistics are used.
    Returns ``(loss, grads, logits, trace, pooled)`` where ``pooled`` is the
    unstandardized spatial mean of ``z*``.  Head gradients are the closed-form
    softmax-regression ones on the standardized features.
    """
    y = np.asarray(y)
    zstar, trace = solve_equilibrium(model, x, accelerated)
    pooled = zstar.mean(axis=(2, 3))
    n = len(y)
    if batch_stats:
        if n < 2:
            raise ValueError("batch statistics need at least two samples")
        sd = np.sqrt(pooled.var(axis=0) + BATCH_NORM_EPS)
        feats = (pooled - pooled.mean(axis=0)) / sd
    else:
        feats = pool(model, zstar)
    logits = feats @ model.params["head_W"].T + model.params["head_b"]
    probs = softmax(logits)
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grads = {"head_W": dlogits.T @ feats, "head_b": dlogits.sum(axis=0)}
    dfeats = dlogits @ model.params["head_W"]
    if batch_stats:
        dpooled = (dfeats - dfeats.mean(axis=0)
                   - feats * (dfeats * feats).mean(axis=0)) / sd
    else:
        dpooled = dfeats / model.feat_std
    hw = zstar.shape[2] * zstar.shape[3]
    gz = np.broadcast_to(dpooled[:, :, None, None] / hw, zstar.shape)
    if backward_tol is None:
        backward_tol = model.solver.tol / 100
    grads.update(deq_backward(model, x, zstar, gz, accelerated, backward_tol))
    return cross_entropy(logits, y), grads, logits, trace, pooled


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 20
    batch_size: int = 32
    cosine_annealing: bool = False
    seed: int = 0
    backward_tol: float = None
    feature_stats: bool = True

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    elapsed_seconds: float
    iterations: int = 0


class TrainingDiverged(DivergenceError):
    def __init__(self, message, trace=None, history=None):
        super().__init__(message, trace)
        self.history = history or []


def _as_arrays(data):
    if isinstance(data, tuple):
        X, y = data
        return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.int64)
    from .graphimage import stack_images
    return stack_images(data)


def _batches(order, batch_size, min_two):
    bounds = list(range(0, len(order), batch_size)) + [len(order)]
    if min_two and len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        # a trailing singleton has no batch variance; merge it into its neighbor
        del bounds[-2]
    return [order[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]


def learning_rate_at(cfg, epoch):
    if not cfg.cosine_annealing:
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


def train(model, data, cfg, accelerated=True, callback=None):
    """Mini-batch SGD on softmax cross-entropy.

    ``data`` is a list of labeled images or an ``(X, y)`` pair of raw inputs
    (standardized with the model's statistics).  The model is updated in
    place and returned with the per-epoch history.
    """
    X, y = _as_arrays(data)
    if len(y) == 0:
        raise ValueError("training data is empty")
    if y.min() < 0 or y.max() >= model.n_classes:
        raise ValueError(f"labels must lie in [0, {model.n_classes})")
    if cfg.batch_size > len(y):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {len(y)}")
    xs = standardize(model, X)
    rng = np.random.default_rng(cfg.seed)
    history = []
    start = time.monotonic()
    # a zero step size leaves the model untouched, frozen statistics included;
    # single-sample batches have no batch variance and keep the frozen ones too
    batch_stats = cfg.feature_stats and cfg.learning_rate > 0 and cfg.batch_size >= 2
    for epoch in range(cfg.epochs):
        lr = learning_rate_at(cfg, epoch)
        order = rng.permutation(len(y))
        total_loss = 0.0
        correct = 0
        iters = 0
        for idx in _batches(order, cfg.batch_size, batch_stats):
            try:
                loss, grads, logits, trace, _ = loss_and_grads(
                    model, xs[idx], y[idx], accelerated, cfg.backward_tol, batch_stats)
            except DivergenceError as exc:
                raise TrainingDiverged(f"epoch {epoch + 1}: {exc}", exc.trace, history) from exc
            iters += trace.iterations
            total_loss += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == y[idx]))
            if lr:
                for name in PARAM_NAMES:
                    model.params[name] = model.params[name] - lr * grads[name]
                project_lipschitz(model)
        rec = EpochRecord(epoch + 1, total_loss / len(y), correct / len(y),
                          time.monotonic() - start, iters)
        history.append(rec)
        logger.info("epoch %d loss %.4f acc %.3f (%.1fs)", rec.epoch, rec.loss, rec.accuracy,
                    rec.elapsed_seconds)
        if callback is not None:
            callback(rec)
    if batch_stats:
        refresh_feature_stats(model, xs, accelerated, cfg.batch_size)
    return model, history


@dataclass
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    counts: np.ndarray

    @classmethod
    def from_labels(cls, y_true, y_pred, n_classes):
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true), np.asarray(y_pred)), 1)
        return cls(counts)

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def accuracy(self):
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def to_csv(self, path):
        n = self.counts.shape[0]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred"] + [str(j) for j in range(n)])
            for i in range(n):
                w.writerow([str(i)] + [str(int(c)) for c in self.counts[i]])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        return cls(np.array([[int(c) for c in r[1:]] for r in rows[1:]], dtype=np.int64))


def predict_logits(model, X, accelerated=True, batch_size=64):
    """Logits for raw inputs; rows whose solve diverged are NaN."""
    xs = standardize(model, X)
    out = np.full((len(xs), model.n_classes), np.nan)
    for lo in range(0, len(xs), batch_size):
        sl = slice(lo, lo + batch_size)
        try:
            out[sl] = deq_forward(model, xs[sl], accelerated)[1]
        except DivergenceError:
            for i in range(lo, min(lo + batch_size, len(xs))):
                try:
                    out[i] = deq_forward(model, xs[i:i + 1], accelerated)[1][0]
                except DivergenceError:
                    logger.warning("forward solve diverged on sample %d", i)
    return out


def evaluate(model, data, accelerated=True, batch_size=64):
    """Confusion matrix and accuracy; diverged samples are excluded and counted.

    Returns ``(confusion, accuracy, n_failed)``.
    """
    X, y = _as_arrays(data)
    if len(y) == 0:
        raise ValueError("evaluation data is empty")
    logits = predict_logits(model, X, accelerated, batch_size)
    ok = np.all(np.isfinite(logits), axis=1)
    n_failed = int(np.sum(~ok))
    if n_failed:
        logger.warning("%d samples excluded after solver divergence", n_failed)
    cm = ConfusionMatrix.from_labels(y[ok], np.argmax(logits[ok], axis=1), model.n_classes)
    return cm, cm.accuracy, n_failed


HISTORY_HEADER = ["epoch", "loss", "accuracy", "elapsed_seconds"]


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in history:
            w.writerow([r.epoch, repr(r.loss), repr(r.accuracy), repr(r.elapsed_seconds)])


def read_history_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader) != HISTORY_HEADER:
            raise ValueError(f"{path}: not a training history CSV")
        return [EpochRecord(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in reader]


def _model_arrays(model):
    s = model.solver
    config = np.array([s.m, s.lam, s.beta, s.tol, s.max_iter, model.norm_eps,
                       model.lipschitz_cap], dtype=np.float64)
    return [model.params[n] for n in PARAM_NAMES] + [model.mean, model.std, model.feat_mean,
                                                     model.feat_std, config]


def save_model(model, path):
    """Write ``DEQANN1`` magic, an array shape table (u64 LE), then float64 LE payload."""
    arrays = [np.ascontiguousarray(a, dtype="<f8") for a in _model_arrays(model)]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(arrays)))
        for a in arrays:
            fh.write(struct.pack("<Q", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        for a in arrays:
            fh.write(a.tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic, not a DEQANN1 model file")
    try:
        pos = len(MAGIC)
        (count,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        if count != len(PARAM_NAMES) + 5:
            raise ModelFormatError(f"{path}: expected {len(PARAM_NAMES) + 5} arrays, got {count}")
        shapes = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            shapes.append(struct.unpack_from(f"<{ndim}Q", blob, pos))
            pos += 8 * ndim
        arrays = []
        for shape in shapes:
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(blob):
                raise ModelFormatError(f"{path}: truncated payload")
            arrays.append(np.frombuffer(blob, dtype="<f8", count=size, offset=pos)
                          .reshape(shape).astype(np.float64))
            pos += 8 * size
    except struct.error as exc:
        raise ModelFormatError(f"{path}: truncated header") from exc
    if pos != len(blob):
        raise ModelFormatError(f"{path}: {len(blob) - pos} trailing bytes")
    params = dict(zip(PARAM_NAMES, arrays))
    mean, std, feat_mean, feat_std, config = arrays[len(PARAM_NAMES):]
    solver = SolverConfig(m=int(config[0]), lam=float(config[1]), beta=float(config[2]),
                          tol=float(config[3]), max_iter=int(config[4]))
    return DeqModel(params, solver, mean, std, float(config[5]), float(config[6]), feat_mean,
                    feat_std)
