"""Fixed-point solvers for maps ``z -> f(z, x)``.

Two solvers share one configuration and one telemetry format:

* :func:`forward_iterate`, the plain iteration ``z <- f(z, x)``;
* :func:`anderson_solve`, windowed Anderson extrapolation.  The mixing
  weights over the last ``m`` iterates solve the regularized bordered system

      [0  1^T          ] [nu   ]   [1]
      [1  G^T G + lam I] [alpha] = [0]

  where column ``i`` of ``G`` is ``f(z_{k-i}) - z_{k-i}`` (most recent
  first), and the next iterate is
  ``(1 - beta) * sum_i alpha_i z_{k-i} + beta * sum_i alpha_i f(z_{k-i})``.

Both solvers stop on the relative residual
``||f(z) - z|| / (||f(z)|| + lam)`` computed over the whole (batched) state.
"""

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, as_tensor, check_same_shape, l2_norm, solve_dense


class DivergenceError(RuntimeError):
    """A solve produced non-finite values. ``trace`` holds telemetry so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class SolverConfig:
    """Anderson / forward-iteration hyperparameters.

    Defaults follow the reference algorithm: window 5, regularization 1e-5,
    at most 1000 iterations, relative tolerance 1e-2, full mixing.
    """

    m: int = 5
    lam: float = 1e-5
    beta: float = 1.0
    tol: float = 1e-2
    max_iter: int = 1000

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"window size m must be a positive integer, got {self.m}")
        if not self.lam >= 0:
            raise ValueError(f"lam must be nonnegative, got {self.lam}")
        if not 0 < self.beta <= 1:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if int(self.max_iter) != self.max_iter or self.max_iter < 2:
            raise ValueError(f"max_iter must be an integer >= 2, got {self.max_iter}")

    def replace(self, **changes):
        values = dict(m=self.m, lam=self.lam, beta=self.beta, tol=self.tol,
                      max_iter=self.max_iter)
        values.update(changes)
        return SolverConfig(**values)


@dataclass
class SolverTrace:
    """Per-iteration telemetry of one solve.

    ``times`` are cumulative monotonic-clock seconds since the solve started.
    ``alpha_sums`` is filled by the Anderson solver only.  ``n_evals`` counts
    every call of the map, including the two seeding evaluations Anderson
    performs before its first residual check.
    """

    residuals: list = field(default_factory=list)
    times: list = field(default_factory=list)
    converged: bool = False
    n_evals: int = 0
    alpha_sums: list = field(default_factory=list)
    iterates: list = None

    @property
    def iterations(self):
        return len(self.residuals)

    @property
    def final_residual(self):
        return self.residuals[-1] if self.residuals else float("nan")

    @property
    def elapsed(self):
        return self.times[-1] if self.times else 0.0

    def record(self, residual, elapsed):
        self.residuals.append(float(residual))
        self.times.append(float(elapsed))

    def to_csv(self, path):
        write_trace_csv(self, path)


TRACE_HEADER = ["iter", "residual", "elapsed_seconds"]


def write_trace_csv(trace, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for i, (r, t) in enumerate(zip(trace.residuals, trace.times), start=1):
            writer.writerow([i, repr(r), repr(t)])


def read_trace_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != TRACE_HEADER:
            raise ValueError(f"{path}: unexpected trace header {header}")
        trace = SolverTrace()
        for row in reader:
            trace.record(float(row[1]), float(row[2]))
    return trace


def relative_residual(fz, z, lam):
    """``||fz - z|| / (||fz|| + lam)`` over all elements."""
    fz = as_tensor(fz)
    z = as_tensor(z)
    check_same_shape(fz, z, "f(z) and z")
    num = l2_norm(fz - z)
    if num == 0.0:
        return 0.0
    return num / (l2_norm(fz) + lam)


def _evaluate(f, z, x, shape, trace, what):
    fz = as_tensor(f(z.reshape(shape), x))
    trace.n_evals += 1
    if fz.shape != shape:
        raise ShapeError(f"fixed-point map returned shape {fz.shape}, expected {shape}")
    if not np.all(np.isfinite(fz)):
        raise DivergenceError(f"non-finite values in {what} after {trace.n_evals} evaluations",
                              trace)
    return fz


def forward_iterate(f, x, z0, cfg=None, keep_iterates=False):
    """Plain fixed-point iteration ``z <- f(z, x)``.

    Returns the last iterate ``z`` whose residual was checked (so that
    ``relative_residual(f(z, x), z) < tol`` on convergence) and the trace.
    """
    cfg = cfg or SolverConfig()
    z = as_tensor(z0).copy()
    if not np.all(np.isfinite(z)):
        raise DivergenceError("initial guess is not finite", SolverTrace())
    shape = z.shape
    trace = SolverTrace(iterates=[] if keep_iterates else None)
    start = time.monotonic()
    for _ in range(cfg.max_iter):
        if keep_iterates:
            trace.iterates.append(z.copy())
        fz = _evaluate(f, z, x, shape, trace, "forward iterate")
        res = relative_residual(fz, z, cfg.lam)
        trace.record(res, time.monotonic() - start)
        if res < cfg.tol:
            trace.converged = True
            break
        z = fz
    return z, trace


class AndersonState:
    """Ring buffer of the last ``m`` iterates and their images under ``f``.

    Entries are stored as rows of ``(m, size)`` arrays: map values ``F``
    and residuals ``R = F - X``; the iterates ``X`` are recovered on demand.
    :attr:`Xcols` and :attr:`Fcols` give the ``(size, m)`` column view.
    Pushing entry number ``k`` writes slot ``k % m``.  The Gram matrix of
    the residuals is kept up to date slot by slot, so a step costs
    ``O(m * size)``.
    """

    def __init__(self, size, m, buffers=None):
        self.m = m
        if buffers is None:
            buffers = np.zeros((2, m, size))
        elif buffers.shape != (2, m, size):
            raise ShapeError(f"history buffers must have shape {(2, m, size)}")
        self.buffers = buffers
        self.F, self.R = buffers
        self.gram = np.zeros((m, m))
        self.count = 0

    @property
    def X(self):
        return self.F - self.R

    @property
    def Xcols(self):
        return self.X.T

    @property
    def Fcols(self):
        return self.F.T

    def push(self, z, fz):
        slot = self.count % self.m
        self.F[slot] = fz
        np.subtract(fz, z, out=self.R[slot])
        self.count += 1
        dots = self.R[:self.n_valid] @ self.R[slot]
        self.gram[slot, :self.n_valid] = dots
        self.gram[:self.n_valid, slot] = dots
        return slot

    def residual_gram(self, n):
        """``G^T G`` for the newest ``n`` entries, most recent first."""
        idx = self.recent_slots(n)
        return self.gram[np.ix_(idx, idx)]

    @property
    def n_valid(self):
        return min(self.count, self.m)

    def recent_slots(self, n):
        """Slot indices of the ``n`` newest entries, most recent first."""
        if n > self.n_valid:
            raise ValueError(f"only {self.n_valid} entries stored, asked for {n}")
        return [(self.count - 1 - i) % self.m for i in range(n)]


# Idle history buffers by shape.  Large fresh allocations are page-faulted in
# on first touch, which costs more than a short solve itself; reusing them
# keeps the per-step cost at the arithmetic.
_BUFFER_POOL = {}


def _acquire_buffers(m, size):
    free = _BUFFER_POOL.get((m, size))
    return free.pop() if free else np.zeros((2, m, size))


def _release_buffers(buffers):
    free = _BUFFER_POOL.setdefault(buffers.shape[1:], [])
    if len(free) < 2:
        free.append(buffers)


def build_difference_matrix(state, n_cols):
    """``G`` whose column ``i`` is ``F - X`` of the ``i``-th newest entry."""
    idx = state.recent_slots(n_cols)
    return state.R[idx].T


def solve_alpha(G, lam):
    """Mixing weights minimizing ``||G alpha||^2 + lam ||alpha||^2`` with ``sum(alpha) = 1``.

    Solves the bordered KKT system and returns ``(alpha, nu)``.  Raises
    :class:`~deqann.tensor.SingularMatrixError` if that system is singular,
    which for finite ``G`` can only happen with ``lam == 0``.
    """
    G = as_tensor(G)
    if G.ndim != 2 or G.shape[1] < 1:
        raise ShapeError(f"G must be a matrix with at least one column, got {G.shape}")
    return solve_alpha_gram(G.T @ G, lam)


def solve_alpha_gram(gram, lam):
    """:func:`solve_alpha` given the Gram matrix ``G^T G`` instead of ``G``."""
    n = gram.shape[0]
    A = np.empty((n + 1, n + 1))
    A[0, 0] = 0.0
    A[0, 1:] = 1.0
    A[1:, 0] = 1.0
    A[1:, 1:] = gram + lam * np.eye(n)
    rhs = np.zeros(n + 1)
    rhs[0] = 1.0
    y = solve_dense(A, rhs)
    return y[1:], float(y[0])


def anderson_update(state, alpha, beta):
    """Mix the newest ``len(alpha)`` history entries into the next iterate."""
    alpha = as_tensor(alpha)
    n_valid = state.n_valid
    # scatter the weights onto ring slots so the mix reads the buffers in place
    w = np.zeros(n_valid)
    w[state.recent_slots(len(alpha))] = alpha
    mixed_f = w @ state.F[:n_valid]
    if beta == 1.0:
        return mixed_f
    # (1 - beta) X + beta F with X = F - R
    return mixed_f - (1.0 - beta) * (w @ state.R[:n_valid])


def _residual_from_gram(state, slot, fz, lam):
    num = math.sqrt(state.gram[slot, slot])
    return 0.0 if num == 0.0 else num / (float(np.sqrt(fz @ fz)) + lam)


def anderson_solve(f, x, z0, cfg=None, keep_iterates=False, monitor=None):
    """Anderson-extrapolated fixed-point iteration.

    The history is seeded with ``(z0, f(z0))`` and ``(f(z0), f(f(z0)))``;
    each following step ``k = 2, 3, ...`` solves for the mixing weights over
    the newest ``min(k, m)`` entries, evaluates ``f`` at the extrapolate and
    checks its residual.  ``monitor(k, G, alpha)`` is called every step when
    given.  Returns the newest iterate and the trace.
    """
    cfg = cfg or SolverConfig()
    z0 = as_tensor(z0)
    if not np.all(np.isfinite(z0)):
        raise DivergenceError("initial guess is not finite", SolverTrace())
    trace = SolverTrace(iterates=[] if keep_iterates else None)
    state = AndersonState(z0.size, cfg.m, _acquire_buffers(cfg.m, z0.size))
    try:
        return _anderson_loop(f, x, z0, cfg, state, trace, keep_iterates, monitor)
    finally:
        _release_buffers(state.buffers)


def _anderson_loop(f, x, z0, cfg, state, trace, keep_iterates, monitor):
    shape = z0.shape
    start = time.monotonic()

    z = z0.ravel().copy()
    for _ in range(2):
        if keep_iterates:
            trace.iterates.append(z.reshape(shape).copy())
        fz = _evaluate(f, z, x, shape, trace, "Anderson seed").ravel()
        state.push(z, fz)
        last, z = z, fz
    # newest stored iterate, returned as is if the step budget is already spent
    z = last
    for k in range(2, cfg.max_iter):
        n = min(k, cfg.m)
        alpha, _ = solve_alpha_gram(state.residual_gram(n), cfg.lam)
        trace.alpha_sums.append(float(np.sum(alpha)))
        if monitor is not None:
            monitor(k, build_difference_matrix(state, n), alpha)
        z = anderson_update(state, alpha, cfg.beta)
        if not np.all(np.isfinite(z)):
            raise DivergenceError(f"non-finite Anderson extrapolate at step {k}", trace)
        if keep_iterates:
            trace.iterates.append(z.reshape(shape).copy())
        fz = _evaluate(f, z, x, shape, trace, "Anderson iterate").ravel()
        slot = state.push(z, fz)
        # ||f(z) - z||^2 is the fresh Gram diagonal entry
        res = _residual_from_gram(state, slot, fz, cfg.lam)
        trace.record(res, time.monotonic() - start)
        if res < cfg.tol:
            trace.converged = True
            break
    return z.reshape(shape).copy(), trace


SOLVERS = {"accelerated": anderson_solve, "standard": forward_iterate}


def get_solver(accelerated):
    return anderson_solve if accelerated else forward_iterate
