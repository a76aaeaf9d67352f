"""Seeded benchmark maps for the fixed-point solvers."""

import numpy as np


def linear_contraction(dim, rho, rng):
    """``(A, b)`` with ``A`` of spectral radius ``rho`` (random Gaussian, rescaled)."""
    A = rng.standard_normal((dim, dim))
    A *= rho / np.max(np.abs(np.linalg.eigvals(A)))
    return A, rng.standard_normal(dim)


def linear_map(A, b):
    return lambda z, x: A @ z + b


def tanh_contraction(dim, rng, norm=0.9, low=0.5):
    """Symmetric ``A`` with eigenvalues in ``[low, norm]`` (top one pinned to ``norm``).

    ``z -> tanh(A z + x)`` is then a contraction with constant ``norm`` whose
    slowest mode decays at exactly that rate near the origin.
    """
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    eig = rng.uniform(low, norm, dim)
    eig[0] = norm
    return (q * eig) @ q.T


def tanh_map(A):
    return lambda z, x: np.tanh(A @ z + x)


def contraction_suite(n_cases, dim=64, seed=0):
    """``n_cases`` ``(name, f, x, z0)`` tanh-cell problems."""
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n_cases):
        A = tanh_contraction(dim, rng)
        x = rng.standard_normal(dim)
        cases.append((f"tanh_{i:03d}", tanh_map(A), x, np.zeros(dim)))
    return cases
