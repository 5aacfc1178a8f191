"""Dense linear algebra, seeded random draws and initializers.

Matrices and vectors are plain float64 numpy arrays. Every random draw goes
through an explicit ``numpy.random.Generator`` (PCG64); there is no global
random state anywhere in the package.
"""
from __future__ import annotations

import math

import numpy as np

__all__ = [
    "make_rng",
    "as_vector",
    "as_matrix",
    "matvec",
    "sample_gaussian",
    "sample_uniform",
    "kaiming_uniform_init",
    "orthonormal_rows",
    "l2_norm",
    "l2_dist",
    "spectral_norm",
]


def make_rng(seed: int) -> np.random.Generator:
    """Return an independent PCG64 generator for ``seed``."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def matvec(m, v) -> np.ndarray:
    m = as_matrix(m)
    v = as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise ValueError(f"dimension mismatch: {m.shape} @ {v.shape}")
    return m @ v


def sample_gaussian(rng: np.random.Generator, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Draw ``n`` i.i.d. normal values. ``std == 0`` returns ``mean`` exactly."""
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    draws = rng.standard_normal(n)
    if std == 0:
        return np.full(n, float(mean))
    return mean + std * draws


def sample_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    if lo > hi:
        raise ValueError(f"empty interval [{lo}, {hi})")
    u = rng.random()
    if lo == hi:
        return float(lo)
    return float(lo + (hi - lo) * u)


def kaiming_uniform_init(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Uniform(-b, b) entries with the fan-in bound b = sqrt(6 / cols)."""
    if rows < 1 or cols < 1:
        raise ValueError(f"bad shape ({rows}, {cols})")
    bound = math.sqrt(6.0 / cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


def orthonormal_rows(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Random ``rows x cols`` matrix with orthonormal rows (rows <= cols)."""
    if rows > cols:
        raise ValueError(f"cannot have {rows} orthonormal rows in dimension {cols}")
    g = rng.standard_normal((cols, rows))
    q, r = np.linalg.qr(g)
    # sign fix makes the draw a deterministic function of g
    q = q * np.sign(np.diag(r))
    return q.T.copy()


def l2_norm(v) -> float:
    return float(np.sqrt(np.dot(v, v))) if np.ndim(v) == 1 else float(np.linalg.norm(v))


def l2_dist(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return l2_norm(u - v)


def spectral_norm(m, iters: int = 100) -> float:
    """Largest singular value by power iteration on ``m.T @ m``.

    The start vector comes from a fixed-seed generator so the result is a
    pure function of ``m``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0 or not np.any(m):
        return 0.0
    v = make_rng(0x5EED).standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        u = m @ v
        w = m.T @ u
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        sigma = math.sqrt(nw)
    # one Rayleigh step to settle the last iterate
    return max(sigma, float(np.linalg.norm(m @ v)))
