"""Deterministic numeric primitives: seeded RNG streams, L2 normalization
with its exact gradient, cosine similarity, and finite-difference checking.

All arrays are float64. Every operation is a pure function of its inputs,
so anything built on top of this module is reproducible bit-for-bit given
the same seed.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from enum import IntEnum

import numpy as np

EPS_NORM = 1e-12


class NearZeroNorm(ValueError):
    """Input vector has (near-)zero L2 norm and cannot be normalized."""


class Stream(IntEnum):
    """Named RNG streams, one per purpose.

    Keeping purposes on separate streams means e.g. changing the augmentation
    schedule never perturbs the shuffling sequence.
    """

    DATA = 0      # synthetic dataset generation
    NOISE = 1     # label-noise injection
    SHUFFLE = 2   # per-epoch mini-batch ordering
    AUGMENT1 = 3  # first view
    AUGMENT2 = 4  # second view
    INIT = 5      # parameter initialization (sub-keyed per network)
    HEAD = 6      # pseudo-label head training
    PROBE = 7     # diagnostics probe-set sampling
    SPLIT = 8     # train/test split for evaluation


def _mix64(a: int, b: int) -> int:
    # splitmix64 finalizer; cheap key derivation for sub-streams.
    z = (a + 0x9E3779B97F4A7C15 * (b + 1)) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def make_rng(seed: int, stream: int, *subkeys: int) -> np.random.Generator:
    """Counter-based generator for (seed, stream, *subkeys).

    Philox is used so that sequences are platform-portable: the same key
    always yields the same draws. Each (seed, stream, subkeys) tuple owns an
    independent stream.
    """
    key = _mix64(int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream))
    for sk in subkeys:
        key = _mix64(key, int(sk))
    return np.random.Generator(np.random.Philox(key=[int(seed) & 0xFFFFFFFFFFFFFFFF, key]))


def l2_normalize(x: np.ndarray) -> np.ndarray:
    """x / ||x||; raises NearZeroNorm when ||x|| <= 1e-12."""
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x)
    if n <= EPS_NORM:
        raise NearZeroNorm(f"norm {n!r} <= {EPS_NORM}")
    return x / n


def l2_normalize_rows(X: np.ndarray) -> np.ndarray:
    """Row-wise L2 normalization of an (n, d) matrix."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms <= EPS_NORM):
        bad = int(np.argmax(norms <= EPS_NORM))
        raise NearZeroNorm(f"row {bad} has norm {norms[bad]!r} <= {EPS_NORM}")
    return X / norms[:, None]


def l2_normalize_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of l2_normalize: (I/||x|| - x x^T/||x||^3) @ grad_out.

    The radial component of grad_out is annihilated; the tangential part
    is scaled by 1/||x||.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    n = np.linalg.norm(x)
    if n <= EPS_NORM:
        raise NearZeroNorm(f"norm {n!r} <= {EPS_NORM}")
    xhat = x / n
    return (g - xhat * (xhat @ g)) / n


def l2_normalize_backward_rows(X: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Row-wise version of l2_normalize_backward for (n, d) inputs."""
    X = np.asarray(X, dtype=np.float64)
    G = np.asarray(grad_out, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms <= EPS_NORM):
        raise NearZeroNorm("row with near-zero norm")
    Xhat = X / norms[:, None]
    radial = np.sum(Xhat * G, axis=1, keepdims=True)
    return (G - Xhat * radial) / norms[:, None]


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Inner product of two unit vectors, clamped to [-1, 1].

    The clamp protects downstream argsorts from rounding excursions just
    outside the mathematical range.
    """
    s = float(np.dot(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))
    return min(1.0, max(-1.0, s))


def cosine_sim_matrix(U: np.ndarray, V: np.ndarray) -> np.ndarray:
    """(n, m) matrix of clamped inner products between rows of U and V."""
    S = np.asarray(U, dtype=np.float64) @ np.asarray(V, dtype=np.float64).T
    return np.clip(S, -1.0, 1.0)


def parallel_map(fn, items, threads: int) -> list:
    """Order-preserving map over items.

    The work decomposition is fixed by the caller (items), never by the
    thread count, so a run with threads=8 produces bit-identical results to
    threads=1; only wall time changes.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def finite_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function f at x.

    Independent oracle for analytic gradients; O(2 * x.size) evaluations.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    xf = x.ravel()
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        fp = f(x)
        xf[i] = orig - h
        fm = f(x)
        xf[i] = orig
        flat[i] = (fp - fm) / (2.0 * h)
    return grad
