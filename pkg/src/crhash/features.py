"""Continuous pre-hash feature geometry.

Real feature vectors are float64 numpy arrays of length ``l``.  The
saturating map ``tanh(s1 * v / ||v||_2)`` sends them into ``(-1, 1)^l``
where the normalized Hamming distance (L1 / l) is the training metric.
Sign quantization turns either representation into a BitCode.
"""

from __future__ import annotations

import numpy as np

from .codes import BitCode, pack_bits
from .errors import DegenerateInputError

NORM_EPS = 1e-12


def _as_vector(v, name: str = "vector") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-d, got shape {v.shape}")
    return v


def tanh_normalize(v, s1: float) -> np.ndarray:
    """Componentwise ``tanh(s1 * v / ||v||_2)``; preserves the sign pattern.

    Raises:
        DegenerateInputError: if ``||v||_2`` is at or below the safe floor,
            which would make the normalized direction meaningless.
    """
    v = _as_vector(v)
    if s1 <= 0:
        raise ValueError(f"s1 must be positive, got {s1}")
    norm = float(np.linalg.norm(v))
    if norm <= NORM_EPS:
        raise DegenerateInputError(f"vector norm {norm:.3e} is degenerate (<= {NORM_EPS})")
    return np.tanh(s1 * v / norm)


def tanh_normalize_rows(m: np.ndarray, s1: float) -> np.ndarray:
    """Row-wise tanh_normalize of an (n, l) matrix.

    Raises DegenerateInputError naming the first offending row index.
    """
    m = np.asarray(m, dtype=np.float64)
    if s1 <= 0:
        raise ValueError(f"s1 must be positive, got {s1}")
    norms = np.linalg.norm(m, axis=1)
    bad = np.flatnonzero(norms <= NORM_EPS)
    if bad.size:
        raise DegenerateInputError(
            f"row {int(bad[0])} has degenerate norm {norms[bad[0]]:.3e} (<= {NORM_EPS})"
        )
    return np.tanh(s1 * m / norms[:, None])


def nhd_real(vhat, what) -> float:
    """Normalized Hamming distance between saturated vectors: ``||a - b||_1 / l``."""
    vhat = _as_vector(vhat, "vhat")
    what = _as_vector(what, "what")
    if vhat.shape != what.shape:
        raise ValueError(f"length mismatch: {vhat.shape[0]} != {what.shape[0]}")
    return float(np.abs(vhat - what).sum() / vhat.shape[0])


def sign_quantize(v) -> BitCode:
    """Quantize by sign: bit k is 1 iff ``v[k] >= 0`` (zero maps to +1)."""
    v = _as_vector(v)
    return pack_bits(v >= 0)


def grad_tanh_normalize(v, s1: float, upstream) -> np.ndarray:
    """Vector-Jacobian product of tanh_normalize at ``v``.

    With ``y = tanh(s1 * v / r)`` and ``r = ||v||_2`` the Jacobian is
    ``diag(1 - y^2) . s1 (I/r - v v^T / r^3)``, so the pullback of
    ``upstream`` is ``(s1/r) * (t - v (v . t) / r^2)`` where
    ``t = (1 - y^2) * upstream``.
    """
    v = _as_vector(v)
    upstream = _as_vector(upstream, "upstream")
    if upstream.shape != v.shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match {v.shape}")
    y = tanh_normalize(v, s1)
    r = float(np.linalg.norm(v))
    t = (1.0 - y * y) * upstream
    return (s1 / r) * (t - v * (v @ t) / (r * r))


def grad_tanh_normalize_rows(m: np.ndarray, s1: float, upstream: np.ndarray) -> np.ndarray:
    """Row-wise vector-Jacobian products for an (n, l) matrix."""
    m = np.asarray(m, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != m.shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match {m.shape}")
    y = tanh_normalize_rows(m, s1)
    r = np.linalg.norm(m, axis=1, keepdims=True)
    t = (1.0 - y * y) * upstream
    return (s1 / r) * (t - m * ((m * t).sum(axis=1, keepdims=True) / (r * r)))
