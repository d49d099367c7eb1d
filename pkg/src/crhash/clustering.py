"""Affinity-propagation pseudo-labeling over saturated features.

Exemplar-based clustering via damped responsibility/availability message
passing; the preference on the similarity diagonal controls how many
clusters emerge, so no cluster count is preset.  Updates are computed
Jacobi-style from the previous iteration's full matrices, which keeps runs
bit-for-bit deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoExemplarsError


@dataclass(frozen=True)
class APConfig:
    damping: float = 0.7
    max_iter: int = 200
    convergence_window: int = 15
    preference: float | str = "median"

    def __post_init__(self):
        if not 0.5 <= self.damping < 1.0:
            raise ValueError(f"damping must be in [0.5, 1), got {self.damping}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.convergence_window < 1:
            raise ValueError(f"convergence_window must be >= 1, got {self.convergence_window}")
        if isinstance(self.preference, str) and self.preference != "median":
            raise ValueError(f"preference must be a number or 'median', got {self.preference!r}")


@dataclass(frozen=True)
class Clustering:
    """Exemplar indices plus a sample -> exemplar-slot assignment."""

    exemplars: np.ndarray
    assignment: np.ndarray

    @property
    def n_c(self) -> int:
        return int(self.exemplars.shape[0])


@dataclass
class ClusterMemory:
    """Learnable per-cluster feature rows plus the sample assignment."""

    rows: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    assignment: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint32))

    @property
    def n_c(self) -> int:
        return int(self.rows.shape[0])


def build_similarity(features: np.ndarray, preference: float | str = "median") -> np.ndarray:
    """Negative squared L2 distances with the preference on the diagonal.

    The matrix is exactly symmetric; the default preference is the median of
    the off-diagonal similarities.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need an (N>=2, l) feature matrix, got shape {x.shape}")
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    d2 = (d2 + d2.T) / 2.0
    s = -d2
    n = x.shape[0]
    if preference == "median":
        off = s[~np.eye(n, dtype=bool)]
        preference = float(np.median(off))
    s[np.diag_indices(n)] = float(preference)
    return s


def affinity_propagation(s: np.ndarray, cfg: APConfig = APConfig()) -> Clustering:
    """Run damped message passing until the exemplar set is stable.

    Raises:
        ValueError: if the similarity matrix is not square/finite/symmetric.
        NoExemplarsError: if the iteration budget ends with no exemplars
            (the caller may lower the preference and retry).
    """
    s = np.asarray(s, dtype=np.float64)
    n = s.shape[0] if s.ndim == 2 else 0
    if s.ndim != 2 or s.shape != (n, n) or n < 2:
        raise ValueError(f"similarity must be a square (N>=2) matrix, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("similarity matrix must be finite")
    if not np.array_equal(s, s.T):
        raise ValueError("similarity matrix must be symmetric")

    # deterministic analogue of the published degeneracy-breaking noise:
    # an invisible preference ladder so exact ties resolve to the lowest index
    s = s.copy()
    rows = np.arange(n)
    ladder = 1e-9 * max(1.0, float(np.abs(s).max()))
    s[rows, rows] -= ladder * rows / max(1, n - 1)

    lam = cfg.damping
    r = np.zeros((n, n))
    a = np.zeros((n, n))
    prev_indicator = None
    stable = 0

    for _ in range(cfg.max_iter):
        # r(i,k) <- s(i,k) - max_{k' != k} (a(i,k') + s(i,k'))
        as_ = a + s
        top = as_.argmax(axis=1)
        first = as_[rows, top]
        as_[rows, top] = -np.inf
        second = as_.max(axis=1)
        r_new = s - first[:, None]
        r_new[rows, top] = s[rows, top] - second
        r = lam * r + (1.0 - lam) * r_new

        # a(i,k) <- min(0, r(k,k) + sum_{i' not in {i,k}} max(0, r(i',k)))
        # a(k,k) <- sum_{i' != k} max(0, r(i',k))
        rp = np.maximum(r, 0.0)
        rp[rows, rows] = 0.0
        colsum = rp.sum(axis=0)
        a_new = np.minimum(0.0, r[rows, rows][None, :] + colsum[None, :] - rp)
        a_new[rows, rows] = colsum
        a = lam * a + (1.0 - lam) * a_new

        indicator = (r[rows, rows] + a[rows, rows]) > 0
        if prev_indicator is not None and np.array_equal(indicator, prev_indicator):
            stable += 1
            if stable >= cfg.convergence_window and indicator.any():
                break
        else:
            stable = 0
        prev_indicator = indicator

    exemplars = np.flatnonzero((r[rows, rows] + a[rows, rows]) > 0)
    if exemplars.size == 0:
        raise NoExemplarsError("no exemplars")
    assignment = s[:, exemplars].argmax(axis=1)
    assignment[exemplars] = np.arange(exemplars.size)
    return Clustering(exemplars=exemplars, assignment=assignment.astype(np.uint32))


def cluster_features(features: np.ndarray, cfg: APConfig = APConfig()) -> Clustering:
    """Build the similarity matrix from features and run affinity propagation."""
    return affinity_propagation(build_similarity(features, cfg.preference), cfg)


def refresh_cluster_memory(clustering: Clustering, raw_features: np.ndarray) -> ClusterMemory:
    """New cluster memory with each row set to its members' mean raw feature."""
    x = np.asarray(raw_features, dtype=np.float64)
    if x.shape[0] != clustering.assignment.shape[0]:
        raise ValueError(
            f"{x.shape[0]} features but {clustering.assignment.shape[0]} assignments"
        )
    n_c = clustering.n_c
    rows = np.zeros((n_c, x.shape[1]))
    np.add.at(rows, clustering.assignment.astype(np.intp), x)
    counts = np.bincount(clustering.assignment.astype(np.intp), minlength=n_c)
    rows /= counts[:, None]
    return ClusterMemory(rows=rows, assignment=clustering.assignment.copy())
