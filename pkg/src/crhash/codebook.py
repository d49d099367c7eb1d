"""Per-bit two-centroid codebooks: distance-difference features, a
Student-t / KL clustering loss, and cluster-assignment encoding.

Every bit k owns a pair of centroids (mu0, mu1) living in the fused feature
space.  The continuous surrogate for bit k is the distance difference
``delta0 - delta1`` (positive means closer to mu1); the hard bit is the
identity of the nearer centroid, with ties falling to 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codes import BitCode, PackedCodeSet, pack_bit_matrix, pack_bits

CENTROID_SEP_EPS = 1e-6


@dataclass
class CodebookSet:
    """(bits, 2, dim) centroid tensor; pairs must stay separated."""

    centroids: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 3 or c.shape[1] != 2:
            raise ValueError(f"centroids must have shape (bits, 2, dim), got {c.shape}")
        self.centroids = c

    @property
    def bits(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[2]


def init_codebooks(
    z_all: np.ndarray, bits: int, rng: np.random.Generator,
    jitter: float = 1e-2, sep_eps: float = CENTROID_SEP_EPS,
) -> CodebookSet:
    """Anchor each pair at two distinct random samples' fused vectors plus
    Gaussian jitter, re-drawing until every pair is separated."""
    z_all = np.asarray(z_all, dtype=np.float64)
    n, dim = z_all.shape
    centroids = np.empty((bits, 2, dim))
    for k in range(bits):
        while True:
            picks = rng.choice(n, size=2, replace=(n < 2))
            pair = z_all[picks] + rng.normal(size=(2, dim)) * jitter
            if np.linalg.norm(pair[0] - pair[1]) >= sep_eps:
                centroids[k] = pair
                break
    return CodebookSet(centroids=centroids)


def _distances(z: np.ndarray, cb: CodebookSet) -> np.ndarray:
    """(B, bits, 2) Euclidean distances from each sample to each centroid."""
    diff = z[:, None, None, :] - cb.centroids[None, :, :, :]
    return np.sqrt((diff * diff).sum(axis=3))


def deltas_batch(z: np.ndarray, cb: CodebookSet) -> np.ndarray:
    """Distance differences ``delta0 - delta1`` for a (B, dim) batch."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != cb.dim:
        raise ValueError(f"expected (B, {cb.dim}) vectors, got shape {z.shape}")
    d = _distances(z, cb)
    return d[:, :, 0] - d[:, :, 1]


def deltas(z: np.ndarray, cb: CodebookSet) -> np.ndarray:
    """Distance differences for a single fused vector; positive means the
    sample sits closer to centroid 1."""
    return deltas_batch(np.asarray(z, dtype=np.float64)[None], cb)[0]


def deltas_backward(
    z: np.ndarray, cb: CodebookSet, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pull an upstream (B, bits) gradient back to (z, centroids).

    The gradient of an L2 norm at zero is taken as 0, so a sample sitting
    exactly on a centroid contributes nothing through that distance.
    """
    z = np.asarray(z, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    diff = z[:, None, None, :] - cb.centroids[None, :, :, :]
    d = np.sqrt((diff * diff).sum(axis=3))
    unit = np.divide(diff, d[..., None], out=np.zeros_like(diff), where=d[..., None] > 0)
    # d(delta_k)/dz = unit0 - unit1; d/dmu0 = -unit0; d/dmu1 = +unit1
    grad_z = np.einsum("bk,bkd->bd", upstream, unit[:, :, 0, :] - unit[:, :, 1, :])
    grad_c = np.empty_like(cb.centroids)
    grad_c[:, 0, :] = -np.einsum("bk,bkd->kd", upstream, unit[:, :, 0, :])
    grad_c[:, 1, :] = np.einsum("bk,bkd->kd", upstream, unit[:, :, 1, :])
    return grad_z, grad_c


def codebook_encode(z: np.ndarray, cb: CodebookSet) -> BitCode:
    """Bit k is 1 iff the sample is strictly closer to centroid 1."""
    return pack_bits(deltas(z, cb) > 0)


def codebook_encode_batch(z: np.ndarray, cb: CodebookSet) -> PackedCodeSet:
    return pack_bit_matrix(deltas_batch(z, cb) > 0)


def dec_loss(z: np.ndarray, cb: CodebookSet) -> tuple[float, np.ndarray, np.ndarray]:
    """Student-t soft-assignment KL loss averaged over the codebooks.

    Per codebook, soft assignments ``q`` use the t-kernel with one degree
    of freedom; the sharpened target ``p ~ q^2 / mass`` is treated as a
    constant for gradients.  Returns (value, grad_centroids, grad_z).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != cb.dim:
        raise ValueError(f"expected (B, {cb.dim}) vectors, got shape {z.shape}")
    m = cb.bits
    diff = z[:, None, None, :] - cb.centroids[None, :, :, :]   # (B, m, 2, dim)
    d2 = (diff * diff).sum(axis=3)                             # (B, m, 2)
    w = 1.0 / (1.0 + d2)
    q = w / w.sum(axis=2, keepdims=True)
    f = q.sum(axis=0, keepdims=True)                           # per-centroid mass
    pt = q * q / f
    p = pt / pt.sum(axis=2, keepdims=True)
    value = float((p * np.log(p / q)).sum() / m)

    # With p constant: dL/dq = -(1/m) p/q, pulled through q = w / sum(w)
    dl_dq = -(p / q) / m
    s = w.sum(axis=2, keepdims=True)
    dl_dw = (dl_dq - (dl_dq * q).sum(axis=2, keepdims=True)) / s
    dl_dd2 = dl_dw * (-w * w)                                  # dw/dd2 = -w^2
    grad_z = 2.0 * np.einsum("bkc,bkcd->bd", dl_dd2, diff)
    grad_c = -2.0 * np.einsum("bkc,bkcd->kcd", dl_dd2, diff)
    return value, grad_c, grad_z


def train_codebook_variant(dataset, cfg):
    """Run the shared training loop with the codebook read-out."""
    from . import training

    if cfg.variant != "codebook":
        raise ValueError(f"expected variant 'codebook', got {cfg.variant!r}")
    return training.train(dataset, cfg)
