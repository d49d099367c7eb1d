"""Seeded hierarchical synthetic data with local rare-patch structure.

Each coarse class holds several fine sub-clusters; every sample is a
(C, P) local feature map whose positions are the fine center plus noise,
except one designated position per fine cluster that carries an extra
offset in a cluster-specific direction.  The discriminative cue is thus
local and rare, which is what attention pooling is meant to pick up.

Features are rounded through float32 so an in-memory dataset and its
CRHF file round-trip are bit-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

DATASET_MAGIC = b"CRHF"
DATASET_VERSION = 1


@dataclass(frozen=True)
class SynthSpec:
    n_coarse: int = 8
    fines_per_coarse: int = 4
    samples_per_fine: int = 32
    channels: int = 16
    positions: int = 9
    coarse_spread: float = 10.0
    fine_spread: float = 2.0
    noise_sigma: float = 0.5
    rare_patch_strength: float = 4.0
    seed: int = 7

    def __post_init__(self):
        counts = (self.n_coarse, self.fines_per_coarse, self.samples_per_fine,
                  self.channels, self.positions)
        if any(c < 1 for c in counts):
            raise ValueError(f"all counts must be >= 1, got {counts}")
        if self.coarse_spread <= 0 or self.fine_spread <= 0 or self.noise_sigma <= 0:
            raise ValueError("spreads and noise sigma must be positive")
        if self.fine_spread >= self.coarse_spread:
            raise ValueError(
                f"fine_spread ({self.fine_spread}) must be below "
                f"coarse_spread ({self.coarse_spread})"
            )

    @property
    def n(self) -> int:
        return self.n_coarse * self.fines_per_coarse * self.samples_per_fine


#: Fixed configuration used by the acceptance suite: N=1024 samples in
#: 8 coarse classes x 4 fine clusters, close fine structure inside far
#: coarse structure.
STANDARD_BENCHMARK = SynthSpec()


@dataclass
class SynthDataset:
    features: np.ndarray      # (N, C, P) float64
    fine_labels: np.ndarray   # (N,) uint32
    coarse_labels: np.ndarray  # (N,) uint32

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def positions(self) -> int:
        return self.features.shape[2]

    def sample(self, i: int) -> np.ndarray:
        return self.features[i]


def generate(spec: SynthSpec) -> SynthDataset:
    """Deterministically generate a dataset from its spec."""
    rng = np.random.default_rng(spec.seed)
    nc, nf, ns = spec.n_coarse, spec.fines_per_coarse, spec.samples_per_fine
    c, p = spec.channels, spec.positions

    coarse_centers = rng.normal(size=(nc, c)) * spec.coarse_spread
    fine_centers = coarse_centers[:, None, :] + rng.normal(size=(nc, nf, c)) * spec.fine_spread
    rare_pos = rng.integers(0, p, size=(nc, nf))
    rare_dir = rng.normal(size=(nc, nf, c))
    norms = np.linalg.norm(rare_dir, axis=2, keepdims=True)
    norms[norms < 1e-9] = 1.0
    rare_dir /= norms

    n = spec.n
    features = np.empty((n, c, p))
    fine_labels = np.empty(n, dtype=np.uint32)
    coarse_labels = np.empty(n, dtype=np.uint32)
    i = 0
    for ci in range(nc):
        for fi in range(nf):
            base = fine_centers[ci, fi][:, None]
            offset = spec.rare_patch_strength * rare_dir[ci, fi]
            for _ in range(ns):
                x = base + rng.normal(size=(c, p)) * spec.noise_sigma
                x[:, rare_pos[ci, fi]] += offset
                features[i] = x
                fine_labels[i] = ci * nf + fi
                coarse_labels[i] = ci
                i += 1
    features = features.astype(np.float32).astype(np.float64)
    return SynthDataset(features=features, fine_labels=fine_labels, coarse_labels=coarse_labels)


def augment(sample: np.ndarray, sigma_aug: float, seed: int) -> np.ndarray:
    """Additive seeded Gaussian noise; ``sigma_aug = 0`` is the identity."""
    if sigma_aug < 0:
        raise ValueError(f"sigma_aug must be >= 0, got {sigma_aug}")
    sample = np.asarray(sample, dtype=np.float64)
    if sigma_aug == 0:
        return sample.copy()
    rng = np.random.default_rng(seed)
    return sample + rng.normal(size=sample.shape) * sigma_aug


def write_dataset(ds: SynthDataset, path) -> None:
    """Write in the CRHF format: header, float32 features (sample, position,
    channel order), then fine and coarse labels when present."""
    n, c, p = ds.features.shape
    has_labels = 1
    header = DATASET_MAGIC + struct.pack("<HIIII", DATASET_VERSION, n, p, c, has_labels)
    body = ds.features.transpose(0, 2, 1).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)
        fh.write(ds.fine_labels.astype("<u4").tobytes())
        fh.write(ds.coarse_labels.astype("<u4").tobytes())


def read_dataset(path) -> SynthDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 22 or blob[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a CRHF dataset file")
    version, n, p, c, has_labels = struct.unpack("<HIIII", blob[4:22])
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported CRHF version {version}")
    feat_bytes = n * p * c * 4
    expected = 22 + feat_bytes + (2 * n * 4 if has_labels else 0)
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    feats = np.frombuffer(blob, dtype="<f4", count=n * p * c, offset=22)
    features = feats.reshape(n, p, c).transpose(0, 2, 1).astype(np.float64)
    if has_labels:
        off = 22 + feat_bytes
        fine = np.frombuffer(blob, dtype="<u4", count=n, offset=off).astype(np.uint32)
        coarse = np.frombuffer(blob, dtype="<u4", count=n, offset=off + 4 * n).astype(np.uint32)
    else:
        fine = np.zeros(n, dtype=np.uint32)
        coarse = np.zeros(n, dtype=np.uint32)
    return SynthDataset(features=features, fine_labels=fine, coarse_labels=coarse)
