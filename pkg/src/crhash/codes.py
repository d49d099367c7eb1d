"""Bit-packed binary hash codes and exact Hamming-space kernels.

Codes are stored little-endian within 64-bit words: bit ``k`` of a code is
bit ``k % 64`` of word ``k // 64``.  The ``+1``/``-1`` sign convention maps
``+1`` to bit 1 and ``-1`` to bit 0.  All bits at positions ``>= length`` in
the last word are kept zero so word-wise equality is code equality.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

MAX_CODE_BITS = 4096
WORD_BITS = 64

CODESET_MAGIC = b"CRHB"
CODESET_VERSION = 1


def words_per_code(length: int) -> int:
    return (length + WORD_BITS - 1) // WORD_BITS


def _tail_mask(length: int) -> np.uint64:
    """Mask of valid bit positions in the last word."""
    rem = length % WORD_BITS
    if rem == 0:
        return np.uint64(0xFFFFFFFFFFFFFFFF)
    return np.uint64((1 << rem) - 1)


def _check_length(length: int) -> None:
    if not 1 <= length <= MAX_CODE_BITS:
        raise ValueError(f"code length must be in [1, {MAX_CODE_BITS}], got {length}")


@dataclass(frozen=True, eq=False)
class BitCode:
    """A single ``length``-bit binary code packed into uint64 words."""

    words: np.ndarray
    length: int

    def __post_init__(self):
        _check_length(self.length)
        words = np.ascontiguousarray(self.words, dtype=np.uint64)
        if words.shape != (words_per_code(self.length),):
            raise ValueError(
                f"expected {words_per_code(self.length)} words for {self.length} bits, "
                f"got shape {self.words.shape}"
            )
        if words[-1] & ~_tail_mask(self.length):
            raise ValueError("bits beyond the code length must be zero")
        words.setflags(write=False)
        object.__setattr__(self, "words", words)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitCode):
            return NotImplemented
        return self.length == other.length and bool(np.array_equal(self.words, other.words))

    def __hash__(self) -> int:
        return hash((self.length, self.words.tobytes()))

    def to_bits(self) -> np.ndarray:
        """Unpack to a (length,) uint8 array of 0/1 values."""
        raw = np.unpackbits(self.words.view(np.uint8), bitorder="little")
        return raw[: self.length]

    def to_signs(self) -> np.ndarray:
        """Unpack to a (length,) int8 array of -1/+1 values."""
        return (self.to_bits().astype(np.int8) * 2) - 1


def pack_bits(bits: np.ndarray) -> BitCode:
    """Pack a (length,) array of 0/1 (or bool) values into a BitCode."""
    bits = np.asarray(bits)
    if bits.ndim != 1:
        raise ValueError(f"expected a 1-d bit sequence, got shape {bits.shape}")
    length = int(bits.shape[0])
    _check_length(length)
    padded = np.zeros(words_per_code(length) * WORD_BITS, dtype=np.uint8)
    padded[:length] = bits.astype(np.uint8)
    words = np.packbits(padded, bitorder="little").view("<u8")
    return BitCode(words=words, length=length)


def pack_code(signs) -> BitCode:
    """Pack a sequence of exactly-``+1``/``-1`` values; ``+1`` becomes bit 1.

    Raises:
        ValueError: if any entry is not exactly -1 or +1.
    """
    signs = np.asarray(signs)
    if signs.ndim != 1:
        raise ValueError(f"expected a 1-d sign sequence, got shape {signs.shape}")
    if not np.all((signs == 1) | (signs == -1)):
        raise ValueError("sign entries must be exactly -1 or +1")
    return pack_bits(signs == 1)


def hamming(a: BitCode, b: BitCode) -> int:
    """Number of differing bit positions between two equal-length codes."""
    if a.length != b.length:
        raise ValueError(f"code length mismatch: {a.length} != {b.length}")
    return int(np.bitwise_count(a.words ^ b.words).sum())


def nhd_codes(a: BitCode, b: BitCode) -> float:
    """Normalized Hamming distance between codes, in [0, 2].

    Equals the L1 distance between the codes' -1/+1 sign vectors divided by
    the code length, i.e. ``2 * hamming(a, b) / length``.
    """
    return 2.0 * hamming(a, b) / a.length


@dataclass(frozen=True, eq=False)
class PackedCodeSet:
    """``n`` equal-length codes as an (n, words_per_code) uint64 matrix."""

    words: np.ndarray
    length: int

    def __post_init__(self):
        _check_length(self.length)
        words = np.ascontiguousarray(self.words, dtype=np.uint64)
        if words.ndim != 2 or words.shape[1] != words_per_code(self.length):
            raise ValueError(
                f"expected shape (n, {words_per_code(self.length)}), got {self.words.shape}"
            )
        if words.shape[0] and np.any(words[:, -1] & ~_tail_mask(self.length)):
            raise ValueError("bits beyond the code length must be zero")
        words.setflags(write=False)
        object.__setattr__(self, "words", words)

    @property
    def n(self) -> int:
        return self.words.shape[0]

    def row(self, i: int) -> BitCode:
        return BitCode(words=self.words[i].copy(), length=self.length)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PackedCodeSet):
            return NotImplemented
        return self.length == other.length and bool(np.array_equal(self.words, other.words))

    @staticmethod
    def from_codes(codes) -> "PackedCodeSet":
        codes = list(codes)
        if not codes:
            raise ValueError("cannot build a code set from zero codes")
        length = codes[0].length
        if any(c.length != length for c in codes):
            raise ValueError("all codes in a set must share one length")
        return PackedCodeSet(words=np.stack([c.words for c in codes]), length=length)


def pack_bit_matrix(bits: np.ndarray) -> PackedCodeSet:
    """Pack an (n, length) 0/1 (or bool) matrix into a PackedCodeSet."""
    bits = np.asarray(bits)
    if bits.ndim != 2:
        raise ValueError(f"expected a 2-d bit matrix, got shape {bits.shape}")
    n, length = bits.shape
    _check_length(length)
    padded = np.zeros((n, words_per_code(length) * WORD_BITS), dtype=np.uint8)
    padded[:, :length] = bits.astype(np.uint8)
    words = np.packbits(padded, axis=1, bitorder="little").view("<u8")
    return PackedCodeSet(words=words, length=length)


def pack_sign_matrix(values: np.ndarray) -> PackedCodeSet:
    """Pack an (n, length) real matrix by sign: bit 1 where the entry is >= 0."""
    return pack_bit_matrix(np.asarray(values) >= 0)


def pairwise_hamming(queries: PackedCodeSet, database: PackedCodeSet) -> np.ndarray:
    """Dense (n_queries, n_database) Hamming distance matrix."""
    if queries.length != database.length:
        raise ValueError(f"code length mismatch: {queries.length} != {database.length}")
    x = queries.words[:, None, :] ^ database.words[None, :, :]
    return np.bitwise_count(x).sum(axis=2, dtype=np.int64)


def collision_probability(code_set: PackedCodeSet) -> float:
    """Fraction of unordered pairs that carry identical codes.

    Computed by exact grouping of identical rows, which matches the pairwise
    double sum without enumerating the O(n^2) pairs.
    """
    n = code_set.n
    if n < 2:
        raise ValueError("collision probability is undefined for fewer than two codes")
    _, counts = np.unique(code_set.words, axis=0, return_counts=True)
    counts = counts.astype(np.int64)
    colliding_pairs = int((counts * (counts - 1) // 2).sum())
    total_pairs = n * (n - 1) // 2
    return colliding_pairs / total_pairs


def group_census(code_set: PackedCodeSet) -> tuple[int, int]:
    """(number of distinct codes, size of the largest identical-code group)."""
    _, counts = np.unique(code_set.words, axis=0, return_counts=True)
    return int(counts.size), int(counts.max()) if counts.size else 0


def random_code_set(length: int, n: int, rng: np.random.Generator) -> PackedCodeSet:
    """Sample ``n`` uniform random ``length``-bit codes."""
    _check_length(length)
    w = words_per_code(length)
    words = rng.integers(0, 2**64, size=(n, w), dtype=np.uint64)
    words[:, -1] &= _tail_mask(length)
    return PackedCodeSet(words=words, length=length)


def random_code_stats(length: int, n_pairs: int, seed: int) -> dict:
    """Sampled NHD moments and collision rate for uniform random code pairs.

    For uniform codes the NHD is ``(2/length) * Binomial(length, 1/2)``:
    population mean 1, population std ``1/sqrt(length)``, and exact-collision
    probability ``2**-length`` per pair.
    """
    _check_length(length)
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")
    rng = np.random.default_rng(seed)
    a = random_code_set(length, n_pairs, rng)
    b = random_code_set(length, n_pairs, rng)
    dists = np.bitwise_count(a.words ^ b.words).sum(axis=1, dtype=np.int64)
    nhd = 2.0 * dists / length
    return {
        "mean_nhd": float(nhd.mean()),
        "std_nhd": float(nhd.std(ddof=1)) if n_pairs > 1 else 0.0,
        "collision_rate": float(np.mean(dists == 0)),
    }


def write_code_set(code_set: PackedCodeSet, path) -> None:
    """Write a code set in the CRHB format (magic, version, n, l, LE words)."""
    header = CODESET_MAGIC + struct.pack(
        "<HII", CODESET_VERSION, code_set.n, code_set.length
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(code_set.words.astype("<u8").tobytes())


def read_code_set(path) -> PackedCodeSet:
    """Read a CRHB file back into a PackedCodeSet."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 14 or blob[:4] != CODESET_MAGIC:
        raise FormatError(f"{path}: not a CRHB code-set file")
    version, n, length = struct.unpack("<HII", blob[4:14])
    if version != CODESET_VERSION:
        raise FormatError(f"{path}: unsupported CRHB version {version}")
    _check_length(length)
    w = words_per_code(length)
    expected = 14 + n * w * 8
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    words = np.frombuffer(blob, dtype="<u8", offset=14).reshape(n, w)
    return PackedCodeSet(words=words.astype(np.uint64), length=length)
