"""Exact Hamming-space retrieval, mean average precision, and code
distribution diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codes import PackedCodeSet, collision_probability, group_census, pairwise_hamming


@dataclass
class RetrievalResult:
    """Per-query ranked database indices with their Hamming distances.

    Distances are non-decreasing along each row; ties are broken by
    ascending database index (stable sort), so rankings are deterministic.
    """

    indices: np.ndarray   # (n_queries, k) int64
    distances: np.ndarray  # (n_queries, k) int64


def rank_by_hamming(
    queries: PackedCodeSet, database: PackedCodeSet, top_k: int | None = None
) -> RetrievalResult:
    """Exact linear-scan ranking of the database for every query."""
    d = pairwise_hamming(queries, database)
    order = np.argsort(d, axis=1, kind="stable")
    if top_k is not None:
        if top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {top_k}")
        order = order[:, :top_k]
    return RetrievalResult(indices=order, distances=np.take_along_axis(d, order, axis=1))


def average_precision(relevant: np.ndarray) -> float:
    """AP of one ranked 0/1 relevance list over its own horizon.

    ``sum_k Prec@k * rel(k) / R`` with ``R`` the number of relevant items in
    the list; returns NaN when the list holds no relevant item.
    """
    relevant = np.asarray(relevant, dtype=np.float64)
    r = relevant.sum()
    if r == 0:
        return float("nan")
    k = np.arange(1, relevant.shape[0] + 1)
    precision_at_k = np.cumsum(relevant) / k
    return float((precision_at_k * relevant).sum() / r)


def mean_ap(
    result: RetrievalResult,
    query_labels: np.ndarray,
    db_labels: np.ndarray,
    top_k: int | None = None,
) -> float:
    """Mean AP over queries with at least one relevant item in the horizon.

    Relevance is label equality.  Raises ValueError when no query has any
    relevant item (the mean would be undefined).
    """
    query_labels = np.asarray(query_labels)
    db_labels = np.asarray(db_labels)
    indices = result.indices if top_k is None else result.indices[:, :top_k]
    if query_labels.shape[0] != indices.shape[0]:
        raise ValueError(
            f"{query_labels.shape[0]} query labels for {indices.shape[0]} rankings"
        )
    rel = db_labels[indices] == query_labels[:, None]
    r = rel.sum(axis=1)
    keep = r > 0
    if not keep.any():
        raise ValueError("mean AP undefined: no query has a relevant item")
    k = np.arange(1, indices.shape[1] + 1)
    precision_at_k = np.cumsum(rel, axis=1) / k
    ap = (precision_at_k * rel).sum(axis=1)[keep] / r[keep]
    return float(ap.mean())


def self_retrieval_map(
    codes: PackedCodeSet, labels: np.ndarray, top_k: int | None = None
) -> float:
    """mAP of each code querying all the others (self pairs excluded)."""
    result = rank_by_hamming(codes, codes)
    n = codes.n
    mask = result.indices != np.arange(n)[:, None]
    indices = result.indices[mask].reshape(n, n - 1)
    distances = result.distances[mask].reshape(n, n - 1)
    return mean_ap(
        RetrievalResult(indices=indices, distances=distances), labels, labels, top_k
    )


def collision_report(codes: PackedCodeSet) -> dict:
    """Collision probability with group census and the random-hash ideal."""
    p = collision_probability(codes)
    n_groups, largest = group_census(codes)
    return {
        "p_collision": p,
        "n_groups": n_groups,
        "largest_group": largest,
        "ideal": 2.0 ** (-codes.length),
    }


def nhd_histogram(
    codes: PackedCodeSet, n_pairs_sampled: int, seed: int, n_bins: int = 40
) -> dict:
    """Binned distribution of pairwise code NHDs over [0, 2], with moments.

    Enumerates all pairs when there are at most ``n_pairs_sampled`` of them,
    otherwise samples that many distinct-index pairs.
    """
    n = codes.n
    if n < 2:
        raise ValueError("need at least two codes")
    if n_pairs_sampled < 1:
        raise ValueError(f"n_pairs_sampled must be >= 1, got {n_pairs_sampled}")
    total_pairs = n * (n - 1) // 2
    if total_pairs <= n_pairs_sampled:
        iu, ju = np.triu_indices(n, k=1)
    else:
        rng = np.random.default_rng(seed)
        iu = rng.integers(0, n, size=n_pairs_sampled)
        ju = rng.integers(0, n - 1, size=n_pairs_sampled)
        ju[ju >= iu] += 1  # skip the diagonal without rejection
    dists = np.bitwise_count(codes.words[iu] ^ codes.words[ju]).sum(axis=1, dtype=np.int64)
    nhd = 2.0 * dists / codes.length
    counts, edges = np.histogram(nhd, bins=n_bins, range=(0.0, 2.0))
    return {
        "bin_edges": edges,
        "counts": counts,
        "mean": float(nhd.mean()),
        "std": float(nhd.std(ddof=1)) if nhd.size > 1 else 0.0,
        "n_pairs": int(nhd.size),
        "enumerated": bool(total_pairs <= n_pairs_sampled),
    }
