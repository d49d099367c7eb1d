"""Training objectives as value-plus-gradient computations.

The main loss is a softmax classification over normalized Hamming distances
between a sample's saturated feature and every row of a learnable memory:
the positive logit is ``s (2 - d_ii)^2 / 4`` (rescaled into [0, s]) and each
negative logit is ``s (1 - d_ij)^2``, so negatives are pushed toward the
random-code distance 1 while the positive is pulled toward 0.  All softmax
forms are evaluated log-sum-exp stabilized in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import (
    grad_tanh_normalize,
    grad_tanh_normalize_rows,
    tanh_normalize,
    tanh_normalize_rows,
)


@dataclass
class LossOutput:
    """Scalar loss with gradients for the sample feature and the memory."""

    value: float
    grad_v: np.ndarray
    grad_bank: np.ndarray


@dataclass
class AttentionLossOutput:
    value: float
    grad_w_att: np.ndarray
    grad_t: np.ndarray


@dataclass
class TotalLoss:
    value: float
    grad_v: np.ndarray
    grad_bank: np.ndarray
    grad_cluster: np.ndarray | None
    grad_w_att: np.ndarray | None


def _logits(d: np.ndarray, pos: int, s: float) -> np.ndarray:
    z = s * (1.0 - d) ** 2
    z[pos] = s * (2.0 - d[pos]) ** 2 / 4.0
    return z


def _softmax_value_and_probs(z: np.ndarray, pos: int) -> tuple[float, np.ndarray]:
    m = z.max()
    e = np.exp(z - m)
    total = e.sum()
    value = float(np.log(total) - (z[pos] - m))
    return value, e / total


def _grad_wrt_distances(d: np.ndarray, pos: int, s: float, p: np.ndarray) -> np.ndarray:
    g = p * 2.0 * s * (d - 1.0)
    g[pos] = (1.0 - p[pos]) * (s / 2.0) * (2.0 - d[pos])
    return g


def _nhd_softmax_loss(v_i, pos: int, rows: np.ndarray, s: float, s1: float) -> LossOutput:
    """Shared core of the instance and pseudo-label losses."""
    v_i = np.asarray(v_i, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[0]
    if not 0 <= pos < n:
        raise ValueError(f"positive index {pos} out of range for {n} rows")
    if s <= 0:
        raise ValueError(f"s must be positive, got {s}")

    vhat = tanh_normalize(v_i, s1)
    rhat = tanh_normalize_rows(rows, s1)
    diff = vhat[None, :] - rhat
    l = v_i.shape[0]
    d = np.abs(diff).sum(axis=1) / l

    z = _logits(d, pos, s)
    value, p = _softmax_value_and_probs(z, pos)
    dl_dd = _grad_wrt_distances(d, pos, s, p)

    sgn = np.sign(diff)
    up_vhat = (dl_dd[:, None] * sgn).sum(axis=0) / l
    up_rhat = -(dl_dd[:, None] * sgn) / l
    return LossOutput(
        value=value,
        grad_v=grad_tanh_normalize(v_i, s1, up_vhat),
        grad_bank=grad_tanh_normalize_rows(rows, s1, up_rhat),
    )


def nhd_loss(v_i, i: int, bank: np.ndarray, s: float, s1: float) -> LossOutput:
    """Instance-discrimination loss in NHD space against the memory bank.

    Row ``i`` of the bank is the sample's positive target; every other row
    is a negative.  Gradients flow to ``v_i`` and to all bank rows.
    """
    return _nhd_softmax_loss(v_i, i, bank, s, s1)


def pseudo_label_loss(
    v_i, cluster_of_i: int, cluster_rows: np.ndarray, s: float, s1: float
) -> LossOutput:
    """Same objective with cluster centers as the memory.

    With a single cluster the loss is identically zero (softmax over one
    class) and so are its gradients.
    """
    return _nhd_softmax_loss(v_i, cluster_of_i, cluster_rows, s, s1)


def nhd_loss_from_distances(d_pos: float, d_negatives, s: float) -> float:
    """Loss value as a function of a fixed distance configuration."""
    d = np.concatenate([[d_pos], np.asarray(d_negatives, dtype=np.float64)])
    z = _logits(d, 0, s)
    value, _ = _softmax_value_and_probs(z, 0)
    return value


def grad_wrt_positive_distance(d_pos: float, d_negatives, s: float) -> float:
    """d(loss)/d(d_ii) holding the negative distances fixed; always >= 0.

    Equals ``(1 - p_pos) * (s/2) * (2 - d_pos)`` where ``p_pos`` is the
    softmax weight of the positive logit, so a descent step can only
    decrease the positive-pair distance.
    """
    d = np.concatenate([[d_pos], np.asarray(d_negatives, dtype=np.float64)])
    z = _logits(d, 0, s)
    _, p = _softmax_value_and_probs(z, 0)
    return float((1.0 - p[0]) * (s / 2.0) * (2.0 - d_pos))


def grad_wrt_negative_distance(d_pos: float, d_negatives, j: int, s: float) -> float:
    """d(loss)/d(d_ij) for negative ``j``; sign equals sign(d_ij - 1).

    Equals ``p_j * 2 s (d_ij - 1)``: a descent step drives every negative
    distance toward the random-code value 1 from either side.
    """
    d_negatives = np.asarray(d_negatives, dtype=np.float64)
    if not 0 <= j < d_negatives.shape[0]:
        raise ValueError(f"negative index {j} out of range")
    d = np.concatenate([[d_pos], d_negatives])
    z = _logits(d, 0, s)
    _, p = _softmax_value_and_probs(z, 0)
    return float(p[j + 1] * 2.0 * s * (d_negatives[j] - 1.0))


def dot_product_loss(v_i, i: int, bank: np.ndarray, s: float) -> LossOutput:
    """Softmax classification over scaled tanh dot products (no normalization).

    Logit ``j`` is ``s * tanh(W_j) . tanh(v_i)`` with raw, un-normalized
    features; this is the baseline objective under which feature norms are
    observed to shrink during training.
    """
    v_i = np.asarray(v_i, dtype=np.float64)
    bank = np.asarray(bank, dtype=np.float64)
    n = bank.shape[0]
    if not 0 <= i < n:
        raise ValueError(f"index {i} out of range for {n} rows")
    if s <= 0:
        raise ValueError(f"s must be positive, got {s}")

    t_v = np.tanh(v_i)
    t_w = np.tanh(bank)
    z = s * (t_w @ t_v)
    value, p = _softmax_value_and_probs(z, i)

    dz = p.copy()
    dz[i] -= 1.0
    grad_v = (1.0 - t_v * t_v) * (s * (t_w * dz[:, None]).sum(axis=0))
    grad_bank = (1.0 - t_w * t_w) * (s * dz[:, None] * t_v[None, :])
    return LossOutput(value=value, grad_v=grad_v, grad_bank=grad_bank)


def attention_loss(t: np.ndarray, w_att: np.ndarray) -> AttentionLossOutput:
    """Summed L1 distance of every position to the prototype.

    The prototype gradient is ``sum_p sign(w - T_p)`` with sign(0) = 0; the
    per-position map gradient is the opposite sign.
    """
    t = np.asarray(t, dtype=np.float64)
    w_att = np.asarray(w_att, dtype=np.float64)
    if t.ndim != 2 or w_att.shape != (t.shape[0],):
        raise ValueError(f"shape mismatch: map {t.shape}, prototype {w_att.shape}")
    diff = t - w_att[:, None]
    sgn = np.sign(diff)
    return AttentionLossOutput(
        value=float(np.abs(diff).sum()),
        grad_w_att=-sgn.sum(axis=1),
        grad_t=sgn,
    )


def total_loss(
    nhd: LossOutput,
    pseudo: LossOutput | None,
    att: AttentionLossOutput | None,
    lambda_pseudo: float,
    lambda_att: float,
) -> TotalLoss:
    """Weighted combination of the loss parts; gradients combine linearly."""
    if lambda_pseudo < 0 or lambda_att < 0:
        raise ValueError("loss weights must be non-negative")
    value = nhd.value
    grad_v = nhd.grad_v.copy()
    grad_cluster = None
    grad_w_att = None
    if pseudo is not None and lambda_pseudo != 0:
        value += lambda_pseudo * pseudo.value
        grad_v += lambda_pseudo * pseudo.grad_v
        grad_cluster = lambda_pseudo * pseudo.grad_bank
    if att is not None and lambda_att != 0:
        value += lambda_att * att.value
        grad_w_att = lambda_att * att.grad_w_att
    return TotalLoss(
        value=value,
        grad_v=grad_v,
        grad_bank=nhd.grad_bank,
        grad_cluster=grad_cluster,
        grad_w_att=grad_w_att,
    )
