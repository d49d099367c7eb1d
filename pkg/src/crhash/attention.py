"""Collision-sensitive attention over local feature maps.

A local feature map is a (C, P) float64 matrix: P spatial positions, each a
C-dim feature.  Positions far (in L1) from a learnable prototype of common
patterns are "rare" and receive higher softmax attention weight.
"""

from __future__ import annotations

import numpy as np


def _check_map(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 2:
        raise ValueError(f"feature map must be (C, P), got shape {t.shape}")
    return t


def rarity(t: np.ndarray, w_att: np.ndarray) -> np.ndarray:
    """Per-position L1 distance to the prototype: ``r_p = ||T_p - w||_1``."""
    t = _check_map(t)
    w_att = np.asarray(w_att, dtype=np.float64)
    if w_att.shape != (t.shape[0],):
        raise ValueError(f"prototype shape {w_att.shape} does not match C={t.shape[0]}")
    return np.abs(t - w_att[:, None]).sum(axis=0)


def attention_map(scores: np.ndarray) -> np.ndarray:
    """Max-shifted softmax over rarity scores; sums to 1, order-preserving."""
    scores = np.asarray(scores, dtype=np.float64)
    e = np.exp(scores - scores.max())
    return e / e.sum()


def attended_pool(t: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Attention-weighted sum of positions: ``a = sum_p alpha_p T_p``."""
    t = _check_map(t)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (t.shape[1],):
        raise ValueError(f"alpha shape {alpha.shape} does not match P={t.shape[1]}")
    return t @ alpha


def fuse(global_feat: np.ndarray, attended: np.ndarray) -> np.ndarray:
    """Concatenate the global feature with the attended feature."""
    global_feat = np.asarray(global_feat, dtype=np.float64)
    attended = np.asarray(attended, dtype=np.float64)
    if global_feat.shape != attended.shape:
        raise ValueError(f"shape mismatch: {global_feat.shape} vs {attended.shape}")
    return np.concatenate([global_feat, attended])
