"""The desk-scale encoder: CSA pooling fused with the global mean, then a
linear head producing the continuous pre-hash vector.

The forward graph per sample (local feature map T of shape (C, P)) is

    g = mean_p T_p
    alpha = softmax(||T_p - w_att||_1)      (uniform when CSA is disabled)
    a = sum_p alpha_p T_p
    z = [g; a]
    v = w_fc z + b

Batched variants operate on (B, C, P) stacks; the single-sample entry
points wrap them.  Backward is exact reverse-mode through the fixed graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class EncoderParams:
    w_fc: np.ndarray  # (l, 2C)
    b: np.ndarray     # (l,)
    w_att: np.ndarray  # (C,)

    @property
    def bits(self) -> int:
        return self.w_fc.shape[0]

    @property
    def channels(self) -> int:
        return self.w_att.shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.w_fc.copy(), self.b.copy(), self.w_att.copy())


@dataclass
class EncoderGrads:
    w_fc: np.ndarray
    b: np.ndarray
    w_att: np.ndarray
    t: np.ndarray | None = None


@dataclass
class ForwardCache:
    """All intermediates of the forward graph, kept for the backward pass."""

    v: np.ndarray
    alpha: np.ndarray
    attended: np.ndarray
    global_feat: np.ndarray
    fused: np.ndarray


def init_params(
    bits: int, channels: int, rng: np.random.Generator, feature_scale: float = 1.0
) -> EncoderParams:
    """Seeded Gaussian init; zero bias.

    The head weights get std ``1 / (sqrt(2C) * feature_scale)`` so that with
    fused-feature entries of RMS ``feature_scale`` the head output lands in
    the saturating nonlinearity's sensitive range instead of deep in its
    tails; the prototype stays at std ``1/sqrt(2C)`` in feature space.
    """
    if feature_scale <= 0:
        raise ValueError(f"feature_scale must be positive, got {feature_scale}")
    scale = 1.0 / np.sqrt(2.0 * channels)
    return EncoderParams(
        w_fc=rng.normal(size=(bits, 2 * channels)) * (scale / feature_scale),
        b=np.zeros(bits),
        w_att=rng.normal(size=channels) * scale,
    )


def forward_batch(t: np.ndarray, params: EncoderParams, use_csa: bool = True) -> ForwardCache:
    """Forward pass over a (B, C, P) stack of local feature maps."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3 or t.shape[1] != params.channels:
        raise ValueError(
            f"expected (B, {params.channels}, P) feature maps, got shape {t.shape}"
        )
    b_sz, _, p = t.shape
    g = t.mean(axis=2)
    if use_csa:
        scores = np.abs(t - params.w_att[None, :, None]).sum(axis=1)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        alpha = e / e.sum(axis=1, keepdims=True)
    else:
        alpha = np.full((b_sz, p), 1.0 / p)
    attended = np.einsum("bcp,bp->bc", t, alpha)
    fused = np.concatenate([g, attended], axis=1)
    v = fused @ params.w_fc.T + params.b
    return ForwardCache(v=v, alpha=alpha, attended=attended, global_feat=g, fused=fused)


def backward_batch(
    t: np.ndarray,
    params: EncoderParams,
    cache: ForwardCache,
    grad_v: np.ndarray | None = None,
    grad_fused: np.ndarray | None = None,
    grad_w_att_extra: np.ndarray | None = None,
    use_csa: bool = True,
    want_grad_t: bool = False,
) -> EncoderGrads:
    """Reverse-mode gradients for (w_fc, b, w_att), summed over the batch.

    Upstream can enter at the head output (``grad_v``), directly at the
    fused vector (``grad_fused``, used when a different read-out replaces
    the linear head), or both.  ``grad_w_att_extra`` is added on top of the
    attention-path gradient for loss terms that touch the prototype
    directly.  ``want_grad_t`` also returns the per-sample gradient of the
    input feature maps.
    """
    t = np.asarray(t, dtype=np.float64)
    if grad_v is None and grad_fused is None:
        raise ValueError("need grad_v and/or grad_fused")
    b_sz, c, p = t.shape

    if grad_v is not None:
        grad_v = np.asarray(grad_v, dtype=np.float64)
        if grad_v.shape != cache.v.shape:
            raise ValueError(f"grad_v shape {grad_v.shape} does not match v {cache.v.shape}")
        grad_b = grad_v.sum(axis=0)
        grad_w_fc = grad_v.T @ cache.fused
        dz = grad_v @ params.w_fc
    else:
        grad_b = np.zeros_like(params.b)
        grad_w_fc = np.zeros_like(params.w_fc)
        dz = np.zeros((b_sz, 2 * c))
    if grad_fused is not None:
        dz = dz + np.asarray(grad_fused, dtype=np.float64)
    dg = dz[:, :c]
    da = dz[:, c:]

    grad_t = None
    if want_grad_t:
        grad_t = np.broadcast_to(dg[:, :, None] / p, t.shape).copy()
        grad_t += da[:, :, None] * cache.alpha[:, None, :]
    if use_csa:
        dalpha = np.einsum("bcp,bc->bp", t, da)
        inner = (cache.alpha * dalpha).sum(axis=1, keepdims=True)
        dscores = cache.alpha * (dalpha - inner)
        sgn = np.sign(t - params.w_att[None, :, None])
        grad_w_att = -np.einsum("bcp,bp->c", sgn, dscores)
        if want_grad_t:
            grad_t += sgn * dscores[:, None, :]
    else:
        grad_w_att = np.zeros(c)
    if grad_w_att_extra is not None:
        grad_w_att = grad_w_att + grad_w_att_extra
    return EncoderGrads(w_fc=grad_w_fc, b=grad_b, w_att=grad_w_att, t=grad_t)


def forward(t: np.ndarray, params: EncoderParams, use_csa: bool = True) -> ForwardCache:
    """Single-sample forward; fields come back squeezed to 1-d."""
    cache = forward_batch(np.asarray(t, dtype=np.float64)[None], params, use_csa)
    return ForwardCache(
        v=cache.v[0],
        alpha=cache.alpha[0],
        attended=cache.attended[0],
        global_feat=cache.global_feat[0],
        fused=cache.fused[0],
    )


def backward(
    t: np.ndarray,
    params: EncoderParams,
    cache: ForwardCache,
    grad_v: np.ndarray,
    grad_w_att_extra: np.ndarray | None = None,
    use_csa: bool = True,
    want_grad_t: bool = False,
) -> EncoderGrads:
    """Single-sample backward over a cache produced by ``forward``."""
    batch_cache = ForwardCache(
        v=cache.v[None],
        alpha=cache.alpha[None],
        attended=cache.attended[None],
        global_feat=cache.global_feat[None],
        fused=cache.fused[None],
    )
    grads = backward_batch(
        np.asarray(t, dtype=np.float64)[None],
        params,
        batch_cache,
        np.asarray(grad_v, dtype=np.float64)[None],
        grad_w_att_extra=grad_w_att_extra,
        use_csa=use_csa,
        want_grad_t=want_grad_t,
    )
    if grads.t is not None:
        grads.t = grads.t[0]
    return grads
