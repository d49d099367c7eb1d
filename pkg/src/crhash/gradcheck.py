"""Central-finite-difference verification of every analytic gradient.

Each check draws seeded random instances, re-drawing any instance that
lands within a margin of an L1 kink (absolute-value terms have no defined
two-sided derivative there), evaluates the loss along each coordinate at
``+-h``, and compares against the analytic gradient with a per-coordinate
relative error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .codebook import CodebookSet, dec_loss, deltas_backward, deltas_batch
from .encoder import EncoderParams, backward, forward
from .features import grad_tanh_normalize, tanh_normalize, tanh_normalize_rows
from .losses import (
    attention_loss,
    dot_product_loss,
    grad_wrt_negative_distance,
    grad_wrt_positive_distance,
    nhd_loss,
    nhd_loss_from_distances,
    pseudo_label_loss,
)

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4
KINK_MARGIN = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float
    n_instances: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray,
                       h: float = DEFAULT_H) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences, coordinatewise."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(analytic, numeric) -> float:
    """Worst per-coordinate relative error, floored at 1% of the gradient
    scale so coordinates at the finite-difference noise floor are compared
    absolutely rather than amplified."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = max(1.0, float(np.abs(analytic).max()), float(np.abs(numeric).max()))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 0.01 * scale)
    return float((np.abs(analytic - numeric) / denom).max())


def _draw_until(rng: np.random.Generator, draw, ok, limit: int = 200):
    for _ in range(limit):
        inst = draw(rng)
        if ok(inst):
            return inst
    raise RuntimeError("could not draw a kink-free instance")


def _saturated_gap_ok(v, rows, s1, margin=KINK_MARGIN) -> bool:
    vhat = tanh_normalize(v, s1)
    rhat = tanh_normalize_rows(rows, s1)
    return float(np.abs(vhat[None, :] - rhat).min()) > margin


def check_tanh_normalize(seed=0, n_instances=100, h=DEFAULT_H, tol=DEFAULT_TOL) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        l = int(rng.integers(2, 9))
        v = rng.normal(size=l)
        while np.linalg.norm(v) < 0.1:
            v = rng.normal(size=l)
        s1 = float(rng.uniform(0.5, 2.0))
        u = rng.normal(size=l)
        analytic = grad_tanh_normalize(v, s1, u)
        numeric = central_difference(lambda x: float(u @ tanh_normalize(x, s1)), v, h)
        worst = max(worst, max_rel_err(analytic, numeric))
    return CheckResult("tanh_normalize", worst, tol, n_instances)


def _nhd_like_check(name, loss_fn, seed, n_instances, h, tol) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        def draw(r):
            n = int(r.integers(2, 10))
            l = int(r.integers(2, 9))
            return (r.normal(size=l), r.normal(size=(n, l)),
                    int(r.integers(0, n)), float(r.uniform(1.0, 8.0)),
                    float(r.uniform(0.5, 2.0)))

        v, rows, pos, s, s1 = _draw_until(
            rng, draw, lambda inst: _saturated_gap_ok(inst[0], inst[1], inst[4])
        )
        out = loss_fn(v, pos, rows, s, s1)
        l = v.shape[0]

        def f(theta):
            vv = theta[:l]
            ww = theta[l:].reshape(rows.shape)
            return loss_fn(vv, pos, ww, s, s1).value

        theta = np.concatenate([v, rows.reshape(-1)])
        numeric = central_difference(f, theta, h)
        analytic = np.concatenate([out.grad_v, out.grad_bank.reshape(-1)])
        worst = max(worst, max_rel_err(analytic, numeric))
    return CheckResult(name, worst, tol, n_instances)


def check_nhd_loss(seed=1, n_instances=100, h=DEFAULT_H, tol=DEFAULT_TOL) -> CheckResult:
    return _nhd_like_check("nhd_loss", nhd_loss, seed, n_instances, h, tol)


def check_pseudo_label_loss(seed=2, n_instances=100, h=DEFAULT_H, tol=DEFAULT_TOL) -> CheckResult:
    return _nhd_like_check("pseudo_label_loss", pseudo_label_loss, seed, n_instances, h, tol)


def check_dot_product_loss(seed=3, n_instances=100, h=DEFAULT_H, tol=DEFAULT_TOL) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(2, 10))
        l = int(rng.integers(2, 9))
        v = rng.normal(size=l)
        rows = rng.normal(size=(n, l))
        pos = int(rng.integers(0, n))
        s = float(rng.uniform(1.0, 8.0))
        out = dot_product_loss(v, pos, rows, s)

        def f(theta):
            return dot_product_loss(theta[:l], pos, theta[l:].reshape(n, l), s).value

        numeric = central_difference(f, np.concatenate([v, rows.reshape(-1)]), h)
        analytic = np.concatenate([out.grad_v, out.grad_bank.reshape(-1)])
        worst = max(worst, max_rel_err(analytic, numeric))
    return CheckResult("dot_product_loss", worst, tol, n_instances)


def check_attention_loss(seed=4, n_instances=100, h=DEFAULT_H, tol=DEFAULT_TOL) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        def draw(r):
            c = int(r.integers(1, 5))
            p = int(r.integers(1, 7))
            return r.normal(size=(c, p)), r.normal(size=c)

        t, w = _draw_until(
            rng, draw,
            lambda inst: float(np.abs(inst[0] - inst[1][:, None]).min()) > KINK_MARGIN,
        )
        out = attention_loss(t, w)
        num_w = central_difference(lambda x: attention_loss(t, x).value, w, h)
        num_t = central_difference(lambda x: attention_loss(x, w).value, t, h)
        worst = max(worst, max_rel_err(out.grad_w_att, num_w))
        worst = max(worst, max_rel_err(out.grad_t, num_t))
    return CheckResult("attention_loss", worst, tol, n_instances)


def check_distance_derivatives(seed=5, n_instances=1000, h=DEFAULT_H, tol=1e-6) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        k = int(rng.integers(1, 6))
        d_pos = float(rng.uniform(0.0, 2.0))
        d_neg = rng.uniform(0.0, 2.0, size=k)
        s = float(rng.uniform(1.0, 8.0))
        num_pos = (
            nhd_loss_from_distances(d_pos + h, d_neg, s)
            - nhd_loss_from_distances(d_pos - h, d_neg, s)
        ) / (2 * h)
        worst = max(worst, max_rel_err(grad_wrt_positive_distance(d_pos, d_neg, s), num_pos))
        j = int(rng.integers(0, k))
        dj = d_neg.copy()
        dj[j] += h
        up = nhd_loss_from_distances(d_pos, dj, s)
        dj[j] -= 2 * h
        down = nhd_loss_from_distances(d_pos, dj, s)
        worst = max(
            worst,
            max_rel_err(grad_wrt_negative_distance(d_pos, d_neg, j, s), (up - down) / (2 * h)),
        )
    return CheckResult("distance_derivatives", worst, tol, n_instances)


def check_encoder_graph(seed=6, n_instances=100, h=DEFAULT_H, tol=DEFAULT_TOL) -> CheckResult:
    """Full chain: feature map -> CSA -> linear head -> NHD loss (+ attention
    loss), checked against finite differences in every parameter and in the
    input map itself."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        c = int(rng.integers(2, 5))
        p = int(rng.integers(2, 6))
        l = int(rng.integers(2, 7))
        n = int(rng.integers(2, 8))
        s = float(rng.uniform(1.0, 8.0))
        s1 = float(rng.uniform(0.5, 2.0))
        lam_att = float(rng.choice([0.0, 1.0]))

        def draw(r):
            t = r.normal(size=(c, p))
            params = EncoderParams(
                w_fc=r.normal(size=(l, 2 * c)),
                b=r.normal(size=l),
                w_att=r.normal(size=c),
            )
            rows = r.normal(size=(n, l))
            return t, params, rows

        def ok(inst):
            t, params, rows = inst
            if float(np.abs(t - params.w_att[:, None]).min()) <= KINK_MARGIN:
                return False
            v = forward(t, params).v
            if np.linalg.norm(v) < 0.1:
                return False
            return _saturated_gap_ok(v, rows, s1)

        t, params, rows = _draw_until(rng, draw, ok)

        cache = forward(t, params)
        out = nhd_loss(cache.v, 0, rows, s, s1)
        att = attention_loss(t, params.w_att)
        grads = backward(
            t, params, cache, out.grad_v,
            grad_w_att_extra=lam_att * att.grad_w_att, want_grad_t=True,
        )
        grad_t_full = grads.t + lam_att * att.grad_t

        def f(theta):
            off = 0
            tt = theta[off : off + c * p].reshape(c, p); off += c * p
            w_fc = theta[off : off + l * 2 * c].reshape(l, 2 * c); off += l * 2 * c
            bb = theta[off : off + l]; off += l
            w_att = theta[off : off + c]
            pp = EncoderParams(w_fc=w_fc, b=bb, w_att=w_att)
            value = nhd_loss(forward(tt, pp).v, 0, rows, s, s1).value
            return value + lam_att * attention_loss(tt, w_att).value

        theta = np.concatenate(
            [t.reshape(-1), params.w_fc.reshape(-1), params.b, params.w_att]
        )
        numeric = central_difference(f, theta, h)
        analytic = np.concatenate(
            [grad_t_full.reshape(-1), grads.w_fc.reshape(-1), grads.b, grads.w_att]
        )
        worst = max(worst, max_rel_err(analytic, numeric))
    return CheckResult("encoder_graph", worst, tol, n_instances)


def check_codebook_deltas(seed=7, n_instances=100, h=DEFAULT_H, tol=DEFAULT_TOL) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        b_sz = int(rng.integers(1, 4))
        bits = int(rng.integers(2, 6))
        dim = int(rng.integers(2, 7))

        def draw(r):
            return r.normal(size=(b_sz, dim)), CodebookSet(r.normal(size=(bits, 2, dim)))

        def ok(inst):
            z, cb = inst
            diff = z[:, None, None, :] - cb.centroids[None, :, :, :]
            return float(np.sqrt((diff**2).sum(axis=3)).min()) > KINK_MARGIN

        z, cb = _draw_until(rng, draw, ok)
        u = rng.normal(size=(b_sz, bits))
        grad_z, grad_c = deltas_backward(z, cb, u)

        def f(theta):
            zz = theta[: z.size].reshape(z.shape)
            cc = CodebookSet(theta[z.size :].reshape(cb.centroids.shape))
            return float((u * deltas_batch(zz, cc)).sum())

        theta = np.concatenate([z.reshape(-1), cb.centroids.reshape(-1)])
        numeric = central_difference(f, theta, h)
        analytic = np.concatenate([grad_z.reshape(-1), grad_c.reshape(-1)])
        worst = max(worst, max_rel_err(analytic, numeric))
    return CheckResult("codebook_deltas", worst, tol, n_instances)


def check_dec_loss(seed=8, n_instances=100, h=DEFAULT_H, tol=DEFAULT_TOL) -> CheckResult:
    """The target distribution is a constant for the gradient, so the
    finite-difference oracle freezes it at the base point too."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        b_sz = int(rng.integers(1, 5))
        bits = int(rng.integers(1, 5))
        dim = int(rng.integers(2, 6))
        z = rng.normal(size=(b_sz, dim))
        cb = CodebookSet(rng.normal(size=(bits, 2, dim)))
        _, grad_c, grad_z = dec_loss(z, cb)

        def soft_assign(zz, centroids):
            diff = zz[:, None, None, :] - centroids[None, :, :, :]
            w = 1.0 / (1.0 + (diff**2).sum(axis=3))
            return w / w.sum(axis=2, keepdims=True)

        q0 = soft_assign(z, cb.centroids)
        f0 = q0.sum(axis=0, keepdims=True)
        pt = q0 * q0 / f0
        p0 = pt / pt.sum(axis=2, keepdims=True)

        def f(theta):
            zz = theta[: z.size].reshape(z.shape)
            cc = theta[z.size :].reshape(cb.centroids.shape)
            q = soft_assign(zz, cc)
            return float((p0 * np.log(p0 / q)).sum() / bits)

        theta = np.concatenate([z.reshape(-1), cb.centroids.reshape(-1)])
        numeric = central_difference(f, theta, h)
        analytic = np.concatenate([grad_z.reshape(-1), grad_c.reshape(-1)])
        worst = max(worst, max_rel_err(analytic, numeric))
    return CheckResult("dec_loss", worst, tol, n_instances)


ALL_CHECKS = (
    check_tanh_normalize,
    check_nhd_loss,
    check_pseudo_label_loss,
    check_dot_product_loss,
    check_attention_loss,
    check_distance_derivatives,
    check_encoder_graph,
    check_codebook_deltas,
    check_dec_loss,
)


def run_all(seed: int = 0, n_instances: int = 100) -> list[CheckResult]:
    """Run every check with per-check derived seeds."""
    results = []
    for k, check in enumerate(ALL_CHECKS):
        kwargs = {"seed": seed + k, "n_instances": n_instances}
        if check is check_distance_derivatives:
            kwargs["n_instances"] = max(n_instances, 1000)
        results.append(check(**kwargs))
    return results
