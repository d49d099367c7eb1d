"""End-to-end training of the desk-scale encoder.

The loop draws everything from one seeded generator in a fixed order
(parameter init, codebook init, per-epoch shuffles, optional anchor noise),
so a (seed, config, dataset) triple reproduces the metrics log and final
codes bit-for-bit.  Per-batch gradients are averaged over the batch and the
tensors are updated in a fixed order: w_fc, b, w_att, memory bank, cluster
memory, centroids.

Loss modes:
    nhd_full     weighted sum of the NHD instance loss, the pseudo-label
                 loss, the attention loss, and (codebook variant) the
                 clustering loss
    nhd_only     the NHD instance loss alone
    l2_baseline  the un-normalized tanh dot-product objective alone
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .clustering import APConfig, ClusterMemory, cluster_features, refresh_cluster_memory
from .codebook import CodebookSet, dec_loss, deltas_backward, deltas_batch, init_codebooks
from .codes import PackedCodeSet, collision_probability, pack_bit_matrix, pack_sign_matrix
from .encoder import EncoderParams, backward_batch, forward_batch, init_params
from .errors import DegenerateInputError, FormatError, NoExemplarsError
from .features import NORM_EPS, tanh_normalize_rows
from .optim import AdamState, adam_init, adam_step
from .retrieval import self_retrieval_map
from .synthdata import SynthDataset

MODEL_MAGIC = b"CRHM"
MODEL_VERSION = 1

LOSS_MODES = ("nhd_full", "nhd_only", "l2_baseline")
VARIANTS = ("sign", "codebook")

_EVAL_CHUNK = 128


@dataclass(frozen=True)
class TrainConfig:
    bits: int = 16
    epochs: int = 100
    batch_size: int = 64
    lr: float = 8e-3
    s: float = 8.0
    s1: float = 8.0
    lambda_pseudo: float = 1.0
    lambda_att: float = 1.0
    lambda_nhd: float = 1.0
    lambda_code: float = 1.0
    pseudo_refresh_epochs: int = 5
    seed: int = 0
    loss_mode: str = "nhd_full"
    variant: str = "sign"
    use_csa: bool = True
    anchor_noise: float = 0.0
    ap: APConfig = field(default_factory=APConfig)

    def __post_init__(self):
        if not 1 <= self.bits <= 4096:
            raise ValueError(f"bits must be in [1, 4096], got {self.bits}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.s <= 0 or self.s1 <= 0:
            raise ValueError("s and s1 must be positive")
        if min(self.lambda_pseudo, self.lambda_att, self.lambda_nhd, self.lambda_code) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.pseudo_refresh_epochs < 1:
            raise ValueError("pseudo_refresh_epochs must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.anchor_noise < 0:
            raise ValueError("anchor_noise must be >= 0")

    @property
    def uses_pseudo(self) -> bool:
        return self.loss_mode == "nhd_full" and self.lambda_pseudo > 0

    @property
    def uses_attention_loss(self) -> bool:
        return self.loss_mode == "nhd_full" and self.lambda_att > 0

    @property
    def uses_dec(self) -> bool:
        return (self.loss_mode == "nhd_full" and self.variant == "codebook"
                and self.lambda_code > 0)


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    mean_norm_v: float
    p_collision: float
    mean_ap: float
    mean_abs_sat: float
    mean_d_pos: float


@dataclass
class ModelState:
    params: EncoderParams
    bank: np.ndarray
    pseudo: ClusterMemory | None
    codebooks: CodebookSet | None
    opt: dict[str, AdamState]
    epoch: int
    seed: int
    variant: str
    use_csa: bool = True


def feature_rms(dataset: SynthDataset) -> float:
    """RMS of the per-sample global-mean entries, the scale proxy used to
    place the head's init output in the nonlinearity's sensitive range."""
    g = dataset.features.mean(axis=2)
    return max(float(np.sqrt((g * g).mean())), 1e-12)


def _check_sample_norms(v: np.ndarray, sample_ids: np.ndarray) -> None:
    norms = np.linalg.norm(v, axis=1)
    bad = np.flatnonzero(norms <= NORM_EPS)
    if bad.size:
        i = int(sample_ids[bad[0]])
        raise DegenerateInputError(
            f"sample {i}: feature norm {norms[bad[0]]:.3e} is degenerate (<= {NORM_EPS})"
        )


def _nhd_terms_batch(v_b, pos, rows, s, s1, want_grads=True):
    """Batched NHD softmax loss against ``rows``; row gradient is summed
    over the batch, feature gradient stays per sample."""
    l = v_b.shape[1]
    vhat = tanh_normalize_rows(v_b, s1)
    rhat = tanh_normalize_rows(rows, s1)
    diff = vhat[:, None, :] - rhat[None, :, :]
    d = np.abs(diff).sum(axis=2) / l

    b_idx = np.arange(v_b.shape[0])
    z = s * (1.0 - d) ** 2
    d_pos = d[b_idx, pos]
    z[b_idx, pos] = s * (2.0 - d_pos) ** 2 / 4.0
    m = z.max(axis=1)
    e = np.exp(z - m[:, None])
    total = e.sum(axis=1)
    loss = np.log(total) - (z[b_idx, pos] - m)
    if not want_grads:
        return loss, None, None

    p = e / total[:, None]
    dl_dd = p * 2.0 * s * (d - 1.0)
    dl_dd[b_idx, pos] = (1.0 - p[b_idx, pos]) * (s / 2.0) * (2.0 - d_pos)
    sgn = np.sign(diff)
    up_vhat = np.einsum("bn,bnl->bl", dl_dd, sgn) / l
    up_rhat = -np.einsum("bn,bnl->nl", dl_dd, sgn) / l
    grad_v = _grad_tanh_normalize_rows(v_b, vhat, s1, up_vhat)
    grad_rows = _grad_tanh_normalize_rows(rows, rhat, s1, up_rhat)
    return loss, grad_v, grad_rows


def _grad_tanh_normalize_rows(m, y, s1, upstream):
    # same as features.grad_tanh_normalize_rows but reusing the computed y
    r = np.linalg.norm(m, axis=1, keepdims=True)
    t = (1.0 - y * y) * upstream
    return (s1 / r) * (t - m * ((m * t).sum(axis=1, keepdims=True) / (r * r)))


def _dot_terms_batch(v_b, pos, rows, s, want_grads=True):
    """Batched un-normalized tanh dot-product softmax loss."""
    t_v = np.tanh(v_b)
    t_w = np.tanh(rows)
    z = s * (t_v @ t_w.T)
    b_idx = np.arange(v_b.shape[0])
    m = z.max(axis=1)
    e = np.exp(z - m[:, None])
    total = e.sum(axis=1)
    loss = np.log(total) - (z[b_idx, pos] - m)
    if not want_grads:
        return loss, None, None
    dz = e / total[:, None]
    dz[b_idx, pos] -= 1.0
    grad_v = (1.0 - t_v * t_v) * (s * (dz @ t_w))
    grad_rows = (1.0 - t_w * t_w) * (s * (dz.T @ t_v))
    return loss, grad_v, grad_rows


def _att_terms_batch(t_b, w_att, want_grads=True):
    diff = t_b - w_att[None, :, None]
    loss = np.abs(diff).sum(axis=(1, 2))
    if not want_grads:
        return loss, None
    return loss, -np.sign(diff).sum(axis=(0, 2))


def _forward_values(features, params, codebooks, use_csa):
    """(v, fused) for a feature stack, with the codebook read-out applied."""
    fwd = forward_batch(features, params, use_csa)
    if codebooks is not None:
        return deltas_batch(fwd.fused, codebooks), fwd.fused
    return fwd.v, fwd.fused


def codes_from_values(v_all: np.ndarray, variant: str) -> PackedCodeSet:
    """sign variant: bit 1 iff v >= 0; codebook variant: bit 1 iff v > 0
    (a tie means equidistant centroids and falls to 0)."""
    if variant == "codebook":
        return pack_bit_matrix(v_all > 0)
    return pack_sign_matrix(v_all)


def encode(dataset: SynthDataset, state: ModelState) -> PackedCodeSet:
    """Quantize every sample with the trained (or initial) model, in order."""
    v_all, _ = _forward_values(dataset.features, state.params, state.codebooks, state.use_csa)
    return codes_from_values(v_all, state.variant)


def _refresh_pseudo(dataset, params, codebooks, cfg, epoch):
    v_all, _ = _forward_values(dataset.features, params, codebooks, cfg.use_csa)
    _check_sample_norms(v_all, np.arange(dataset.n))
    sat = tanh_normalize_rows(v_all, cfg.s1)
    try:
        clustering = cluster_features(sat, cfg.ap)
    except NoExemplarsError as e:
        raise NoExemplarsError(f"no exemplars at epoch {epoch}") from e
    return refresh_cluster_memory(clustering, v_all)


def _dataset_mean_loss(dataset, params, bank, pseudo, codebooks, cfg) -> float:
    """Mean per-sample loss over the whole dataset, evaluated in chunks."""
    total = 0.0
    n = dataset.n
    for start in range(0, n, _EVAL_CHUNK):
        idx = np.arange(start, min(start + _EVAL_CHUNK, n))
        t_b = dataset.features[idx]
        v_b, fused = _forward_values(t_b, params, codebooks, cfg.use_csa)
        _check_sample_norms(v_b, idx)
        if cfg.loss_mode == "l2_baseline":
            loss, _, _ = _dot_terms_batch(v_b, idx, bank, cfg.s, want_grads=False)
            total += loss.sum()
            continue
        loss, _, _ = _nhd_terms_batch(v_b, idx, bank, cfg.s, cfg.s1, want_grads=False)
        total += cfg.lambda_nhd * loss.sum() if cfg.loss_mode == "nhd_full" else loss.sum()
        if cfg.uses_pseudo and pseudo is not None:
            ps, _, _ = _nhd_terms_batch(
                v_b, pseudo.assignment[idx].astype(np.intp), pseudo.rows, cfg.s, cfg.s1,
                want_grads=False,
            )
            total += cfg.lambda_pseudo * ps.sum()
        if cfg.uses_attention_loss:
            av, _ = _att_terms_batch(t_b, params.w_att, want_grads=False)
            total += cfg.lambda_att * av.sum()
        if cfg.uses_dec:
            dec_val, _, _ = dec_loss(fused, codebooks)
            total += cfg.lambda_code * dec_val
    return float(total / n)


def _metrics_row(epoch, mean_loss, v_all, bank, codes, labels, s1) -> EpochMetrics:
    n, l = v_all.shape
    sat = tanh_normalize_rows(v_all, s1)
    bank_sat = tanh_normalize_rows(bank, s1)
    if n >= 2:
        p_col = collision_probability(codes)
        try:
            m_ap = self_retrieval_map(codes, labels)
        except ValueError:
            m_ap = float("nan")
    else:
        p_col = float("nan")
        m_ap = float("nan")
    return EpochMetrics(
        epoch=epoch,
        mean_loss=float(mean_loss),
        mean_norm_v=float(np.linalg.norm(v_all, axis=1).mean()),
        p_collision=p_col,
        mean_ap=m_ap,
        mean_abs_sat=float(np.abs(sat).mean()),
        mean_d_pos=float(np.abs(sat - bank_sat).sum(axis=1).mean() / l),
    )


def train(dataset: SynthDataset, cfg: TrainConfig) -> tuple[ModelState, list[EpochMetrics]]:
    """Train on the dataset and return the final state plus per-epoch metrics.

    Metrics row 0 describes the initialized model before any update; row k
    describes the model after epoch k, with the epoch's mean training loss.
    """
    if dataset.n < 1:
        raise ValueError("dataset must hold at least one sample")
    if cfg.variant == "codebook" and dataset.n < 2:
        raise ValueError("codebook init needs at least two samples")

    rng = np.random.default_rng(cfg.seed)
    n = dataset.n
    params = init_params(cfg.bits, dataset.channels, rng,
                         feature_scale=feature_rms(dataset))

    fwd_all = forward_batch(dataset.features, params, cfg.use_csa)
    codebooks = None
    if cfg.variant == "codebook":
        codebooks = init_codebooks(fwd_all.fused, cfg.bits, rng)
        v_all = deltas_batch(fwd_all.fused, codebooks)
    else:
        v_all = fwd_all.v
    _check_sample_norms(v_all, np.arange(n))
    bank = v_all.copy()

    opt = {
        "w_fc": adam_init(params.w_fc, cfg.lr),
        "b": adam_init(params.b, cfg.lr),
        "w_att": adam_init(params.w_att, cfg.lr),
        "bank": adam_init(bank, cfg.lr),
    }
    if codebooks is not None:
        opt["centroids"] = adam_init(codebooks.centroids, cfg.lr)

    pseudo = None
    if cfg.uses_pseudo:
        pseudo = _refresh_pseudo(dataset, params, codebooks, cfg, epoch=0)
        opt["pseudo"] = adam_init(pseudo.rows, cfg.lr)

    history = [
        _metrics_row(
            0,
            _dataset_mean_loss(dataset, params, bank, pseudo, codebooks, cfg),
            v_all,
            bank,
            codes_from_values(v_all, cfg.variant),
            dataset.fine_labels,
            cfg.s1,
        )
    ]

    for epoch in range(1, cfg.epochs + 1):
        if cfg.uses_pseudo and epoch > 1 and (epoch - 1) % cfg.pseudo_refresh_epochs == 0:
            pseudo = _refresh_pseudo(dataset, params, codebooks, cfg, epoch)
            opt["pseudo"] = adam_init(pseudo.rows, cfg.lr)

        perm = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss_sum += _train_batch(dataset, idx, params, bank, pseudo, codebooks, opt, cfg, rng)

        v_all, _ = _forward_values(dataset.features, params, codebooks, cfg.use_csa)
        _check_sample_norms(v_all, np.arange(n))
        history.append(
            _metrics_row(
                epoch, loss_sum / n, v_all, bank,
                codes_from_values(v_all, cfg.variant),
                dataset.fine_labels, cfg.s1,
            )
        )

    state = ModelState(
        params=params, bank=bank, pseudo=pseudo, codebooks=codebooks,
        opt=opt, epoch=cfg.epochs, seed=cfg.seed, variant=cfg.variant,
        use_csa=cfg.use_csa,
    )
    return state, history


def _train_batch(dataset, idx, params, bank, pseudo, codebooks, opt, cfg, rng) -> float:
    """One minibatch: forward, losses, reverse-mode gradients, Adam updates.

    Returns the summed loss over the batch (batch-level terms included).
    """
    t_b = dataset.features[idx]
    if cfg.anchor_noise > 0:
        t_b = t_b + rng.normal(size=t_b.shape) * cfg.anchor_noise
    b_sz = idx.shape[0]
    fwd = forward_batch(t_b, params, cfg.use_csa)
    if codebooks is not None:
        v_b = deltas_batch(fwd.fused, codebooks)
    else:
        v_b = fwd.v
    _check_sample_norms(v_b, idx)

    grad_centroids = np.zeros_like(codebooks.centroids) if codebooks is not None else None
    batch_loss = 0.0

    if cfg.loss_mode == "l2_baseline":
        loss, grad_v, grad_bank = _dot_terms_batch(v_b, idx, bank, cfg.s)
        batch_loss += loss.sum()
        grad_v = grad_v / b_sz
        grad_bank = grad_bank / b_sz
        grad_cluster = None
        grad_w_att_extra = None
    else:
        w_nhd = cfg.lambda_nhd if cfg.loss_mode == "nhd_full" else 1.0
        loss, grad_v_nhd, grad_bank = _nhd_terms_batch(v_b, idx, bank, cfg.s, cfg.s1)
        batch_loss += w_nhd * loss.sum()
        grad_v = w_nhd * grad_v_nhd / b_sz
        grad_bank = w_nhd * grad_bank / b_sz
        grad_cluster = None
        grad_w_att_extra = None
        if cfg.uses_pseudo and pseudo is not None:
            pos = pseudo.assignment[idx].astype(np.intp)
            ps_loss, ps_grad_v, grad_cluster = _nhd_terms_batch(
                v_b, pos, pseudo.rows, cfg.s, cfg.s1
            )
            batch_loss += cfg.lambda_pseudo * ps_loss.sum()
            grad_v += cfg.lambda_pseudo * ps_grad_v / b_sz
            grad_cluster = cfg.lambda_pseudo * grad_cluster / b_sz
        if cfg.uses_attention_loss:
            att_loss, att_grad_w = _att_terms_batch(t_b, params.w_att)
            batch_loss += cfg.lambda_att * att_loss.sum()
            grad_w_att_extra = cfg.lambda_att * att_grad_w / b_sz

    if codebooks is not None:
        grad_z, grad_c = deltas_backward(fwd.fused, codebooks, grad_v)
        grad_centroids += grad_c
        if cfg.uses_dec:
            dec_val, dec_grad_c, dec_grad_z = dec_loss(fwd.fused, codebooks)
            batch_loss += cfg.lambda_code * dec_val
            grad_z = grad_z + (cfg.lambda_code / b_sz) * dec_grad_z
            grad_centroids += (cfg.lambda_code / b_sz) * dec_grad_c
        enc_grads = backward_batch(
            t_b, params, fwd, grad_fused=grad_z,
            grad_w_att_extra=grad_w_att_extra, use_csa=cfg.use_csa,
        )
    else:
        enc_grads = backward_batch(
            t_b, params, fwd, grad_v=grad_v,
            grad_w_att_extra=grad_w_att_extra, use_csa=cfg.use_csa,
        )

    # fixed update order keeps runs reproducible
    if codebooks is None:
        adam_step(opt["w_fc"], params.w_fc, enc_grads.w_fc)
        adam_step(opt["b"], params.b, enc_grads.b)
    adam_step(opt["w_att"], params.w_att, enc_grads.w_att)
    adam_step(opt["bank"], bank, grad_bank)
    if grad_cluster is not None:
        adam_step(opt["pseudo"], pseudo.rows, grad_cluster)
    if codebooks is not None:
        adam_step(opt["centroids"], codebooks.centroids, grad_centroids)
    return float(batch_loss)


# --- CRHM model files -------------------------------------------------------
#
# magic "CRHM", u16 version, u32 (l, C, N, n_c); float64 LE tensors in order
# w_fc, b, w_att, bank, cluster rows; per-tensor Adam blocks (m, v, u64 step)
# in the same order; the u32 assignment vector; then u32 epoch, u64 seed,
# f64 learning rate, u8 CSA flag, u8 variant tag, and for the codebook
# variant the centroid tensor plus its Adam block.

_TENSOR_ORDER = ("w_fc", "b", "w_att", "bank", "pseudo")


def _state_tensors(state: ModelState) -> dict[str, np.ndarray]:
    n_c = state.pseudo.n_c if state.pseudo is not None else 0
    l = state.params.bits
    return {
        "w_fc": state.params.w_fc,
        "b": state.params.b,
        "w_att": state.params.w_att,
        "bank": state.bank,
        "pseudo": state.pseudo.rows if state.pseudo is not None else np.zeros((n_c, l)),
    }


def _write_adam(fh, opt: dict[str, AdamState], name: str, shape) -> None:
    st = opt.get(name)
    zeros = np.zeros(shape, dtype="<f8")
    fh.write((st.m if st is not None else zeros).astype("<f8").tobytes())
    fh.write((st.v if st is not None else zeros).astype("<f8").tobytes())
    fh.write(struct.pack("<Q", st.t if st is not None else 0))


def write_model(state: ModelState, path) -> None:
    n = state.bank.shape[0]
    n_c = state.pseudo.n_c if state.pseudo is not None else 0
    tensors = _state_tensors(state)
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<HIIII", MODEL_VERSION, state.params.bits,
                             state.params.channels, n, n_c))
        for name in _TENSOR_ORDER:
            fh.write(tensors[name].astype("<f8").tobytes())
        for name in _TENSOR_ORDER:
            _write_adam(fh, state.opt, name, tensors[name].shape)
        if state.pseudo is not None:
            fh.write(state.pseudo.assignment.astype("<u4").tobytes())
        else:
            fh.write(np.zeros(n, dtype="<u4").tobytes())
        fh.write(struct.pack("<IQdBB", state.epoch, state.seed,
                             state.opt["w_fc"].lr, int(state.use_csa),
                             1 if state.variant == "codebook" else 0))
        if state.variant == "codebook":
            fh.write(state.codebooks.centroids.astype("<f8").tobytes())
            _write_adam(fh, state.opt, "centroids", state.codebooks.centroids.shape)


class _Cursor:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated CRHM file")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def floats(self, shape) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(self.take(count * 8), dtype="<f8").astype(np.float64)
        return arr.reshape(shape)

    def u32s(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(count * 4), dtype="<u4").astype(np.uint32)


def read_model(path) -> ModelState:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 22 or blob[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a CRHM model file")
    version, l, c, n, n_c = struct.unpack("<HIIII", blob[4:22])
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported CRHM version {version}")
    cur = _Cursor(blob, path)
    cur.off = 22
    shapes = {
        "w_fc": (l, 2 * c), "b": (l,), "w_att": (c,), "bank": (n, l), "pseudo": (n_c, l),
    }
    tensors = {name: cur.floats(shapes[name]) for name in _TENSOR_ORDER}
    adam_raw = {}
    for name in _TENSOR_ORDER:
        m = cur.floats(shapes[name])
        v = cur.floats(shapes[name])
        (t,) = struct.unpack("<Q", cur.take(8))
        adam_raw[name] = (m, v, t)
    assignment = cur.u32s(n)
    epoch, seed, lr, csa_flag, variant_tag = struct.unpack("<IQdBB", cur.take(22))
    codebooks = None
    if variant_tag == 1:
        centroids = cur.floats((l, 2, 2 * c))
        m = cur.floats((l, 2, 2 * c))
        v = cur.floats((l, 2, 2 * c))
        (t,) = struct.unpack("<Q", cur.take(8))
        adam_raw["centroids"] = (m, v, t)
        codebooks = CodebookSet(centroids=centroids)
    if cur.off != len(blob):
        raise FormatError(f"{path}: {len(blob) - cur.off} trailing bytes")

    params = EncoderParams(w_fc=tensors["w_fc"], b=tensors["b"], w_att=tensors["w_att"])
    pseudo = None
    if n_c > 0:
        pseudo = ClusterMemory(rows=tensors["pseudo"], assignment=assignment)
    opt = {}
    for name, (m, v, t) in adam_raw.items():
        if name == "pseudo" and n_c == 0:
            continue
        opt[name] = AdamState(m=m, v=v, t=t, lr=lr)
    return ModelState(
        params=params, bank=tensors["bank"], pseudo=pseudo, codebooks=codebooks,
        opt=opt, epoch=epoch, seed=seed,
        variant="codebook" if variant_tag == 1 else "sign",
        use_csa=bool(csa_flag),
    )
