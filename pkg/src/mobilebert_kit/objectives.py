"""Layer-wise transfer losses and the pre-training distillation loss.

Teacher-side arguments are always treated as constants: they may be passed as
tensors or plain arrays, and no gradient ever flows into them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError, DomainError, ShapeError
from .tensor import Tensor, clamp_min, log_softmax

LOG_FLOOR = 1e-12
STOCHASTIC_TOL = 1e-6


@dataclass(frozen=True)
class TransferWeights:
    fmt_weight: float = 1.0
    at_weight: float = 1.0
    alpha: float = 0.5
    fmt_stats_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha must lie in the open interval (0, 1), got {self.alpha}")
        for name in ("fmt_weight", "at_weight", "fmt_stats_weight"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return asdict(self)


def _const(x) -> Tensor:
    return Tensor(x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64))


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _token_mean(per_token: Tensor, mask) -> Tensor:
    """Average a ``[..., T]`` tensor over all tokens, optionally weighting by ``mask``."""
    if mask is None:
        return per_token.mean()
    w = np.broadcast_to(np.asarray(mask, dtype=per_token.dtype), per_token.shape)
    total = w.sum()
    if total <= 0:
        raise ContractError("mask selects no tokens")
    return (per_token * Tensor(w)).sum() * (1.0 / total)


def _check_maps(h_tr: Tensor, h_st: Tensor):
    if h_tr.shape != h_st.shape:
        raise ShapeError(
            f"feature maps differ in shape {h_tr.shape} vs {h_st.shape}; layer-wise transfer needs teacher "
            "and student to share the inter-block feature map size")


def raw_fmt_loss(h_tr, h_st, mask=None) -> Tensor:
    """Plain mean squared error between feature maps over tokens and channels."""
    h_tr, h_st = _const(h_tr), _tensor(h_st)
    _check_maps(h_tr, h_st)
    diff = h_st - h_tr
    return _token_mean((diff * diff).mean(axis=-1), mask)


def _standardize(h: Tensor, eps: float):
    mu = h.mean(axis=-1, keepdims=True)
    centered = h - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt(), mu, var


def fmt_loss(h_tr, h_st, stats_weight: float = 1.0, mask=None, eps: float = 1e-6) -> Tensor:
    """Feature map transfer split into a shape term and a statistics term.

    The shape term is the MSE between per-token standardised maps; the
    statistics term is the squared difference of per-token means plus that of
    per-token variances, weighted by ``stats_weight``.
    """
    h_tr, h_st = _const(h_tr), _tensor(h_st)
    _check_maps(h_tr, h_st)
    z_tr, mu_tr, var_tr = _standardize(h_tr, eps)
    z_st, mu_st, var_st = _standardize(h_st, eps)
    dz = z_st - z_tr
    loss = _token_mean((dz * dz).mean(axis=-1), mask)
    if stats_weight:
        dmu, dvar = mu_st - mu_tr, var_st - var_tr
        stats = (dmu * dmu + dvar * dvar).reshape(dmu.shape[:-1])
        loss = loss + _token_mean(stats, mask) * stats_weight
    return loss


def _check_stochastic(a: np.ndarray, who: str):
    if np.any(a < 0) or not np.all(np.isfinite(a)):
        raise DomainError(f"{who} attention contains negative or non-finite entries")
    err = np.abs(a.sum(axis=-1) - 1.0).max() if a.size else 0.0
    if err > STOCHASTIC_TOL:
        raise DomainError(f"{who} attention rows are not stochastic (max |row sum - 1| = {err:.2e})")


def at_loss(a_tr, a_st, mask=None) -> Tensor:
    """Mean KL(teacher || student) over heads and query positions.

    Inputs are ``[..., A, T, T]``; ``mask`` (``[..., T]``) weights query rows.
    """
    a_tr, a_st = _const(a_tr), _tensor(a_st)
    if a_tr.shape != a_st.shape:
        raise ShapeError(f"attention shapes differ: {a_tr.shape} vs {a_st.shape}")
    _check_stochastic(a_tr.data, "teacher")
    _check_stochastic(a_st.data, "student")
    p = a_tr.data
    plogp = (p * np.log(np.maximum(p, LOG_FLOOR))).sum(axis=-1)
    cross = (Tensor(p) * clamp_min(a_st, LOG_FLOOR).log()).sum(axis=-1)
    kl = Tensor(plogp) - cross  # [..., A, T]
    if mask is not None:
        mask = np.asarray(mask)[..., None, :]
    return _token_mean(kl, mask)


def layer_kt_loss(trace_tr, trace_st, layer: int, weights: TransferWeights, mask=None) -> Tensor:
    """``fmt_weight * FMT + at_weight * AT`` at one layer."""
    n_tr, n_st = len(trace_tr.feature_maps), len(trace_st.feature_maps)
    if not (0 <= layer < n_tr and layer < n_st):
        raise IndexError(f"layer {layer} out of range for traces with {n_tr} (teacher) / {n_st} (student) layers")
    loss = None
    if weights.fmt_weight:
        loss = fmt_loss(trace_tr.feature_maps[layer], trace_st.feature_maps[layer],
                        weights.fmt_stats_weight, mask) * weights.fmt_weight
    if weights.at_weight:
        at = at_loss(trace_tr.attentions[layer], trace_st.attentions[layer], mask) * weights.at_weight
        loss = at if loss is None else loss + at
    if loss is None:
        return Tensor(np.zeros(()))
    return loss


# ---------------------------------------------------------------------------
# pre-training distillation


def mlm_loss(mlm_logits: Tensor, mlm_labels) -> Tensor:
    labels = np.asarray(mlm_labels)
    if labels.size == 0:
        raise ContractError("no masked positions: MLM loss is undefined (batch construction bug)")
    logp = log_softmax(mlm_logits, axis=-1)
    return -logp[np.arange(labels.size), labels].mean()


def kd_loss(mlm_logits: Tensor, teacher_probs) -> Tensor:
    """Cross-entropy of student log-probs against the teacher's soft targets."""
    probs = _const(teacher_probs)
    if probs.shape != mlm_logits.shape:
        raise ShapeError(f"teacher probs {probs.shape} vs student logits {mlm_logits.shape}")
    if probs.shape[0] == 0:
        raise ContractError("no masked positions: KD loss is undefined (batch construction bug)")
    logp = log_softmax(mlm_logits, axis=-1)
    return -(logp * probs).sum(axis=-1).mean()


def nsp_loss(nsp_logits: Tensor, nsp_labels) -> Tensor:
    labels = np.asarray(nsp_labels).reshape(-1)
    logits = nsp_logits.reshape(-1, 2)
    logp = log_softmax(logits, axis=-1)
    return -logp[np.arange(labels.size), labels].mean()


def combine_pd(l_mlm, l_kd, l_nsp, alpha: float):
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in the open interval (0, 1), got {alpha}")
    return l_mlm * alpha + l_kd * (1.0 - alpha) + l_nsp


def pd_components(mlm_logits, mlm_labels, teacher_mlm_probs, nsp_logits, nsp_labels) -> dict[str, Tensor]:
    return {
        "mlm": mlm_loss(mlm_logits, mlm_labels),
        "kd": kd_loss(mlm_logits, teacher_mlm_probs),
        "nsp": nsp_loss(nsp_logits, nsp_labels),
    }


def pd_loss(mlm_logits, mlm_labels, teacher_mlm_probs, nsp_logits, nsp_labels, alpha: float = 0.5) -> Tensor:
    """``alpha * MLM + (1 - alpha) * KD + NSP`` evaluated at masked positions."""
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in the open interval (0, 1), got {alpha}")
    parts = pd_components(mlm_logits, mlm_labels, teacher_mlm_probs, nsp_logits, nsp_labels)
    return combine_pd(parts["mlm"], parts["kd"], parts["nsp"], alpha)
