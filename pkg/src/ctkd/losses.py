"""Scalar training objectives for distillation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, detach
from .errors import DataError, ParameterError, ShapeError

NORM_EPS = 1e-8
ATTENTION_FORMS = ("norm", "squared", "spatial_mean")


def attention_map(a: Tensor, p: float = 2.0) -> Tensor:
    """Channel-collapsed spatial map: sum over channels of |a|**p, shape [N,H,W]."""
    if not p > 1:
        raise ParameterError(f"attention power p must exceed 1, got {p}")
    if a.ndim != 4:
        raise ShapeError(f"attention_map expects [N,C,H,W], got {list(a.shape)}")
    return ad.tsum(ad.abs_pow(a, p), axis=1)


def normalized_attention(a: Tensor, p: float = 2.0) -> Tensor:
    """Per-sample flattened attention map scaled to unit L2 norm, shape [N,H*W]."""
    m = attention_map(a, p)
    return ad.l2_normalize(m.reshape(m.shape[0], -1), NORM_EPS)


def attention_transfer_loss(
    student_taps: Sequence[Tensor],
    teacher_taps: Sequence[Tensor],
    p: float = 2.0,
    form: str = "norm",
) -> Tensor:
    """Sum over taps of the distance between normalized attention maps, batch-averaged.

    Teacher activations are treated as constants. ``form`` picks the per-tap
    distance: "norm" (Euclidean), "squared" (its square), or "spatial_mean"
    (half the squared distance averaged over spatial positions, the scale at
    which beta = 1e3 is customarily tuned).
    """
    if form not in ATTENTION_FORMS:
        raise ParameterError(f"attention form must be one of {ATTENTION_FORMS}, got {form!r}")
    if len(student_taps) != len(teacher_taps):
        raise ShapeError(f"tap count mismatch: {len(student_taps)} student vs {len(teacher_taps)} teacher")
    total = None
    for j, (s, t) in enumerate(zip(student_taps, teacher_taps)):
        if s.shape[0] != t.shape[0] or s.shape[2:] != t.shape[2:]:
            raise ShapeError(
                f"tap {j}: student {list(s.shape)} and teacher {list(t.shape)} differ in batch or spatial size"
            )
        diff = normalized_attention(s, p) - normalized_attention(detach(t), p)
        if form == "norm":
            term = ad.mean(ad.norm(diff, axis=1))
        elif form == "squared":
            term = ad.mean(ad.tsum(diff * diff, axis=1))
        else:
            term = ad.mean(diff * diff) * 0.5
        total = term if total is None else total + term
    return total


def _class_targets(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape != (n, k):
            raise ShapeError(f"one-hot labels {labels.shape} do not match logits {(n, k)}")
        labels = labels.argmax(axis=1)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    n, k = logits.shape
    idx = _class_targets(labels, n, k)
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), idx] = 1
    return -ad.mean(ad.tsum(ad.log_softmax(logits) * onehot, axis=1))


def kd_softened_loss(a_s: Tensor, a_t: Tensor, tau: float = 4.0, scale_by_tau_sq: bool = True) -> Tensor:
    """Batch-mean cross-entropy between softened teacher and student distributions."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if a_s.shape != a_t.shape:
        raise ShapeError(f"logit shapes differ: {a_s.shape} vs {a_t.shape}")
    target = ad.softmax(detach(a_t), tau).data
    loss = -ad.mean(ad.tsum(ad.log_softmax(a_s, tau) * target, axis=1))
    return loss * (tau * tau) if scale_by_tau_sq else loss


def logits_l2(a_s: Tensor, a_t2: Tensor) -> Tensor:
    """Batch-mean squared distance to the (detached) scratch-teacher logits."""
    if a_s.shape != a_t2.shape:
        raise ShapeError(f"logit shapes differ: {a_s.shape} vs {a_t2.shape}")
    diff = a_s - detach(a_t2)
    return ad.mean(ad.tsum(diff * diff, axis=1))


def fitnet_hint_loss(student_feat: Tensor, teacher_feat: Tensor, adapter: Tensor) -> Tensor:
    """MSE between a 1x1-conv projection of student features and teacher features."""
    if student_feat.shape[0] != teacher_feat.shape[0] or student_feat.shape[2:] != teacher_feat.shape[2:]:
        raise ShapeError(
            f"hint features differ in batch or spatial size: {list(student_feat.shape)} vs {list(teacher_feat.shape)}"
        )
    if adapter.shape != (teacher_feat.shape[1], student_feat.shape[1], 1, 1):
        raise ShapeError(
            f"adapter {list(adapter.shape)} must map {student_feat.shape[1]} to {teacher_feat.shape[1]} channels"
        )
    diff = ad.conv2d(student_feat, adapter, 1, 0) - detach(teacher_feat)
    return ad.mean(diff * diff)


@dataclass
class LossBundle:
    """A composed objective plus its unweighted components.

    Components a method does not use are ``None``.
    """

    total: Tensor
    ce_student: float
    ce_scratch_teacher: float | None = None
    logits_l2: float | None = None
    attention: float | None = None
    kd_soft: float | None = None
    fitnet_hint: float | None = None
    l2_lambda: float = 0.0
    beta: float = 0.0
    kd_lambda: float = 0.0
    hint_weight: float = 0.0
    tau: float | None = None

    def weighted(self) -> dict[str, float]:
        """Each active term as it enters the total."""
        out = {"ce_s": self.ce_student}
        if self.ce_scratch_teacher is not None:
            out["ce_t2"] = self.ce_scratch_teacher
        if self.logits_l2 is not None:
            out["l2"] = self.l2_lambda * self.logits_l2
        if self.attention is not None:
            out["at"] = self.beta * self.attention
        if self.kd_soft is not None:
            out["kd"] = self.kd_lambda * self.kd_soft
        if self.fitnet_hint is not None:
            out["hint"] = self.hint_weight * self.fitnet_hint
        return out


def total_ctkd_loss(
    student_out: tuple[Tensor, Sequence[Tensor]],
    scratch_out: tuple[Tensor, Sequence[Tensor]],
    expert_taps: Sequence[Tensor],
    labels,
    l2_lambda: float = 0.5,
    beta: float = 1e3,
    p: float = 2.0,
    attention_form: str = "norm",
) -> LossBundle:
    """CE(student) + CE(scratch) + l2_lambda * logits-L2 + beta * attention transfer."""
    a_s, s_taps = student_out
    a_t2, _ = scratch_out
    ce_s = cross_entropy(a_s, labels)
    ce_t2 = cross_entropy(a_t2, labels)
    l2 = logits_l2(a_s, detach(a_t2))
    at = attention_transfer_loss(s_taps, expert_taps, p, attention_form)
    total = ce_s + ce_t2 + l2 * l2_lambda + at * beta
    return LossBundle(
        total=total,
        ce_student=ce_s.item(),
        ce_scratch_teacher=ce_t2.item(),
        logits_l2=l2.item(),
        attention=at.item(),
        l2_lambda=l2_lambda,
        beta=beta,
    )
