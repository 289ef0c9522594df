"""Reconstruction and distillation losses and their combination.

Both losses reduce by mean so the mixing weight keeps its meaning when
batch size or mask count changes.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


@dataclass
class LossReport:
    """Per-step loss diagnostics. total == alpha*l1 + (1-alpha)*distill
    up to f32 rounding; when distillation is disabled alpha is reported
    as 1.0 so the identity still holds."""

    l1: float
    distill: float
    total: float
    alpha: float
    n_masked: int
    n_visible: int
    mode: str


def _l1(pred: Tensor, target: Tensor, op: str) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"{op}: shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ad.reduce_mean(ad.absolute(ad.sub(pred, target)))


def l1_masked(pred_masked: Tensor, targets_masked: Tensor) -> Tensor:
    """Mean absolute error over predicted masked tokens only."""
    return _l1(pred_masked, targets_masked, "l1_masked")


def l1_whole_image(pred_all: Tensor, targets_all: Tensor) -> Tensor:
    """Mean absolute error over every token, visible ones included."""
    return _l1(pred_all, targets_all, "l1_whole_image")


def distill_loss(q: Tensor, p: Tensor, stop_gradient: bool = True) -> Tensor:
    """Row-mean cross-entropy from teacher logits p onto student logits q.

    Rows are softmax-normalized; log is clamped at log(1e-12). With
    stop_gradient the teacher side is treated as a constant, so no
    gradient reaches the decoder branch through this loss.
    """
    if q.shape != p.shape:
        raise ShapeError(f"distill_loss: shape mismatch {tuple(q.shape)} vs {tuple(p.shape)}")
    rows = int(q.shape[0]) if q.data.ndim > 1 else 1
    q_prob = ad.softmax(q)
    p_prob = ad.softmax(p.detach() if stop_gradient else p)
    ce = ad.reduce_sum(ad.mul(p_prob, ad.log_clamped(q_prob)))
    return ad.smul(ce, -1.0 / rows)


def total_loss(l1: Tensor, distill: Tensor, alpha: float) -> Tensor:
    """alpha * l1 + (1 - alpha) * distill; exact at the endpoints."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"config field 'alpha': must lie in [0, 1], got {alpha}")
    return ad.add(ad.smul(l1, alpha), ad.smul(distill, 1.0 - alpha))


__all__ = ["LossReport", "l1_masked", "l1_whole_image", "distill_loss", "total_loss"]
