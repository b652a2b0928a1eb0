"""Training objective: pixel-domain L1 plus frequency-domain L1.

Both terms are mean-reduced over their elements so the 0.1 weighting of the
frequency term stays meaningful regardless of patch size.  The frequency
term takes the L1 of the real and imaginary spectrum components separately
(component-wise reading; the modulus variant would not be differentiable at
zero bins).
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .tensor import Tensor

FREQ_LOSS_ALPHA = 0.1


@dataclass(frozen=True)
class LossReport:
    """One evaluation of the combined objective."""

    pixel: float
    freq: float
    total: float
    alpha: float = FREQ_LOSS_ALPHA


def _check_pair(sr: Tensor, gt: Tensor, op: str) -> None:
    if sr.data.shape != gt.data.shape:
        raise T.ShapeError(f"{op} shape mismatch: {sr.data.shape} vs {gt.data.shape}")


def pixel_loss(sr: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    _check_pair(sr, gt, "pixel_loss")
    return T.mean_all(T.abs_(T.ew_sub(sr, gt)))


def freq_loss(sr: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute spectrum-component difference.

    The mean runs over both real and imaginary components of every bin, so
    a constant image difference d on an HxW plane costs exactly |d| / 2
    (the DC bin picks up d*H*W out of 2*H*W components).
    """
    _check_pair(sr, gt, "freq_loss")
    diff = T.ew_sub(sr, gt)
    re, im = T.dft2(diff)
    total = T.ew_add(T.sum_all(T.abs_(re)), T.sum_all(T.abs_(im)))
    return T.scalar_scale(total, 1.0 / (2 * sr.data.size))


def total_loss(sr: Tensor, gt: Tensor, alpha: float = FREQ_LOSS_ALPHA):
    """Combined objective; returns (loss tensor, LossReport)."""
    pix = pixel_loss(sr, gt)
    frq = freq_loss(sr, gt)
    tot = T.ew_add(pix, T.scalar_scale(frq, alpha))
    report = LossReport(pixel=pix.item(), freq=frq.item(), total=tot.item(), alpha=alpha)
    return tot, report
