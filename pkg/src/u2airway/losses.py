"""Dice loss, its deep-supervision aggregate, and the binary Dice coefficient."""
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .tensor import Tensor, channel_mean


@dataclass(frozen=True)
class LossWeights:
    side: tuple = (1.0,) * 6
    fuse: float = 1.0

    def __post_init__(self):
        side = tuple(float(w) for w in self.side)
        object.__setattr__(self, "side", side)
        object.__setattr__(self, "fuse", float(self.fuse))
        if len(side) != 6:
            raise ValidationError(f"need 6 side weights, got {len(side)}", field="w_side")
        if not all(np.isfinite(side)) or not np.isfinite(self.fuse):
            raise ValidationError("loss weights must be finite", field="w_side")


def _per_sample_axes(ndim):
    return tuple(range(1, ndim)) if ndim > 1 else None


def dice_loss(pred, gt, eps=1.0):
    """1 - (2*sum(g*p) + eps) / (sum(g^2) + sum(p^2) + eps).

    Sums run over everything but the leading batch axis and the per-sample
    losses are averaged; a 1-D input is treated as a single sample.
    """
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    g = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=pred.dtype))
    if pred.shape != g.shape:
        raise ValidationError(f"dice_loss: shape mismatch {pred.shape} vs {g.shape}")
    axes = _per_sample_axes(pred.ndim)
    inter = (pred * g).sum(axis=axes)
    denom = (g * g).sum(axis=axes) + (pred * pred).sum(axis=axes) + eps
    per_sample = 1.0 - (inter * 2.0 + eps) / denom
    return per_sample.mean()


def reduce_side(m):
    """Multi-channel side maps are collapsed by channel mean before the loss."""
    return m if m.ndim < 2 or m.shape[1] == 1 else channel_mean(m)


def deep_supervision_loss(maps, gt, weights=None, eps=1.0):
    """Weighted sum of Dice losses over the six side maps and the fused map."""
    weights = weights or LossWeights()
    gt = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=maps.fuse.dtype))
    total = None
    for w, m in list(zip(weights.side, maps.side)) + [(weights.fuse, maps.fuse)]:
        m = reduce_side(m)
        if m.shape != gt.shape:
            raise ValidationError(f"deep_supervision_loss: map shape {m.shape} != ground truth {gt.shape}")
        term = dice_loss(m, gt, eps) * w
        total = term if total is None else total + term
    return total


def dsc(pred_mask, gt_mask):
    """2|A&B| / (|A|+|B|); 1.0 when both masks are empty."""
    a = np.asarray(pred_mask)
    b = np.asarray(gt_mask)
    if a.shape != b.shape:
        raise ValidationError(f"dsc: shape mismatch {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom
