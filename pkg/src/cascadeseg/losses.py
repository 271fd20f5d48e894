"""Training objectives: multi-label BCE for the router, focal + dice for the
binary segmenters, and the combined objective. Every loss accepts either raw
arrays (fast evaluation) or graph tensors (training) through one code path."""

import numpy as np
from dataclasses import dataclass

from . import autodiff as ad


PROB_CLAMP = 1e-12


class LossError(Exception):
    pass


@dataclass
class LossConfig:
    focal_alpha: float = 0.25    # focal balance alpha_f
    focal_gamma: float = 2.0
    seg_alpha: float = 1.0       # weight on focal inside the segmentation mix
    seg_beta: float = 1.0        # weight on (1 - dice)
    combine_lambda: float = 1.0
    dice_eps: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.focal_alpha < 1.0:
            raise LossError(f"focal_alpha must lie in (0,1), got "
                            f"{self.focal_alpha}")
        if self.dice_eps <= 0:
            raise LossError(f"dice_eps must be positive, got {self.dice_eps}")
        if self.combine_lambda < 0:
            raise LossError(f"combine_lambda must be nonnegative, got "
                            f"{self.combine_lambda}")


def _is_tensor(x):
    return isinstance(x, ad.Tensor)


def _clamp(p):
    if _is_tensor(p):
        return ad.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def _log(x):
    return ad.log(x) if _is_tensor(x) else np.log(x)


def _powg(x, g):
    if g == 0:
        return 1.0
    return ad.pow_const(x, g) if _is_tensor(x) else x ** g


def _sum(x):
    return ad.tsum(x) if _is_tensor(x) else np.sum(x)


def _mean(x):
    return ad.tmean(x) if _is_tensor(x) else np.mean(x)


def _value(x):
    return float(x.data) if _is_tensor(x) else float(x)


def bce_multilabel(probs, targets):
    """Mean over the batch of the summed per-class binary cross-entropies.

    probs: (B, C) existence probabilities; targets: (B, C) 0/1 presence bits.
    """
    t = np.asarray(targets.data if _is_tensor(targets) else targets,
                   dtype=np.float64)
    if not np.all((t == 0.0) | (t == 1.0)):
        raise LossError("presence targets must be 0/1")
    p = _clamp(probs)
    per = -(t * _log(p) + (1.0 - t) * _log(1.0 - p))
    if _is_tensor(per):
        return ad.tmean(ad.tsum(per, axis=1))
    return np.mean(np.sum(per, axis=1))


def focal(pred_fg, target_fg, alpha_f=0.25, gamma=2.0):
    """Focal loss over one binary foreground map (mean over pixels)."""
    m = np.asarray(target_fg.data if _is_tensor(target_fg) else target_fg,
                   dtype=np.float64)
    p = _clamp(pred_fg)
    pos = alpha_f * m * _powg(1.0 - p, gamma) * _log(p)
    neg = (1.0 - alpha_f) * (1.0 - m) * _powg(p, gamma) * _log(1.0 - p)
    return -_mean(pos + neg)


def dice(target_fg, pred_fg, eps=1e-6):
    """Soft dice similarity in (0, 1]; training minimizes 1 - dice."""
    m = np.asarray(target_fg.data if _is_tensor(target_fg) else target_fg,
                   dtype=np.float64)
    inter = _sum(pred_fg * m)
    total = _sum(pred_fg) + float(m.sum())
    if _is_tensor(inter):
        return ad.div(2.0 * inter + eps, total + eps)
    return (2.0 * inter + eps) / (total + eps)


def seg_loss(target_fg, pred_fg, cfg):
    """Per-class segmentation objective: alpha*focal + beta*(1 - dice)."""
    f = focal(pred_fg, target_fg, cfg.focal_alpha, cfg.focal_gamma)
    d = dice(target_fg, pred_fg, cfg.dice_eps)
    return cfg.seg_alpha * f + cfg.seg_beta * (1.0 - d)


def total_loss(cls_part, seg_part, combine_lambda=1.0):
    return cls_part + combine_lambda * seg_part
