"""Training objective: classification, adversarial and restoration terms.

All terms are means over batch and tiles so the default weights do not
depend on batch size or grid resolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

__all__ = [
    "DivergenceError",
    "LossWeights",
    "LossBundle",
    "loss_cls",
    "loss_adv",
    "loss_loc",
    "loss_total",
    "compute_losses",
]


class DivergenceError(FloatingPointError):
    """Raised when logits or losses stop being finite."""

    def __init__(self, msg, step=None, context=None):
        self.step = step
        self.context = context or {}
        if step is not None:
            msg = f"step {step}: {msg}"
        super().__init__(msg)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossBundle:
    l_cls: torch.Tensor
    l_adv: torch.Tensor
    l_loc: torch.Tensor
    l_total: torch.Tensor

    def as_floats(self):
        return {k: float(torch.as_tensor(getattr(self, k)).detach())
                for k in ("l_cls", "l_adv", "l_loc", "l_total")}


def _as_tensor(x, like):
    if torch.is_tensor(x):
        return x.to(device=like.device, dtype=like.dtype)
    return torch.as_tensor(x, device=like.device, dtype=like.dtype)


def loss_cls(logits, y, step=None):
    """Binary cross-entropy; ``y = 1`` marks a fake image.

    ``logits`` is either one score per sample or a (B, 2) real/fake pair.
    """
    if not torch.isfinite(logits).all():
        raise DivergenceError("non-finite classifier logits", step)
    if logits.ndim == 2 and logits.shape[1] == 2:
        return F.cross_entropy(logits, torch.as_tensor(y, device=logits.device).long().reshape(-1))
    y = _as_tensor(y, logits).reshape(logits.shape)
    return F.binary_cross_entropy_with_logits(logits, y)


def loss_adv(head_logits, mark):
    """Two-sided per-tile BCE between shuffle logits and the mark matrix."""
    mark = _as_tensor(mark, head_logits)
    if mark.shape != head_logits.shape:
        raise ValueError(f"mark shape {tuple(mark.shape)} != logits shape {tuple(head_logits.shape)}")
    return F.binary_cross_entropy_with_logits(head_logits, mark)


def loss_loc(pred_coords, target):
    """Mean absolute error between predicted and true normalized coordinates."""
    target = _as_tensor(target, pred_coords)
    if target.shape != pred_coords.shape:
        raise ValueError(f"target shape {tuple(target.shape)} != prediction shape "
                         f"{tuple(pred_coords.shape)}")
    return (pred_coords - target).abs().mean()


def loss_total(l_cls, l_adv, l_loc, weights=LossWeights()):
    total = l_cls + weights.alpha * l_adv + weights.beta * l_loc
    return LossBundle(l_cls, l_adv, l_loc, total)


def compute_losses(outputs, y, mark, target, weights=LossWeights(), step=None):
    """Evaluate all terms from a :class:`~bsl.models.BSLModel` output dict."""
    bundle = loss_total(loss_cls(outputs["logits"], y, step),
                        loss_adv(outputs["adv"], mark),
                        loss_loc(outputs["coords"], target),
                        weights)
    if not torch.isfinite(bundle.l_total):
        raise DivergenceError("non-finite total loss", step, bundle.as_floats())
    return bundle
