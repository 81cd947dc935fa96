"""Loss functions: few-shot segmentation BCE, denoising reconstruction BCE, joint sum."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from .errors import NegativeLambda, RangeViolation, ShapeMismatch

EPS = 1e-7


@dataclass
class LossReport:
    few_shot: float
    surrogate: float
    total: float
    lam: float

    def as_record(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


def _as_tensor(x):
    return x if torch.is_tensor(x) else torch.as_tensor(x)


def _bce(prob, target):
    p = prob.clamp(EPS, 1 - EPS)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()


def few_shot_loss(pred, target) -> torch.Tensor:
    """Pixel-mean binary cross-entropy of foreground probabilities against a {0,1} mask."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return _bce(pred, target.to(pred.dtype))


def surrogate_loss(reconstruction, clean) -> torch.Tensor:
    """Pixel/channel-mean binary cross-entropy between a reconstruction and its clean image.

    Both BCE terms are used; with only the x·log ŷ term the loss is minimised by ŷ ≡ 1.
    """
    reconstruction, clean = _as_tensor(reconstruction), _as_tensor(clean)
    if reconstruction.shape != clean.shape:
        raise ShapeMismatch(f"reconstruction {tuple(reconstruction.shape)} vs clean {tuple(clean.shape)}")
    if clean.numel() and (clean.min() < 0 or clean.max() > 1):
        raise RangeViolation("clean image values must lie in [0, 1]")
    return _bce(reconstruction, clean.to(reconstruction.dtype))


def joint_loss(few, sur, lam: float = 1.0):
    if lam < 0 or math.isnan(lam):
        raise NegativeLambda(f"lambda must be >= 0, got {lam}")
    if lam == 0:
        return few
    return few + lam * sur
