"""Supervised objectives: asymmetric overlap (tversky) and focal terms,
combined per label group with configurable penalty weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .model import SegOutput
from .tensor import Tensor, clip, log, mean, mul, narrow, power, reshape, sub, sum_

DENOMINATORS = ("intersection", "totals")

# pathology label bits in stored masks
INFARCT_BIT = 1
EDEMA_BIT = 2


@dataclass
class LossConfig:
    beta: float = 0.7
    gamma: float = 2.0
    lambda_anatomy: float = 1.0
    lambda_infarct: float = 3.0
    lambda_edema: float = 5.0
    smooth_eps: float = 1e-6
    # "intersection" is the standard index whose denominator starts with the
    # overlap term; "totals" swaps in the raw prediction+target sums instead
    # (kept for audit, it caps the index at 0.5 for perfect predictions).
    denominator: str = "intersection"

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ConfigError(f"beta must lie in (0, 1), got {self.beta}")
        if self.gamma < 0.0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        for name in ("lambda_anatomy", "lambda_infarct", "lambda_edema"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be >= 0")
        if self.smooth_eps <= 0.0:
            raise ConfigError("smooth_eps must be positive")
        if self.denominator not in DENOMINATORS:
            raise ConfigError(f"denominator must be one of {DENOMINATORS}")


def _check_pair(pred: Tensor, target: np.ndarray, name: str) -> np.ndarray:
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"{name}: pred {pred.shape} vs target {target.shape}")
    if pred.data.min() < -1e-6 or pred.data.max() > 1.0 + 1e-6:
        raise NumericError(f"{name}: predictions outside [0, 1]")
    if not np.isin(target, (0, 1)).all():
        raise NumericError(f"{name}: target must be binary")
    return target.astype(pred.dtype)


def tversky_loss(pred: Tensor, target, config: LossConfig) -> Tensor:
    """1 - overlap index with asymmetric false-positive/false-negative
    weighting; per batch item, averaged over the batch.

    index = I / (I + (1-beta)*FP + beta*FN + eps) with I = sum(p*y),
    FP = sum(p - p*y), FN = sum(y - p*y). Higher beta penalizes false
    negatives harder.
    """
    target = _check_pair(pred, target, "tversky_loss")
    axes = tuple(range(1, pred.ndim))
    y = Tensor(target)
    py = mul(pred, y)
    inter = sum_(py, axis=axes)
    fp = sum_(sub(pred, py), axis=axes)
    fn = sum_(sub(y, py), axis=axes)
    if config.denominator == "intersection":
        denom = inter + (1.0 - config.beta) * fp + config.beta * fn + config.smooth_eps
    else:
        totals = sum_(pred, axis=axes) + sum_(y, axis=axes)
        denom = totals + (1.0 - config.beta) * fp + config.beta * fn + config.smooth_eps
    index = inter / denom
    return mean(1.0 - index)


def focal_loss(pred: Tensor, target, config: LossConfig) -> Tensor:
    """sum over pixels of -y * (1-p)^gamma * log(p), averaged over batch;
    predictions are clamped away from 0/1 before the log."""
    target = _check_pair(pred, target, "focal_loss")
    axes = tuple(range(1, pred.ndim))
    eps = config.smooth_eps
    p = clip(pred, eps, 1.0 - eps)
    y = Tensor(target)
    term = mul(mul(y, power(1.0 - p, config.gamma)), log(p))
    return mean(sum_(-term, axis=axes))


def pathology_target_planes(y_pat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Binary infarct/edema planes from bit-flag maps; a pixel carrying both
    bits counts as infarct (the more specific finding) so the two planes are
    disjoint and match the exclusive softmax head."""
    y_pat = np.asarray(y_pat)
    infarct = (y_pat & INFARCT_BIT) > 0
    edema = ((y_pat & EDEMA_BIT) > 0) & ~infarct
    return infarct, edema


def total_loss(output: SegOutput, y_ana: np.ndarray, y_pat: np.ndarray, config: LossConfig):
    """Weighted sum of per-class tversky+focal terms; background channels are
    excluded. Returns the scalar loss and a float breakdown by term."""
    ana_probs = output.anatomy_probs
    pat_probs = output.pathology_probs
    y_ana = np.asarray(y_ana)
    y_pat = np.asarray(y_pat)
    B, Ca, H, W = ana_probs.shape
    if pat_probs.shape[1] != 3:
        raise ShapeError(f"pathology head must emit 3 channels, got {pat_probs.shape[1]}")
    if y_ana.shape != (B, H, W) or y_pat.shape != (B, H, W):
        raise ShapeError(f"label maps must be {(B, H, W)}, got {y_ana.shape} / {y_pat.shape}")
    if y_ana.max(initial=0) >= Ca:
        raise ShapeError(f"anatomy label {y_ana.max()} outside head with {Ca} channels")

    def class_plane(probs, idx):
        return reshape(narrow(probs, 1, idx, 1), (B, H, W))

    breakdown: dict[str, float] = {}
    total = None

    def accumulate(tag, probs, idx, target, weight):
        nonlocal total
        t = tversky_loss(class_plane(probs, idx), target, config)
        f = focal_loss(class_plane(probs, idx), target, config)
        breakdown[f"{tag}_tversky"] = t.item()
        breakdown[f"{tag}_focal"] = f.item()
        term = weight * (t + f)
        total = term if total is None else total + term

    anatomy_names = ("myocardium", "left_ventricle", "right_ventricle")
    for j in range(1, Ca):
        tag = anatomy_names[j - 1] if j - 1 < len(anatomy_names) else f"anatomy{j}"
        accumulate(tag, ana_probs, j, (y_ana == j).astype(np.uint8), config.lambda_anatomy)
    infarct, edema = pathology_target_planes(y_pat)
    accumulate("infarct", pat_probs, 1, infarct.astype(np.uint8), config.lambda_infarct)
    accumulate("edema", pat_probs, 2, edema.astype(np.uint8), config.lambda_edema)
    breakdown["total"] = total.item()
    return total, breakdown
