"""Imbalance-aware segmentation losses.

Every loss takes class probabilities ``probs`` (N x 3 x H x W, or 3 x H x W)
and one-hot ``labels`` of the same shape, and returns a differentiable scalar
:class:`~stormseg.tensor.Tensor`.

The overlap losses (Jaccard, Dice, focal Tversky, weighted Jaccard) first sum
their element-wise terms over every pixel of the batch per class, add the
smoothing constant to numerator and denominator, and then average (or
weight-combine) the per-class scores.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import N_CLASSES
from .tensor import Tensor, as_tensor, clip, log, mul, power, reshape, tsum

CE_CLAMP = 1e-12
DEFAULT_SMOOTHING = {"dice": 1.0}
OVERLAP_SMOOTHING = 1e-7

VARIANTS = ("jaccard", "dice", "cross_entropy", "weighted_cross_entropy", "focal_tversky",
            "weighted_jaccard")


@dataclass
class ClassWeights:
    """Per-class weights; ``normalization`` is ``"mean_one"`` (sum equals the
    class count), ``"convex"`` (sum equals one) or ``"none"`` (kept as given)."""

    w: tuple[float, ...]
    normalization: str = "mean_one"

    def __post_init__(self):
        arr = np.asarray(self.w, dtype=np.float64)
        if arr.shape != (N_CLASSES,):
            raise ValueError(f"need {N_CLASSES} class weights, got {arr.shape}")
        if not np.isfinite(arr).all() or (arr < 0).any() or arr.sum() == 0:
            raise ValueError(f"class weights must be finite, nonnegative, not all zero: {arr}")
        targets = {"mean_one": float(N_CLASSES), "convex": 1.0, "none": None}
        if self.normalization not in targets:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        target = targets[self.normalization]
        # idempotent: already-normalised weights are kept bit for bit
        if target is not None and abs(arr.sum() - target) > 1e-12 * target:
            arr = arr * (target / arr.sum())
        self.w = tuple(float(v) for v in arr)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.w)


@dataclass
class TverskyParams:
    beta: float = 0.7
    gamma: float = 0.75

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")


@dataclass
class LossSpec:
    variant: str = "jaccard"
    weights: Optional[ClassWeights] = None
    tversky: Optional[TverskyParams] = None
    smoothing: Optional[float] = None
    ce_reduction: str = "mean"  # or "sum" (unnormalised weighted CE)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}; choose from {VARIANTS}")
        weighted = self.variant.startswith("weighted_")
        if weighted and self.weights is None:
            raise ValueError(f"{self.variant} needs class weights")
        if not weighted and self.weights is not None:
            raise ValueError(f"{self.variant} takes no class weights")
        if self.variant == "focal_tversky" and self.tversky is None:
            self.tversky = TverskyParams()
        if self.variant != "focal_tversky" and self.tversky is not None:
            raise ValueError("Tversky parameters only apply to focal_tversky")
        if self.ce_reduction not in ("mean", "sum"):
            raise ValueError(f"ce_reduction must be 'mean' or 'sum', got {self.ce_reduction!r}")

    @property
    def eps(self) -> float:
        if self.smoothing is not None:
            return float(self.smoothing)
        return DEFAULT_SMOOTHING.get(self.variant, OVERLAP_SMOOTHING)

    def to_dict(self) -> dict:
        d = {"variant": self.variant}
        if self.weights is not None:
            d["weights"] = list(self.weights.w)
            d["weight_normalization"] = self.weights.normalization
        if self.tversky is not None:
            d["beta"], d["gamma"] = self.tversky.beta, self.tversky.gamma
        if self.smoothing is not None:
            d["smoothing"] = self.smoothing
        if self.ce_reduction != "mean":
            d["ce_reduction"] = self.ce_reduction
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossSpec":
        d = dict(d)
        variant = d.pop("variant")
        weights = None
        if "weights" in d:
            norm = d.pop("weight_normalization",
                         "convex" if variant == "weighted_jaccard" else "mean_one")
            weights = ClassWeights(tuple(d.pop("weights")), norm)
        tversky = None
        if "beta" in d or "gamma" in d:
            tversky = TverskyParams(d.pop("beta", 0.7), d.pop("gamma", 0.75))
        spec = cls(variant, weights, tversky, d.pop("smoothing", None), d.pop("ce_reduction", "mean"))
        if d:
            raise ValueError(f"unknown loss keys {sorted(d)}")
        return spec


def one_hot(labels, class_count: int = N_CLASSES) -> np.ndarray:
    """(..., H, W) integer labels -> (..., class_count, H, W) float one-hot."""
    lab = np.asarray(labels)
    bad = (lab < 0) | (lab >= class_count)
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"label {lab[where]} at pixel {where} is outside [0, {class_count})")
    out = (lab[..., None, :, :] == np.arange(class_count)[:, None, None]).astype(np.float64)
    return out


def _prepare(probs, labels):
    probs = as_tensor(probs)
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels, dtype=np.float64)
    if probs.shape != y.shape:
        raise ValueError(f"probs shape {probs.shape} does not match labels shape {y.shape}")
    if probs.ndim == 3:
        probs = reshape(probs, (1,) + probs.shape)
        y = y[None]
    if probs.ndim != 4:
        raise ValueError(f"expected N x C x H x W probabilities, got {probs.shape}")
    return probs, y


def _class_sums(probs: Tensor, y: np.ndarray):
    """Per-class pooled sums: intersection, prediction mass, truth mass."""
    axes = (0, 2, 3)
    inter = tsum(mul(probs, y), axes)
    pred = tsum(probs, axes)
    truth = y.sum(axis=axes)
    return inter, pred, truth


def soft_iou(probs, labels, eps: float = OVERLAP_SMOOTHING) -> Tensor:
    probs, y = _prepare(probs, labels)
    inter, pred, truth = _class_sums(probs, y)
    return (inter + eps) / (pred + truth - inter + eps)


def jaccard_loss(probs, labels, spec: LossSpec | None = None) -> Tensor:
    eps = spec.eps if spec is not None else OVERLAP_SMOOTHING
    return 1.0 - soft_iou(probs, labels, eps).mean()


def dice_loss(probs, labels, spec: LossSpec | None = None) -> Tensor:
    s = spec.eps if spec is not None else DEFAULT_SMOOTHING["dice"]
    probs, y = _prepare(probs, labels)
    inter, pred, truth = _class_sums(probs, y)
    return 1.0 - ((2.0 * inter + s) / (pred + truth + s)).mean()


def cross_entropy_loss(probs, labels, spec: LossSpec | None = None) -> Tensor:
    """Mean over pixels of ``-log p_true`` with ``p`` clamped to ``[1e-12, 1]``."""
    probs, y = _prepare(probs, labels)
    n_pix = y.shape[0] * y.shape[2] * y.shape[3]
    nll = -tsum(mul(log(clip(probs, CE_CLAMP, 1.0)), y))
    return nll * (1.0 / n_pix)


def weighted_cross_entropy_loss(probs, labels, spec: LossSpec) -> Tensor:
    """``-sum w_c y log p`` divided by the summed pixel weights (``ce_reduction="mean"``)
    or left as a plain sum (``"sum"``)."""
    probs, y = _prepare(probs, labels)
    w = spec.weights.as_array()[None, :, None, None]
    wy = w * y
    total = -tsum(mul(log(clip(probs, CE_CLAMP, 1.0)), wy))
    if spec.ce_reduction == "sum":
        return total
    denom = float(wy.sum())
    if denom == 0:
        return total * 0.0
    return total * (1.0 / denom)


def tversky_index(probs, labels, beta: float, eps: float) -> Tensor:
    probs, y = _prepare(probs, labels)
    inter, pred, truth = _class_sums(probs, y)
    fp = pred - inter        # sum (1 - y) p
    fn = truth - inter       # sum y (1 - p)
    return (inter + eps) / (inter + beta * fp + (1.0 - beta) * fn + eps)


def focal_tversky_loss(probs, labels, spec: LossSpec) -> Tensor:
    tp = spec.tversky
    ti = tversky_index(probs, labels, tp.beta, spec.eps)
    return power(1.0 - ti, tp.gamma).mean()


def weighted_jaccard_loss(probs, labels, spec: LossSpec) -> Tensor:
    """``1 - sum_c w_c IoU_c`` with the weights rescaled to sum to one."""
    w = spec.weights.as_array()
    w = w / w.sum()
    return 1.0 - tsum(mul(soft_iou(probs, labels, spec.eps), w))


_DISPATCH = {
    "jaccard": jaccard_loss,
    "dice": dice_loss,
    "cross_entropy": cross_entropy_loss,
    "weighted_cross_entropy": weighted_cross_entropy_loss,
    "focal_tversky": focal_tversky_loss,
    "weighted_jaccard": weighted_jaccard_loss,
}


def compute_loss(probs, labels, spec: LossSpec) -> Tensor:
    return _DISPATCH[spec.variant](probs, labels, spec)
