"""Segmentation and panoptic-head objectives."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ContractError
from .tensor import Tensor, log_softmax, tabs, take_rows

DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 100.0
DEFAULT_GAMMA = 10.0


class AllIgnoredWarning(UserWarning):
    """Every point of a batch carried the ignore label."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA
    class_weights: Optional[tuple] = None

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ContractError("loss coefficients must be non-negative")
        if self.class_weights is not None:
            cw = tuple(float(w) for w in self.class_weights)
            if any(w <= 0 for w in cw):
                raise ContractError("class weights must be positive")
            object.__setattr__(self, "class_weights", cw)


@dataclass
class LossParts:
    wce: Tensor
    lovasz: Tensor
    heatmap: Tensor
    offset: Tensor
    notes: list = field(default_factory=list)


def weighted_ce(
    logits: Tensor,
    labels: np.ndarray,
    weights: Optional[Sequence[float]] = None,
    ignore_index: Optional[int] = 0,
) -> Tensor:
    """Mean over non-ignored points of ``w[y] * -log softmax(logits)[y]``.

    Returns 0 (and warns with :class:`AllIgnoredWarning`) when every point is ignored.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    keep = np.ones(n, bool) if ignore_index is None else labels != ignore_index
    if np.any((labels[keep] < 0) | (labels[keep] >= k)):
        raise ContractError(f"labels must lie in [0, {k}) or equal ignore_index")
    if not keep.any():
        warnings.warn("all points ignored; cross-entropy defined as 0", AllIgnoredWarning, stacklevel=2)
        return logits.sum() * 0.0
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    rows = np.flatnonzero(keep)
    pick = np.zeros((n, k))
    pick[rows, labels[rows]] = w[labels[rows]] / len(rows)
    return -(log_softmax(logits, axis=1) * pick).sum()


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovász extension of the Jaccard loss w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(
    probs: Tensor,
    labels: np.ndarray,
    classes: Union[str, Sequence[int]] = "present",
    ignore_index: Optional[int] = None,
) -> Tensor:
    """Lovász-softmax surrogate of the per-class Jaccard loss, averaged over classes.

    ``classes`` is ``"present"`` (classes occurring in ``labels``), ``"all"``,
    or an explicit list. With hard 0/1 probabilities each class term equals
    ``1 - IoU`` of that class.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if ignore_index is not None:
        keep = np.flatnonzero(labels != ignore_index)
        probs = take_rows(probs, keep)
        labels = labels[keep]
    n, k = probs.shape
    if n == 0:
        return probs.sum() * 0.0
    if classes == "present":
        class_list = [c for c in range(k) if np.any(labels == c)]
    elif classes == "all":
        class_list = list(range(k))
    else:
        class_list = list(classes)
    if not class_list:
        return probs.sum() * 0.0
    # weights[i, c] multiply the sorted per-class errors; built as a dense mask
    coef = np.zeros((n, k))
    signs = np.zeros((n, k))
    offset = np.zeros((n, k))
    for c in class_list:
        fg = (labels == c).astype(np.float64)
        err = np.abs(fg - probs.data[:, c])
        order = np.argsort(-err, kind="stable")
        coef[order, c] = lovasz_grad(fg[order]) / len(class_list)
        # |fg - p| == sign * p + offset, with the sign fixed by fg
        signs[:, c] = np.where(fg > 0, -1.0, 1.0)
        offset[:, c] = fg
    errors = probs * signs + offset
    return (errors * coef).sum()


def heatmap_mse(pred: Tensor, target) -> Tensor:
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"heatmap shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


def offset_l1(pred: Tensor, target, mask: np.ndarray) -> Tensor:
    """Mean absolute error over masked cells and both offset channels; 0 for an empty mask."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"offset shapes differ: {pred.shape} vs {target.shape}")
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        return pred.sum() * 0.0
    weight = mask[..., None] * np.ones(pred.shape[-1]) / (count * pred.shape[-1])
    # masked-out cells are zeroed before abs so their values never enter the sum
    return (tabs((pred - target) * mask[..., None].astype(np.float64)) * weight).sum()


def total_loss(parts: LossParts, weights: LossWeights = LossWeights()) -> Tensor:
    return (
        parts.wce
        + parts.lovasz * weights.alpha
        + parts.heatmap * weights.beta
        + parts.offset * weights.gamma
    )
