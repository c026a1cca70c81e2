"""Semantic IoU and panoptic quality."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError
from .panoptic import PanopticPrediction

MATCH_IOU = 0.5


@dataclass
class MetricsReport:
    num_classes: int
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    iou: np.ndarray  # NaN for classes excluded from the mean
    miou: float
    pq: float = float("nan")
    sq: float = float("nan")
    rq: float = float("nan")
    pq_things: float = float("nan")
    sq_things: float = float("nan")
    rq_things: float = float("nan")
    pq_stuff: float = float("nan")
    sq_stuff: float = float("nan")
    rq_stuff: float = float("nan")
    pq_dagger: float = float("nan")
    per_class_pq: dict = field(default_factory=dict)  # class -> (pq, sq, rq, tp, fp, fn)

    def as_dict(self) -> dict:
        out = {"miou": self.miou}
        for c in range(self.num_classes):
            if not np.isnan(self.iou[c]):
                out[f"iou.{c}"] = float(self.iou[c])
        for name in ("pq", "sq", "rq", "pq_things", "sq_things", "rq_things",
                     "pq_stuff", "sq_stuff", "rq_stuff", "pq_dagger"):
            out[name] = getattr(self, name)
        return out


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """``K x K`` counts indexed ``[gt, pred]``."""
    return np.bincount(gt * num_classes + pred, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes
    )


def _check_labels(labels: np.ndarray, num_classes: int, name: str):
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"{name} labels must lie in [0, {num_classes})")


def miou(
    pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_index: Optional[int] = 0
) -> MetricsReport:
    """Per-class IoU over points whose ground truth is not ignored.

    Classes absent from both prediction and ground truth (and the ignore
    class) are NaN and excluded from the mean.
    """
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction has {pred.size} points, ground truth {gt.size}")
    if ignore_index is not None:
        keep = gt != ignore_index
        pred, gt = pred[keep], gt[keep]
    _check_labels(pred, num_classes, "predicted")
    _check_labels(gt, num_classes, "ground-truth")
    conf = confusion(pred, gt, num_classes)
    tp = np.diag(conf).copy()
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.full(num_classes, np.nan)
    present = denom > 0
    if ignore_index is not None and 0 <= ignore_index < num_classes:
        present[ignore_index] = False
    iou[present] = tp[present] / denom[present]
    mean = float(np.mean(iou[present])) if present.any() else float("nan")
    return MetricsReport(num_classes=num_classes, tp=tp, fp=fp, fn=fn, iou=iou, miou=mean)


def _segments(semantic, instance, cls, is_thing, min_points):
    """Map segment key -> point-index array for one class."""
    members = semantic == cls
    if not is_thing:
        idx = np.flatnonzero(members)
        return {0: idx} if len(idx) else {}
    out = {}
    for i in np.unique(instance[members & (instance > 0)]):
        idx = np.flatnonzero(members & (instance == i))
        if len(idx) >= min_points:
            out[int(i)] = idx
    return out


def _segment_stats(pred_segs: dict, gt_segs: dict, n: int):
    """Greedy-free matching: any pair with IoU > 0.5 is the unique match of both segments."""
    ious = []
    matched_pred = set()
    matched_gt = set()
    owner = np.full(n, -1, dtype=np.int64)
    pred_keys = list(pred_segs)
    for j, k in enumerate(pred_keys):
        owner[pred_segs[k]] = j
    pred_sizes = np.array([len(pred_segs[k]) for k in pred_keys])
    for gk, gidx in gt_segs.items():
        hits = owner[gidx]
        hits = hits[hits >= 0]
        if not len(hits):
            continue
        cand, inter = np.unique(hits, return_counts=True)
        for j, it in zip(cand, inter):
            union = len(gidx) + pred_sizes[j] - it
            value = it / union
            if value > MATCH_IOU:
                if j in matched_pred or gk in matched_gt:
                    raise AssertionError("IoU > 0.5 produced a non-unique match")
                matched_pred.add(j)
                matched_gt.add(gk)
                ious.append(value)
    tp = len(ious)
    return ious, tp, len(pred_segs) - tp, len(gt_segs) - tp


def panoptic_quality(
    pred: PanopticPrediction,
    gt: PanopticPrediction,
    num_classes: int,
    thing_classes: Sequence[int],
    ignore_index: Optional[int] = 0,
    min_points: int = 1,
) -> MetricsReport:
    """PQ/SQ/RQ overall and on things/stuff, plus PQ-dagger and mIoU.

    Points whose ground truth is ``ignore_index`` are removed before matching.
    Thing segments are (class, instance>0) groups with at least
    ``min_points`` points; each stuff class forms one segment. Classes with no
    segment on either side are skipped in every mean.
    """
    if pred.semantic.shape != gt.semantic.shape:
        raise ContractError("prediction and ground truth disagree on point count")
    keep = np.ones(len(gt.semantic), bool) if ignore_index is None else gt.semantic != ignore_index
    ps, pi = pred.semantic[keep], pred.instance[keep]
    gs, gi = gt.semantic[keep], gt.instance[keep]
    report = miou(ps, gs, num_classes, ignore_index=None)
    if ignore_index is not None and 0 <= ignore_index < num_classes:
        report.iou[ignore_index] = np.nan
        present = ~np.isnan(report.iou)
        report.miou = float(np.mean(report.iou[present])) if present.any() else float("nan")
    things = set(int(c) for c in thing_classes)
    n = len(gs)
    per_class = {}
    for c in range(num_classes):
        if c == ignore_index:
            continue
        is_thing = c in things
        pseg = _segments(ps, pi, c, is_thing, min_points)
        gseg = _segments(gs, gi, c, is_thing, min_points)
        ious, tp, fp, fn = _segment_stats(pseg, gseg, n)
        if tp + fp + fn == 0:
            continue
        sq = math.fsum(ious) / tp if tp else 0.0
        rq = tp / (tp + 0.5 * fp + 0.5 * fn)
        per_class[c] = (sq * rq, sq, rq, tp, fp, fn)
    report.per_class_pq = per_class

    def mean(classes, k):
        vals = [per_class[c][k] for c in classes]
        return math.fsum(vals) / len(vals) if vals else float("nan")

    all_c = sorted(per_class)
    th = [c for c in all_c if c in things]
    st = [c for c in all_c if c not in things]
    report.pq, report.sq, report.rq = mean(all_c, 0), mean(all_c, 1), mean(all_c, 2)
    report.pq_things, report.sq_things, report.rq_things = mean(th, 0), mean(th, 1), mean(th, 2)
    report.pq_stuff, report.sq_stuff, report.rq_stuff = mean(st, 0), mean(st, 1), mean(st, 2)
    dagger = [per_class[c][0] if c in things else float(np.nan_to_num(report.iou[c])) for c in all_c]
    report.pq_dagger = math.fsum(dagger) / len(dagger) if dagger else float("nan")
    for c in all_c:
        pq_c, sq_c, rq_c = per_class[c][:3]
        assert pq_c == sq_c * rq_c
    return report
