"""Bird's-eye-view centre/offset targets and bottom-up instance grouping."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import maximum_filter

from .errors import ContractError


class NoCentersWarning(UserWarning):
    """Grouping found no instance centre; thing points fell back to stuff."""


@dataclass(frozen=True)
class BevConfig:
    """Grid of ``height x width`` cells of ``cell`` metres; rows index x, columns index y."""

    height: int = 480
    width: int = 360
    cell: float = 0.2
    x_min: float = -48.0
    y_min: float = -36.0
    sigma: float = 3.0
    threshold: float = 0.1
    nms_kernel: int = 5

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or not self.cell > 0:
            raise ContractError("BEV extent and cell size must be positive")
        if self.nms_kernel < 1 or self.nms_kernel % 2 == 0:
            raise ContractError("nms_kernel must be a positive odd integer")

    def cell_of(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(row, col, inside) of each XY position."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        row = np.floor((xy[:, 0] - self.x_min) / self.cell).astype(np.int64)
        col = np.floor((xy[:, 1] - self.y_min) / self.cell).astype(np.int64)
        inside = (row >= 0) & (row < self.height) & (col >= 0) & (col < self.width)
        return row, col, inside

    def cell_centers(self) -> np.ndarray:
        """``H x W x 2`` XY coordinates of cell centres."""
        xs = self.x_min + (np.arange(self.height) + 0.5) * self.cell
        ys = self.y_min + (np.arange(self.width) + 0.5) * self.cell
        return np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)


@dataclass
class PanopticTarget:
    heatmap: np.ndarray  # H x W in [0, 1]
    offsets: np.ndarray  # H x W x 2, metres toward the owning mass centre
    foreground: np.ndarray  # H x W bool
    centers: np.ndarray  # K x 2 XY mass centres
    bev: BevConfig


@dataclass
class PanopticPrediction:
    semantic: np.ndarray
    instance: np.ndarray
    flags: list = field(default_factory=list)

    def __post_init__(self):
        self.semantic = np.asarray(self.semantic, dtype=np.int64)
        self.instance = np.asarray(self.instance, dtype=np.int64)
        if self.semantic.shape != self.instance.shape:
            raise ContractError("semantic and instance arrays must have equal length")


def render_gaussians(cells: np.ndarray, bev: BevConfig) -> np.ndarray:
    """Max over instances of ``exp(-d^2 / 2 sigma^2)``, ``d`` in cells from each centre cell."""
    heat = np.zeros((bev.height, bev.width))
    rr = np.arange(bev.height)[:, None]
    cc = np.arange(bev.width)[None, :]
    for r, c in cells:
        d2 = (rr - r) ** 2 + (cc - c) ** 2
        np.maximum(heat, np.exp(-d2 / (2.0 * bev.sigma**2)), out=heat)
    return heat


def build_targets(
    coords: np.ndarray,
    semantic: np.ndarray,
    instance: np.ndarray,
    thing_classes: Sequence[int],
    bev: BevConfig = BevConfig(),
) -> PanopticTarget:
    """Centre heatmap and offset map from ground-truth thing instances.

    A cell holding points of several instances takes the offset of the
    instance with most points there (lowest id on ties).
    """
    coords = np.asarray(coords, dtype=np.float64)
    semantic = np.asarray(semantic)
    instance = np.asarray(instance)
    things = np.isin(semantic, list(thing_classes)) & (instance > 0)
    row, col, inside = bev.cell_of(coords[:, :2])
    ids = np.unique(instance[things])
    centers = np.array([coords[things & (instance == i), :2].mean(axis=0) for i in ids]).reshape(-1, 2)
    crow, ccol, cin = bev.cell_of(centers)
    heat = render_gaussians(np.stack([crow[cin], ccol[cin]], axis=1), bev)

    offsets = np.zeros((bev.height, bev.width, 2))
    fg = np.zeros((bev.height, bev.width), dtype=bool)
    sel = things & inside
    if sel.any():
        flat = row[sel] * bev.width + col[sel]
        owner = np.searchsorted(ids, instance[sel])
        pairs, counts = np.unique(np.stack([flat, owner], axis=1), axis=0, return_counts=True)
        # most points first, then lowest instance id
        order = np.lexsort((pairs[:, 1], -counts, pairs[:, 0]))
        pairs = pairs[order]
        first = np.r_[True, pairs[1:, 0] != pairs[:-1, 0]]
        cells, owners = pairs[first, 0], pairs[first, 1]
        cell_xy = bev.cell_centers().reshape(-1, 2)[cells]
        offsets.reshape(-1, 2)[cells] = centers[owners] - cell_xy
        fg.reshape(-1)[cells] = True
    return PanopticTarget(heatmap=heat, offsets=offsets, foreground=fg, centers=centers, bev=bev)


def find_centers(heatmap: np.ndarray, bev: BevConfig) -> np.ndarray:
    """(row, col) of local maxima above threshold within an ``nms_kernel`` window, row-major order."""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if not np.all(np.isfinite(heatmap)):
        raise ContractError("heatmap must be finite")
    pooled = maximum_filter(heatmap, size=bev.nms_kernel, mode="constant", cval=-np.inf)
    peaks = (heatmap == pooled) & (heatmap >= bev.threshold)
    return np.argwhere(peaks)


def group_instances(
    heatmap: np.ndarray,
    offsets: np.ndarray,
    coords: np.ndarray,
    semantic: np.ndarray,
    thing_classes: Sequence[int],
    bev: BevConfig = BevConfig(),
    min_points: int = 50,
) -> PanopticPrediction:
    """Class-agnostic grouping of thing points around predicted centres.

    Each foreground cell (one holding a thing point) is shifted by its offset
    and joined to the nearest centre; points inherit their cell's instance.
    Instances with fewer than ``min_points`` points are dissolved (id 0).
    """
    semantic = np.asarray(semantic, dtype=np.int64)
    coords = np.asarray(coords, dtype=np.float64)
    instance = np.zeros(len(semantic), dtype=np.int64)
    pred = PanopticPrediction(semantic.copy(), instance)
    things = np.isin(semantic, list(thing_classes))
    peaks = find_centers(heatmap, bev)
    if not things.any():
        return pred
    if len(peaks) == 0:
        warnings.warn("no instance centres found", NoCentersWarning, stacklevel=2)
        pred.flags.append("no_centers")
        return pred
    grid = bev.cell_centers()
    center_xy = grid[peaks[:, 0], peaks[:, 1]]
    row, col, inside = bev.cell_of(coords[:, :2])
    sel = np.flatnonzero(things & inside)
    cells = np.unique(row[sel] * bev.width + col[sel])
    shifted = grid.reshape(-1, 2)[cells] + np.asarray(offsets, dtype=np.float64).reshape(-1, 2)[cells]
    d2 = ((shifted[:, None, :] - center_xy[None, :, :]) ** 2).sum(axis=2)
    cell_owner = np.argmin(d2, axis=1) + 1
    point_cells = row[sel] * bev.width + col[sel]
    instance[sel] = cell_owner[np.searchsorted(cells, point_cells)]

    ids, counts = np.unique(instance[instance > 0], return_counts=True)
    small = ids[counts < min_points]
    instance[np.isin(instance, small)] = 0
    # compact ids to 1..K in order of first appearance of the centre
    kept = np.unique(instance[instance > 0])
    remap = np.zeros(cell_owner.max() + 1, dtype=np.int64)
    remap[kept] = np.arange(1, len(kept) + 1)
    pred.instance = remap[instance]
    return pred


def majority_vote(prediction: PanopticPrediction, semantic_pred: np.ndarray) -> PanopticPrediction:
    """Give every instance the most frequent predicted class of its points (lowest on ties)."""
    semantic_pred = np.asarray(semantic_pred, dtype=np.int64)
    out = prediction.semantic.copy()
    for i in np.unique(prediction.instance):
        if i == 0:
            continue
        members = prediction.instance == i
        out[members] = np.argmax(np.bincount(semantic_pred[members]))
    return PanopticPrediction(out, prediction.instance.copy(), list(prediction.flags))
