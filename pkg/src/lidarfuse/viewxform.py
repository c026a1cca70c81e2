"""Feature transfer between point, voxel and range views.

Gathers (range->point, voxel->point) interpolate; scatters (point->voxel,
point->range) reduce with max or winner-takes-pixel, both order independent.
Grid coordinates used for interpolation put pixel/voxel centres at integers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ContractError
from .geometry import PointCloud, RangeView, VoxelGrid
from .tensor import Tensor, add, mul, reshape, segment_max, spmm, take_rows


@dataclass
class ViewBundle:
    """Per-point features of the three views, all with ``m`` rows."""

    voxel: Tensor
    range: Tensor
    point: Tensor

    def __post_init__(self):
        m = {self.voxel.shape[0], self.range.shape[0], self.point.shape[0]}
        if len(m) != 1:
            raise ContractError(f"view features disagree on point count: {sorted(m)}")

    @property
    def m(self) -> int:
        return self.point.shape[0]


def bilinear_corners(rows, cols, height: int, width: int):
    """The four corners of a bilinear lookup with zero padding.

    ``rows``/``cols`` are ndarrays or Tensors (the latter keep the weights
    differentiable with respect to the sampling location). Returns a list of
    ``(flat_index, weight, valid)`` where invalid corners carry weight zero and
    a safe index of 0.
    """
    r = rows.data if isinstance(rows, Tensor) else np.asarray(rows, dtype=np.float64)
    c = cols.data if isinstance(cols, Tensor) else np.asarray(cols, dtype=np.float64)
    r0 = np.floor(r)
    c0 = np.floor(c)
    fr = rows - r0
    fc = cols - c0
    gr = 1.0 - fr
    gc = 1.0 - fc
    corners = []
    for dr, dc, wr, wc in ((0, 0, gr, gc), (0, 1, gr, fc), (1, 0, fr, gc), (1, 1, fr, fc)):
        rr = r0 + dr
        cc = c0 + dc
        valid = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
        idx = np.where(valid, rr * width + cc, 0).astype(np.intp)
        weight = wr * wc * valid
        corners.append((idx, weight, valid))
    return corners


def bilinear_matrix(rows: np.ndarray, cols: np.ndarray, height: int, width: int) -> sp.csr_matrix:
    """Sparse ``n x (H*W)`` interpolation matrix for fixed sample locations; NaN rows are empty."""
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    n = len(rows)
    ok = np.isfinite(rows) & np.isfinite(cols)
    r = np.where(ok, rows, -10.0)
    c = np.where(ok, cols, -10.0)
    data, ri, ci = [], [], []
    for idx, weight, valid in bilinear_corners(r, c, height, width):
        keep = valid & ok
        data.append(weight[keep])
        ri.append(np.flatnonzero(keep))
        ci.append(idx[keep])
    return sp.csr_matrix(
        (np.concatenate(data), (np.concatenate(ri), np.concatenate(ci))), shape=(n, height * width)
    )


def bilinear_sample(fmap: Tensor, rows, cols) -> Tensor:
    """Zero-padded bilinear sampling of an ``H x W x C`` map at (row, col) locations."""
    h, w, c = fmap.shape
    if not isinstance(rows, Tensor) and not isinstance(cols, Tensor):
        shape = np.shape(rows)
        mat = bilinear_matrix(np.ravel(rows), np.ravel(cols), h, w)
        return reshape(spmm(mat, reshape(fmap, (h * w, c))), shape + (c,))
    shape = (rows if isinstance(rows, Tensor) else cols).shape
    flat = reshape(fmap, (h * w, c))
    out = None
    for idx, weight, _ in bilinear_corners(rows, cols, h, w):
        vals = reshape(take_rows(flat, idx.reshape(-1)), shape + (c,))
        term = mul(vals, reshape(weight, shape + (1,)))
        out = term if out is None else add(out, term)
    return out


def range_to_point(rv: RangeView, pc: PointCloud) -> Tensor:
    """Bilinearly interpolate range features at every point's continuous pixel."""
    if rv.features is None:
        raise ContractError("range view carries no features")
    if len(rv.point_rc) != pc.n:
        raise ContractError("range view was built from a different point cloud")
    return bilinear_sample(rv.features, rv.point_rc[:, 0], rv.point_rc[:, 1])


_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)


def trilinear_matrix(points: np.ndarray, occupied: np.ndarray, voxel_size: float) -> sp.csr_matrix:
    """Sparse ``n x N_v`` trilinear weights over the 8 surrounding voxel centres.

    Unoccupied corners drop out and the remaining weights are renormalised; a
    point with no occupied corner gets an empty row.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    g = points / voxel_size - 0.5
    base = np.floor(g).astype(np.int64)
    frac = g - base
    lo = occupied.min(axis=0) - 1 if len(occupied) else np.zeros(3, np.int64)
    lo = np.minimum(lo, base.min(axis=0))
    hi = np.maximum(occupied.max(axis=0) if len(occupied) else lo, base.max(axis=0) + 1)
    dims = hi - lo + 1

    def key(c):
        c = c - lo
        return (c[..., 0] * dims[1] + c[..., 1]) * dims[2] + c[..., 2]

    occ_keys = key(occupied)
    order = np.argsort(occ_keys)
    sorted_keys = occ_keys[order]
    corner_cells = base[:, None, :] + _CORNERS[None, :, :]  # n x 8 x 3
    ck = key(corner_cells)
    pos = np.searchsorted(sorted_keys, ck)
    pos_c = np.minimum(pos, len(sorted_keys) - 1)
    hit = (pos < len(sorted_keys)) & (sorted_keys[pos_c] == ck) if len(sorted_keys) else np.zeros_like(ck, bool)
    voxel = order[pos_c] if len(sorted_keys) else np.zeros_like(ck)
    w = np.prod(np.where(_CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]), axis=2)
    w = w * hit
    total = w.sum(axis=1, keepdims=True)
    w = np.divide(w, total, out=np.zeros_like(w), where=total > 0)
    keep = hit & (w > 0)
    ri = np.repeat(np.arange(n), 8).reshape(n, 8)
    return sp.csr_matrix((w[keep], (ri[keep], voxel[keep])), shape=(n, len(occupied)))


def voxel_to_point(vg: VoxelGrid, pc: PointCloud) -> Tensor:
    """Trilinearly interpolate voxel features at every point."""
    if vg.features is None:
        raise ContractError("voxel grid carries no features")
    mat = trilinear_matrix(pc.coords, vg.occupied, vg.voxel_size)
    return spmm(mat, vg.features)


def point_to_voxel(features: Tensor, vg: VoxelGrid) -> Tensor:
    """Max-pool per-point features back into their voxels."""
    if features.shape[0] != len(vg.point_to_voxel):
        raise ContractError(
            f"{features.shape[0]} feature rows but {len(vg.point_to_voxel)} mapped points"
        )
    return segment_max(features, vg.point_to_voxel, vg.n_voxels)


def scatter_matrix(rv: RangeView, n_points: int) -> sp.csr_matrix:
    """Sparse ``(H*W) x n`` selector copying each pixel's winning point."""
    occ = rv.occupied()
    pts = rv.pixel_to_point.reshape(-1)[occ]
    return sp.csr_matrix(
        (np.ones(len(occ)), (occ, pts)), shape=(rv.height * rv.width, n_points)
    )


def point_to_range(features: Tensor, rv: RangeView) -> Tensor:
    """Write each pixel's winning-point feature into an ``H x W x C`` map; empty pixels are zero."""
    n, c = features.shape
    out = spmm(scatter_matrix(rv, n), features)
    return reshape(out, (rv.height, rv.width, c))
