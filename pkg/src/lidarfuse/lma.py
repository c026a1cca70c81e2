"""Deformable cross-attention that injects image features into LiDAR queries.

Every query owns a calibrated pixel. Per head ``m`` it predicts ``L`` pixel
offsets and attention logits from its own feature, samples the (value
projected) image features at ``pixel + offset`` with zero-padded bilinear
interpolation, mixes the samples with the softmax-normalised weights and maps
the concatenated heads through an output projection. Queries without a pixel
produce zero vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, DimensionError
from .geometry import Calibration, PointCloud, RangeView, VoxelGrid, calibrate_points
from .tensor import Tensor, concat, linear, matmul, reshape, softmax, spmm, take_rows
from .viewxform import bilinear_corners


@dataclass
class ImageFeatures:
    """``H_I x W_I x C_I`` features; ``scale`` converts input-image pixels to feature pixels."""

    features: Tensor
    scale: float = 1.0

    def __post_init__(self):
        if self.features.ndim != 3:
            raise ContractError(f"image features must be H x W x C, got {self.features.shape}")
        h, w, _ = self.features.shape
        if h < 1 or w < 1:
            raise ContractError(f"image features must be at least 1x1, got {h}x{w}")


@dataclass
class LmaParams:
    heads: int
    samples: int
    offset_weight: Tensor  # C_q x (M*L*2)
    offset_bias: Tensor  # M*L*2
    attn_weight: Tensor  # C_q x (M*L)
    attn_bias: Tensor  # M*L
    value_weight: Tensor  # C_I x C_f, head m owns columns [m*D, (m+1)*D)
    output_weight: Tensor  # C_f x C_f

    def __post_init__(self):
        c_f = self.output_weight.shape[0]
        if self.samples < 1 or self.heads < 1:
            raise ContractError("heads and samples must be positive")
        if c_f % self.heads:
            raise ContractError(f"C_f={c_f} is not divisible by {self.heads} heads")
        ml = self.heads * self.samples
        if self.offset_weight.shape[1] != 2 * ml or self.attn_weight.shape[1] != ml:
            raise DimensionError("offset/attention projections do not match heads x samples")
        if self.value_weight.shape[1] != c_f or self.output_weight.shape != (c_f, c_f):
            raise DimensionError("value/output projections do not match C_f")

    @property
    def c_query(self) -> int:
        return self.offset_weight.shape[0]

    @property
    def c_image(self) -> int:
        return self.value_weight.shape[0]

    @property
    def c_fused(self) -> int:
        return self.output_weight.shape[0]

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        c_query: int,
        c_image: int,
        c_fused: int,
        heads: int = 2,
        samples: int = 4,
        radius: float = 1.0,
    ) -> "LmaParams":
        """Zero offset/attention weights with offset biases spread on a ring around the pixel."""
        ml = heads * samples
        angles = 2 * np.pi * np.arange(ml) / ml
        reach = radius * (1 + np.tile(np.arange(samples), heads)) / samples
        ring = np.stack([np.cos(angles), np.sin(angles)], axis=1) * reach[:, None]
        return cls(
            heads=heads,
            samples=samples,
            offset_weight=Tensor(np.zeros((c_query, 2 * ml)), requires_grad=True),
            offset_bias=Tensor(ring.reshape(-1), requires_grad=True),
            attn_weight=Tensor(np.zeros((c_query, ml)), requires_grad=True),
            attn_bias=Tensor(np.zeros(ml), requires_grad=True),
            value_weight=Tensor(rng.normal(0, np.sqrt(2.0 / (c_image + c_fused)), (c_image, c_fused)), requires_grad=True),
            output_weight=Tensor(rng.normal(0, np.sqrt(1.0 / c_fused), (c_fused, c_fused)), requires_grad=True),
        )

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            prefix + "offset_weight": self.offset_weight,
            prefix + "offset_bias": self.offset_bias,
            prefix + "attn_weight": self.attn_weight,
            prefix + "attn_bias": self.attn_bias,
            prefix + "value_weight": self.value_weight,
            prefix + "output_weight": self.output_weight,
        }


def predict_offsets_weights(query: Tensor, params: LmaParams) -> tuple[Tensor, Tensor]:
    """Per-query sampling offsets ``n x M x L x 2`` (u, v in pixels) and weights ``n x M x L``."""
    if query.ndim != 2 or query.shape[1] != params.c_query:
        raise DimensionError(f"query {query.shape} does not match query width {params.c_query}")
    n = query.shape[0]
    m, l = params.heads, params.samples
    offsets = reshape(linear(query, params.offset_weight, params.offset_bias), (n, m, l, 2))
    logits = reshape(linear(query, params.attn_weight, params.attn_bias), (n, m, l))
    return offsets, softmax(logits, axis=2)


def deformable_fuse(
    query: Tensor, img: ImageFeatures, pixels: np.ndarray, params: LmaParams
) -> Tensor:
    """Image-enhanced query features ``n x C_f``.

    ``pixels`` is ``n x 2`` (u, v) in input-image pixels with NaN rows for
    queries that have no correspondence.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = query.shape[0]
    if len(pixels) != n:
        raise ContractError(f"{n} queries but {len(pixels)} calibrated pixels")
    h, w, c_img = img.features.shape
    if c_img != params.c_image:
        raise DimensionError(f"image channels {c_img} do not match value projection {params.c_image}")
    m, l = params.heads, params.samples
    c_f = params.c_fused
    d = c_f // m

    valid = np.all(np.isfinite(pixels), axis=1)
    base = np.where(valid[:, None], pixels * img.scale - 0.5, 0.0)
    offsets, attn = predict_offsets_weights(query, params)
    cols = offsets[..., 0] + base[:, 0][:, None, None]
    rows = offsets[..., 1] + base[:, 1][:, None, None]

    # value projection commutes with bilinear sampling, so project the map once
    values = matmul(reshape(img.features, (h * w, c_img)), params.value_weight)
    values = reshape(values, (h * w * m, d))
    head = np.arange(m)[None, :, None]
    sampled = None
    for idx, weight, _ in bilinear_corners(rows, cols, h, w):
        gathered = reshape(take_rows(values, (idx * m + head).reshape(-1)), (n, m, l, d))
        term = gathered * reshape(weight, (n, m, l, 1))
        sampled = term if sampled is None else sampled + term
    mixed = (sampled * reshape(attn, (n, m, l, 1))).sum(axis=2)
    out = matmul(reshape(mixed, (n, c_f)), params.output_weight)
    if not valid.all():
        out = out * valid[:, None].astype(np.float64)
    return out


def fuse_with_residual(enhanced: Tensor, original: Tensor) -> Tensor:
    """Channel concatenation ``[original | enhanced]``."""
    if enhanced.shape[0] != original.shape[0]:
        raise ContractError(f"row mismatch: enhanced {enhanced.shape} vs original {original.shape}")
    return concat([original, enhanced], axis=1)


def voxel_image_fuse(
    vg: VoxelGrid, img: ImageFeatures, calib: Calibration, params: LmaParams
) -> Tensor:
    """Enhance every voxel feature using the pixel of its voxel centre."""
    if vg.features is None:
        raise ContractError("voxel grid carries no features")
    return deformable_fuse(vg.features, img, calibrate_points(vg.centers, calib), params)


def range_pixel_queries(rv: RangeView, pc: PointCloud, calib: Calibration):
    """Occupied flat pixel ids and the calibrated pixel of each one's winning point."""
    occ = rv.occupied()
    winners = rv.pixel_to_point.reshape(-1)[occ]
    return occ, calibrate_points(pc.coords[winners], calib)


def range_image_fuse(
    rv: RangeView,
    img: ImageFeatures,
    pc: PointCloud,
    calib: Calibration,
    params: LmaParams,
    pixels: Optional[np.ndarray] = None,
) -> RangeView:
    """Enhance occupied range pixels; returns a view whose features are ``H_R x W_R x C_f``.

    ``pixels`` may carry precomputed calibrated pixels for the occupied range
    pixels (in :meth:`RangeView.occupied` order).
    """
    if rv.features is None:
        raise ContractError("range view carries no features")
    hr, wr, c = rv.features.shape
    occ = rv.occupied()
    if pixels is None:
        occ, pixels = range_pixel_queries(rv, pc, calib)
    queries = take_rows(reshape(rv.features, (hr * wr, c)), occ)
    enhanced = deformable_fuse(queries, img, pixels, params)
    scatter = sp.csr_matrix((np.ones(len(occ)), (occ, np.arange(len(occ)))), shape=(hr * wr, len(occ)))
    out = reshape(spmm(scatter, enhanced), (hr, wr, params.c_fused))
    return replace(rv, features=out)
