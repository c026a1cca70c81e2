"""Point-cloud representations, camera projection and augmentation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor, segment_max

FLIP_MODES = ("none", "x", "y", "xy")

# yaw angles evaluated at test time
TTA_YAW_ANGLES = (
    0.0,
    np.pi / 8,
    -np.pi / 8,
    np.pi / 4,
    -np.pi / 4,
    3 * np.pi / 4,
    -3 * np.pi / 4,
    7 * np.pi / 8,
    -7 * np.pi / 8,
    np.pi,
)

# training-time sampling ranges
SCALE_RANGE = (0.9, 1.1)
ROTATION_RANGE = (0.0, 2 * np.pi)
TRANSLATION_STD = 0.1


@dataclass(frozen=True)
class PointCloud:
    coords: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if len(coords) < 1:
            raise ContractError("a point cloud needs at least one point")
        if len(intensity) != len(coords):
            raise ContractError(f"{len(coords)} points but {len(intensity)} intensities")
        if not np.all(np.isfinite(coords)):
            raise ContractError("point coordinates must be finite")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "intensity", intensity)

    @property
    def n(self) -> int:
        return len(self.coords)

    def __len__(self) -> int:
        return len(self.coords)


@dataclass(frozen=True)
class Calibration:
    """Camera intrinsic ``S`` (3x4), LiDAR-to-camera extrinsic ``T`` (4x4), image extent."""

    intrinsic: np.ndarray
    extrinsic: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        s = np.asarray(self.intrinsic, dtype=np.float64)
        t = np.asarray(self.extrinsic, dtype=np.float64)
        if s.shape != (3, 4):
            raise ContractError(f"intrinsic must be 3x4, got {s.shape}")
        if t.shape == (3, 4):
            t = np.vstack([t, [0.0, 0.0, 0.0, 1.0]])
        if t.shape != (4, 4):
            raise ContractError(f"extrinsic must be 4x4, got {t.shape}")
        if self.height < 1 or self.width < 1:
            raise ContractError(f"image extent must be positive, got {self.height}x{self.width}")
        rot = t[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6, rtol=0.0):
            raise ContractError("extrinsic rotation is not orthonormal within 1e-6")
        if np.linalg.det(rot) <= 0:
            raise ContractError("extrinsic rotation has negative determinant (reflection)")
        object.__setattr__(self, "intrinsic", s)
        object.__setattr__(self, "extrinsic", t)

    @property
    def projection(self) -> np.ndarray:
        """The combined 3x4 map ``S @ T``."""
        return self.intrinsic @ self.extrinsic


@dataclass
class RangeView:
    """Spherical projection of a point cloud.

    ``point_rc`` holds continuous (row, col) coordinates in which integer values
    are pixel centres; ``point_to_pixel`` holds the integer pixel of every point
    (``-1`` for skipped points); ``pixel_to_point`` holds the index of the
    nearest point landing in each pixel (``-1`` when empty).
    """

    height: int
    width: int
    point_rc: np.ndarray
    point_to_pixel: np.ndarray
    pixel_to_point: np.ndarray
    depth: np.ndarray
    skipped: np.ndarray
    features: Optional[Tensor] = None

    @property
    def channels(self) -> int:
        return 0 if self.features is None else self.features.shape[2]

    def occupied(self) -> np.ndarray:
        """Flat indices of pixels that hold a point, in row-major order."""
        return np.flatnonzero(self.pixel_to_point.reshape(-1) >= 0)


@dataclass
class VoxelGrid:
    voxel_size: float
    occupied: np.ndarray
    point_to_voxel: np.ndarray
    features: Optional[Tensor] = None

    @property
    def n_voxels(self) -> int:
        return len(self.occupied)

    @property
    def centers(self) -> np.ndarray:
        return (self.occupied + 0.5) * self.voxel_size


@dataclass(frozen=True)
class AugmentParams:
    flip: str = "none"
    scale: float = 1.0
    rotation: float = 0.0
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.flip not in FLIP_MODES:
            raise ContractError(f"flip must be one of {FLIP_MODES}, got {self.flip!r}")
        if not self.scale > 0:
            raise ContractError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))
        if len(self.translation) != 3:
            raise ContractError("translation must have three components")

    @property
    def is_identity(self) -> bool:
        return (
            self.flip == "none"
            and self.scale == 1.0
            and self.rotation == 0.0
            and self.translation == (0.0, 0.0, 0.0)
        )

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "AugmentParams":
        """Draw training-time parameters."""
        return cls(
            flip=FLIP_MODES[rng.integers(len(FLIP_MODES))],
            scale=float(rng.uniform(*SCALE_RANGE)),
            rotation=float(rng.uniform(*ROTATION_RANGE)),
            translation=tuple(rng.normal(0.0, TRANSLATION_STD, size=3)),
        )


# -- range view ------------------------------------------------------------------


def project_to_range(
    pc: PointCloud, height: int, width: int, fov_up: float, fov_down: float
) -> RangeView:
    """Spherically project ``pc`` onto a ``height x width`` image.

    Rows span pitch linearly from ``fov_up`` (row 0) to ``fov_down`` degrees,
    columns span yaw over [-pi, pi). Points beyond the vertical field of view
    are clamped to the border rows. When several points share a pixel the
    nearest one wins (ties go to the lower index).
    """
    if height < 1 or width < 1:
        raise ContractError(f"range extent must be positive, got {height}x{width}")
    if not fov_up > fov_down:
        raise ContractError(f"fov_up ({fov_up}) must exceed fov_down ({fov_down})")
    up, down = np.radians(fov_up), np.radians(fov_down)
    x, y, z = pc.coords.T
    r = np.sqrt(x * x + y * y + z * z)
    good = r > 0
    safe_r = np.where(good, r, 1.0)
    pitch = np.arcsin(np.clip(z / safe_r, -1.0, 1.0))
    yaw = np.arctan2(y, x)
    row_f = (1.0 - (pitch - down) / (up - down)) * height
    col_f = 0.5 * (yaw / np.pi + 1.0) * width
    rows = np.clip(np.floor(row_f), 0, height - 1).astype(np.int64)
    cols = np.floor(col_f).astype(np.int64) % width

    point_rc = np.stack([row_f - 0.5, col_f - 0.5], axis=1)
    point_rc[~good] = np.nan
    point_to_pixel = np.stack([rows, cols], axis=1)
    point_to_pixel[~good] = -1

    pixel_to_point = np.full((height, width), -1, dtype=np.int64)
    depth = np.full((height, width), -1.0)
    idx = np.flatnonzero(good)
    if len(idx):
        flat = rows[idx] * width + cols[idx]
        order = np.lexsort((idx, r[idx], flat))
        flat_sorted = flat[order]
        first = np.r_[True, flat_sorted[1:] != flat_sorted[:-1]]
        winners = idx[order][first]
        pixels = flat_sorted[first]
        pixel_to_point.reshape(-1)[pixels] = winners
        depth.reshape(-1)[pixels] = r[winners]
    return RangeView(
        height=height,
        width=width,
        point_rc=point_rc,
        point_to_pixel=point_to_pixel,
        pixel_to_point=pixel_to_point,
        depth=depth,
        skipped=np.flatnonzero(~good),
    )


def range_input_features(pc: PointCloud, rv: RangeView) -> np.ndarray:
    """Per-pixel (range, x, y, z, intensity) of the winning point; zero where empty."""
    out = np.zeros((rv.height, rv.width, 5))
    flat = out.reshape(-1, 5)
    occ = rv.occupied()
    pts = rv.pixel_to_point.reshape(-1)[occ]
    flat[occ, 0] = rv.depth.reshape(-1)[occ]
    flat[occ, 1:4] = pc.coords[pts]
    flat[occ, 4] = pc.intensity[pts]
    return out


# -- voxels ----------------------------------------------------------------------


def voxel_index(coords: np.ndarray, voxel_size: float) -> tuple[np.ndarray, np.ndarray]:
    """Occupied integer voxel coordinates (lexicographically sorted) and the point-to-voxel map."""
    if not voxel_size > 0:
        raise ContractError(f"voxel_size must be positive, got {voxel_size}")
    cells = np.floor(np.asarray(coords) / voxel_size).astype(np.int64)
    occupied, inverse = np.unique(cells, axis=0, return_inverse=True)
    return occupied, inverse.reshape(-1)


def voxelize(pc: PointCloud, features, voxel_size: float) -> VoxelGrid:
    """Group points into cubic voxels and max-pool their features."""
    features = features if isinstance(features, Tensor) else Tensor(features)
    if features.shape[0] != pc.n:
        raise ContractError(f"{pc.n} points but {features.shape[0]} feature rows")
    occupied, p2v = voxel_index(pc.coords, voxel_size)
    pooled = segment_max(features, p2v, len(occupied))
    return VoxelGrid(voxel_size=float(voxel_size), occupied=occupied, point_to_voxel=p2v, features=pooled)


# -- camera ----------------------------------------------------------------------


def project_homogeneous(points: np.ndarray, calib: Calibration) -> tuple[np.ndarray, np.ndarray]:
    """Apply ``S @ T`` to Nx3 points; returns (u, v) before the in-image test and the depth."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    hom = np.hstack([pts, np.ones((len(pts), 1))])
    proj = hom @ calib.projection.T
    depth = proj[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = proj[:, :2] / depth[:, None]
    return uv, depth


def calibrate_points(points, calib: Calibration) -> np.ndarray:
    """Pixel ``(u, v)`` of every point, NaN where there is no correspondence.

    Points whose projective depth is not positive, or whose pixel falls outside
    ``[0, W) x [0, H)``, have no correspondence.
    """
    coords = points.coords if isinstance(points, PointCloud) else points
    uv, depth = project_homogeneous(coords, calib)
    ok = (depth > 0) & np.all(np.isfinite(uv), axis=1)
    ok &= (uv[:, 0] >= 0) & (uv[:, 0] < calib.width) & (uv[:, 1] >= 0) & (uv[:, 1] < calib.height)
    uv = uv.copy()
    uv[~ok] = np.nan
    return uv


def rotation_about(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit ``axis``."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def perturb_calibration(
    calib: Calibration, sigma_rot: float, sigma_trans: float, seed: int
) -> Calibration:
    """Compose the extrinsic with a random small rigid motion.

    The rotation axis is uniform on the sphere and its angle is drawn from
    ``N(0, sigma_rot)``; each translation component gets ``N(0, sigma_trans)``.
    The intrinsic matrix is left untouched.
    """
    if sigma_rot < 0 or sigma_trans < 0:
        raise ContractError("noise sigmas must be non-negative")
    if sigma_rot == 0 and sigma_trans == 0:
        return calib
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    angle = rng.normal(0.0, sigma_rot) if sigma_rot > 0 else 0.0
    shift = rng.normal(0.0, sigma_trans, size=3) if sigma_trans > 0 else np.zeros(3)
    t = calib.extrinsic.copy()
    if sigma_rot > 0:
        t[:3, :3] = orthonormalize(rotation_about(axis, angle) @ t[:3, :3])
    t[:3, 3] = t[:3, 3] + shift
    return replace(calib, extrinsic=t)


# -- augmentation ----------------------------------------------------------------


def _apply(coords: np.ndarray, params: AugmentParams) -> np.ndarray:
    c, s = np.cos(params.rotation), np.sin(params.rotation)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    out = coords @ rot.T
    out = out * params.scale
    if params.flip in ("x", "xy"):
        out[:, 0] = -out[:, 0]
    if params.flip in ("y", "xy"):
        out[:, 1] = -out[:, 1]
    return out + np.asarray(params.translation)


def augment(pc: PointCloud, params: AugmentParams) -> PointCloud:
    """Rotate about z, scale, flip, then translate.

    Flip ``"x"`` negates the x coordinate, ``"y"`` the y coordinate and
    ``"xy"`` both.
    """
    if params.is_identity:
        return pc
    return PointCloud(_apply(pc.coords, params), pc.intensity)


def tta_compose(pc: PointCloud, params: Sequence[AugmentParams]) -> list[PointCloud]:
    """One augmented copy per parameter set, with the untouched cloud always first."""
    if not params:
        raise ContractError("tta_compose needs at least one augmentation")
    params = list(params)
    if not params[0].is_identity:
        params.insert(0, AugmentParams())
    return [augment(pc, p) for p in params]


def default_tta(scales: Sequence[float] = (1.0,), flips: Sequence[str] = ("none",)) -> list[AugmentParams]:
    """Cartesian product of the test-time yaw set with the given scales and flips."""
    out = []
    for yaw in TTA_YAW_ANGLES:
        for scale in scales:
            for flip in flips:
                out.append(AugmentParams(flip=flip, scale=scale, rotation=float(yaw)))
    return out


def aggregate_tta(logit_sets: Sequence) -> np.ndarray:
    """Sum per-point logits over augmentations and take the argmax (lowest class on ties)."""
    if len(logit_sets) == 0:
        raise ContractError("aggregate_tta needs at least one logit set")
    arrays = [np.asarray(l.data if isinstance(l, Tensor) else l, dtype=np.float64) for l in logit_sets]
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ContractError(f"logit sets disagree in shape: {shape} vs {a.shape}")
    # sort before summing so the result does not depend on list order
    total = np.sort(np.stack(arrays), axis=0).sum(axis=0)
    return np.argmax(total, axis=1)
