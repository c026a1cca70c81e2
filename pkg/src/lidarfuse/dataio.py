"""Readers and writers for scan, label, calibration, config, checkpoint and image files.

Binary layouts (all little-endian):

* ``.bin`` points: float32 x 4 per point (x, y, z, intensity).
* ``.label``: uint32 per point; low 16 bits semantic class, high 16 bits instance id.
* checkpoint: magic ``b"LFCK"``, uint32 version, uint32 tensor count, then per
  tensor uint16 name length, UTF-8 name, uint8 ndim, uint32 x ndim extents and
  float64 data in row-major order.
* ``.rgb`` image: uint32 width, uint32 height, then uint8 x 3 per pixel, row-major.

Calibration text holds ``P2:`` (12 floats, 3x4 intrinsic) and ``Tr:`` (12
floats, 3x4 LiDAR-to-camera extrinsic) lines plus an optional
``image_size: <width> <height>``; other keys are ignored. Config text holds
``key = value`` lines with ``#`` comments.
"""

from __future__ import annotations

import dataclasses
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .geometry import Calibration, PointCloud
from .tensor import Tensor

POINT_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u4")
CHECKPOINT_MAGIC = b"LFCK"
CHECKPOINT_VERSION = 1
ENV_PREFIX = "UNISEG_"


# -- points and labels -------------------------------------------------------------


def read_points(path) -> PointCloud:
    raw = Path(path).read_bytes()
    usable = len(raw) - len(raw) % 16
    if len(raw) % 16:
        raise FormatError(
            f"{path}: {len(raw)} bytes is not a multiple of 16; "
            f"truncated record at byte offset {usable}"
        )
    if not raw:
        raise FormatError(f"{path}: empty point file")
    arr = np.frombuffer(raw, dtype=POINT_DTYPE).reshape(-1, 4)
    return PointCloud(arr[:, :3].astype(np.float64), arr[:, 3].astype(np.float64))


def write_points(path, pc: PointCloud) -> None:
    arr = np.hstack([pc.coords, pc.intensity[:, None]]).astype(POINT_DTYPE)
    Path(path).write_bytes(arr.tobytes())


@dataclass(frozen=True)
class LabelRecord:
    raw: int

    @property
    def semantic(self) -> int:
        return self.raw & 0xFFFF

    @property
    def instance(self) -> int:
        return self.raw >> 16

    @classmethod
    def encode(cls, semantic: int, instance: int) -> "LabelRecord":
        if not (0 <= semantic <= 0xFFFF and 0 <= instance <= 0xFFFF):
            raise ContractError("semantic and instance must fit in 16 bits")
        return cls((instance << 16) | semantic)


def read_labels(path) -> np.ndarray:
    """Raw uint32 labels; split them with :func:`split_labels`."""
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise FormatError(
            f"{path}: {len(raw)} bytes is not a multiple of 4; "
            f"truncated record at byte offset {len(raw) - len(raw) % 4}"
        )
    return np.frombuffer(raw, dtype=LABEL_DTYPE).astype(np.uint32)


def write_labels(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFFFFFF):
        raise ContractError("labels must fit in uint32")
    Path(path).write_bytes(labels.astype(LABEL_DTYPE).tobytes())


def split_labels(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    raw = np.asarray(raw, dtype=np.uint32)
    return (raw & 0xFFFF).astype(np.int64), (raw >> 16).astype(np.int64)


def join_labels(semantic, instance) -> np.ndarray:
    semantic = np.asarray(semantic, dtype=np.int64)
    instance = np.asarray(instance, dtype=np.int64)
    if np.any((semantic < 0) | (semantic > 0xFFFF) | (instance < 0) | (instance > 0xFFFF)):
        raise ContractError("semantic and instance must fit in 16 bits")
    return ((instance << 16) | semantic).astype(np.uint32)


# -- calibration -------------------------------------------------------------------


def read_calibration(path, image_size: Optional[tuple[int, int]] = None) -> Calibration:
    """Parse a KITTI-style calibration file; ``image_size`` is (width, height) if not in the file."""
    entries = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key: values'")
        key, _, rest = line.partition(":")
        try:
            entries[key.strip()] = [float(v) for v in rest.split()]
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: non-numeric value for {key.strip()!r}") from exc
    for key in ("P2", "Tr"):
        if key not in entries:
            raise ConfigError(f"{path}: missing {key!r}")
        if len(entries[key]) != 12:
            raise ConfigError(f"{path}: {key!r} needs 12 values, got {len(entries[key])}")
    if "image_size" in entries:
        if len(entries["image_size"]) != 2:
            raise ConfigError(f"{path}: image_size needs width and height")
        width, height = (int(v) for v in entries["image_size"])
    elif image_size is not None:
        width, height = image_size
    else:
        raise ConfigError(f"{path}: missing 'image_size' and no default given")
    s = np.array(entries["P2"]).reshape(3, 4)
    t = np.vstack([np.array(entries["Tr"]).reshape(3, 4), [0.0, 0.0, 0.0, 1.0]])
    try:
        return Calibration(s, t, height=height, width=width)
    except ContractError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def write_calibration(path, calib: Calibration) -> None:
    fmt = lambda a: " ".join(repr(float(v)) for v in np.ravel(a))  # noqa: E731
    text = (
        f"P2: {fmt(calib.intrinsic)}\n"
        f"Tr: {fmt(calib.extrinsic[:3])}\n"
        f"image_size: {calib.width} {calib.height}\n"
    )
    Path(path).write_text(text, encoding="utf-8")


# -- run configuration -------------------------------------------------------------


@dataclass
class Config:
    # geometry
    voxel_size: float = 0.05
    range_height: int = 64
    range_width: int = 2048
    fov_up: float = 3.0
    fov_down: float = -25.0
    # network widths
    channels: int = 16
    image_channels: int = 8
    heads: int = 2
    samples: int = 4
    lma_radius: float = 2.0
    lva_stages: int = 2
    # labels
    num_classes: int = 20
    ignore_index: int = 0
    thing_classes: tuple = (1, 2, 3, 4, 5, 6, 7, 8)
    class_weights: tuple = ()
    # objective
    alpha: float = 1.0
    beta: float = 100.0
    gamma: float = 10.0
    # panoptic head
    bev_height: int = 480
    bev_width: int = 360
    bev_cell: float = 0.2
    bev_x_min: float = -48.0
    bev_y_min: float = -36.0
    heatmap_sigma: float = 3.0
    center_threshold: float = 0.1
    nms_kernel: int = 5
    min_points: int = 50
    # optimisation
    lr: float = 0.12
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 10.0
    steps: int = 500
    warmup_steps: int = 0
    cosine: bool = False
    # synthetic scenes and experiments
    scenes: int = 10
    eval_scenes: int = 4
    image_height: int = 64
    image_width: int = 192
    points_per_scene: int = 2048
    color_noise: float = 0.03
    calib_sigma_rot: float = 0.0
    noise_draws: int = 3
    seed: int = 0

    def with_overrides(self, values: Mapping[str, object]) -> "Config":
        return dataclasses.replace(self, **values)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(Config)}


def _convert(key: str, text: str, source: str):
    kind = _FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind in ("int", int):
            return int(text)
        if kind in ("float", float):
            return float(text)
        if kind in ("bool", bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in ("tuple", tuple):
            if not text:
                return ()
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if all(p.lstrip("-").isdigit() for p in parts):
                return tuple(int(p) for p in parts)
            return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"{source}: key {key!r} expects {kind}, got {text!r}") from exc
    raise ConfigError(f"{source}: unsupported type for {key!r}")


def parse_config_text(text: str, base: Optional[Config] = None, source: str = "<config>") -> Config:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, value, f"{source}:{lineno}")
    return (base or Config()).with_overrides(values)


def parse_config(path, base: Optional[Config] = None) -> Config:
    """Load a ``key = value`` config on top of ``base`` (defaults when omitted)."""
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base, str(path))


def env_overrides(config: Config, environ: Optional[Mapping[str, str]] = None) -> Config:
    """Apply ``UNISEG_<KEY>`` environment variables."""
    environ = os.environ if environ is None else environ
    values = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"environment variable {name} names unknown key {key!r}")
        values[key] = _convert(key, value, name)
    return config.with_overrides(values)


def format_config(config: Config) -> str:
    lines = []
    for f in dataclasses.fields(Config):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# -- checkpoints -------------------------------------------------------------------


def write_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated checkpoint at byte offset {pos} (need {n} bytes)")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0")
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} at byte offset 4")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes at byte offset {pos}")
    return out


# -- images ------------------------------------------------------------------------


def write_rgb(path, image: np.ndarray) -> None:
    """Write an ``H x W x 3`` image with values in [0, 1] (or uint8)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractError(f"expected H x W x 3 image, got {image.shape}")
    if image.dtype != np.uint8:
        image = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = image.shape
    Path(path).write_bytes(struct.pack("<II", w, h) + image.tobytes())


def read_rgb(path) -> np.ndarray:
    """Read an image as uint8 ``H x W x 3``."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)}")
    w, h = struct.unpack("<II", raw[:8])
    expected = 8 + w * h * 3
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {w}x{h}, got {len(raw)} (offset {min(len(raw), expected)})")
    return np.frombuffer(raw[8:], dtype=np.uint8).reshape(h, w, 3).copy()
