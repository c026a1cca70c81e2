"""Deterministic synthetic LiDAR + camera scenes.

A scene is a flat ground patch (stuff class 1) in front of a sensor mounted
``SENSOR_HEIGHT`` metres above it, plus box
and cylinder objects of thing classes ``2..K-1``. Shape and size are drawn
independently of the class, so only the rendered colour identifies an
object's class. Objects sit in separate azimuth sectors and the ground behind
each object is removed, which keeps the camera view free of cross-object
occlusion.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import dataio
from .errors import ContractError
from .geometry import Calibration, PointCloud, calibrate_points

GROUND_CLASS = 1
BACKGROUND = 0.5
SENSOR_HEIGHT = 1.73


def default_palette(num_classes: int) -> np.ndarray:
    """Distinct saturated colours; class 0 is black, the ground class green."""
    pal = np.zeros((num_classes, 3))
    if num_classes > 1:
        pal[GROUND_CLASS] = (0.15, 0.65, 0.2)
    things = num_classes - 2
    for j in range(things):
        hue = (j / max(things, 1) + 0.98) % 1.0
        pal[2 + j] = colorsys.hsv_to_rgb(hue, 0.9, 0.95)
    return pal


@dataclass(frozen=True)
class SceneSpec:
    num_classes: int = 4
    instances: tuple = (3, 6)  # total thing instances per scene, inclusive range
    points_per_instance: tuple = (80, 220)
    ground_points: int = 700
    max_points: int = 2048
    range_extent: tuple = (6.0, 18.0)  # metres from the sensor along x
    azimuth_extent: float = 0.6  # half-angle (radians) of the object placement fan
    min_separation: float = 4.0  # metres between instance centres
    image_height: int = 64
    image_width: int = 192
    hfov: float = np.radians(80.0)
    color_noise: float = 0.03
    seed: int = 0
    palette: Optional[tuple] = None

    def __post_init__(self):
        if self.num_classes < 3:
            raise ContractError("need at least ground and one thing class (num_classes >= 3)")
        if self.max_points < 2:
            raise ContractError("max_points must be at least 2")
        if self.range_extent[0] <= 0 or self.range_extent[1] <= self.range_extent[0]:
            raise ContractError("range_extent must be positive and increasing")

    def colors(self) -> np.ndarray:
        if self.palette is not None:
            return np.asarray(self.palette, dtype=np.float64).reshape(self.num_classes, 3)
        return default_palette(self.num_classes)

    @property
    def thing_classes(self) -> tuple:
        return tuple(range(2, self.num_classes))


@dataclass
class Scene:
    points: PointCloud
    semantic: np.ndarray
    instance: np.ndarray
    image: np.ndarray  # H x W x 3 in [0, 1]
    calib: Calibration
    thing_classes: tuple = field(default=())

    @property
    def n(self) -> int:
        return self.points.n


def default_calibration(height: int, width: int, hfov: float = np.radians(80.0)) -> Calibration:
    """Forward-looking pinhole camera slightly offset from the LiDAR origin."""
    f = 0.5 * width / np.tan(0.5 * hfov)
    s = np.array([[f, 0.0, width / 2.0, 0.0], [0.0, f, height / 2.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
    # LiDAR (x fwd, y left, z up) -> camera (x right, y down, z fwd)
    t = np.eye(4)
    t[:3, :3] = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    t[:3, 3] = (0.0, -0.1, -0.05)
    return Calibration(s, t, height=height, width=width)


def _box_surface(rng, n, size):
    """Uniform samples on the side and top faces of an axis-aligned box centred at the origin."""
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u, v = rng.uniform(-0.5, 0.5, (2, n))
    pts = np.zeros((n, 3))
    for f_id, (ax, sign) in enumerate(((0, -1), (0, 1), (1, -1), (1, 1), (2, 1))):
        m = face == f_id
        others = [a for a in range(3) if a != ax]
        pts[m, ax] = sign * 0.5 * size[ax]
        pts[m, others[0]] = u[m] * size[others[0]]
        pts[m, others[1]] = v[m] * size[others[1]]
    pts[:, 2] += 0.5 * sz
    return pts


def _cylinder_surface(rng, n, radius, height):
    theta = rng.uniform(0, 2 * np.pi, n)
    top = rng.uniform(size=n) < (radius / (radius + 2 * height))
    r = np.where(top, radius * np.sqrt(rng.uniform(size=n)), radius)
    z = np.where(top, height, rng.uniform(0, height, n))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def generate_scene(spec: SceneSpec = SceneSpec()) -> Scene:
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.instances
    n_inst = int(rng.integers(lo, hi + 1))
    things = spec.thing_classes

    centers = []
    radii = []
    attempts = 0
    while len(centers) < n_inst and attempts < 1000:
        attempts += 1
        dist = rng.uniform(*spec.range_extent)
        az = rng.uniform(-spec.azimuth_extent, spec.azimuth_extent)
        c = np.array([dist * np.cos(az), dist * np.sin(az)])
        rad = rng.uniform(0.5, 1.0)
        ok = all(
            np.linalg.norm(c - o) >= spec.min_separation + rad + ro
            and abs(np.arctan2(c[1], c[0]) - np.arctan2(o[1], o[0]))
            > np.arcsin(min(1.0, (rad + 0.3) / dist)) + np.arcsin(min(1.0, (ro + 0.3) / np.linalg.norm(o)))
            for o, ro in zip(centers, radii)
        )
        if ok:
            centers.append(c)
            radii.append(rad)

    coords, sem, inst = [], [], []
    n_ground = min(spec.ground_points, spec.max_points // 2)
    budget = spec.max_points - n_ground
    for i, (c, rad) in enumerate(zip(centers, radii), start=1):
        cls = int(things[rng.integers(len(things))])
        n = int(rng.integers(spec.points_per_instance[0], spec.points_per_instance[1] + 1))
        n = max(0, min(n, budget))
        budget -= n
        if n == 0:
            break
        height = rng.uniform(1.0, 2.0)
        if rng.uniform() < 0.5:
            side = rad * np.sqrt(2.0)
            pts = _box_surface(rng, n, (side, side, height))
        else:
            pts = _cylinder_surface(rng, n, rad, height)
        pts[:, :2] += c
        coords.append(pts)
        sem.append(np.full(n, cls))
        inst.append(np.full(n, i))

    # ground in the camera fan, minus object footprints and their shadows
    g = []
    need = n_ground
    while need > 0:
        cand_n = need * 3
        x = rng.uniform(4.0, spec.range_extent[1] + 4.0, cand_n)
        y = x * np.tan(rng.uniform(-0.5, 0.5, cand_n) * spec.hfov * 0.95)
        keep = np.ones(cand_n, bool)
        az = np.arctan2(y, x)
        dist = np.hypot(x, y)
        for c, rad in zip(centers, radii):
            cd = np.linalg.norm(c)
            half = np.arcsin(min(1.0, (rad + 0.3) / cd))
            shadow = (np.abs(az - np.arctan2(c[1], c[0])) < half) & (dist > cd - rad - 0.3)
            keep &= ~shadow
        cand = np.stack([x, y, np.zeros(cand_n)], axis=1)[keep][:need]
        g.append(cand)
        need -= len(cand)
    ground = np.vstack(g)
    ground[:, 2] = rng.normal(0.0, 0.02, len(ground))
    coords.append(ground)
    sem.append(np.full(len(ground), GROUND_CLASS))
    inst.append(np.zeros(len(ground), dtype=np.int64))

    xyz = np.vstack(coords)
    xyz[:, 2] -= SENSOR_HEIGHT
    # float32-representable so the .bin export round-trips exactly
    xyz = xyz.astype(np.float32).astype(np.float64)
    intensity = rng.uniform(0.0, 1.0, len(xyz)).astype(np.float32).astype(np.float64)
    pc = PointCloud(xyz, intensity)
    calib = default_calibration(spec.image_height, spec.image_width, spec.hfov)
    semantic = np.concatenate(sem).astype(np.int64)
    instance = np.concatenate(inst).astype(np.int64)
    image = render_pinhole(pc, semantic, calib, spec.colors(), spec.color_noise, rng)
    # quantised to the 8-bit levels of the .rgb export
    image = np.round(image * 255.0) / 255.0
    return Scene(pc, semantic, instance, image, calib, tuple(things))


def render_pinhole(
    pc: PointCloud,
    semantic: np.ndarray,
    calib: Calibration,
    palette: np.ndarray,
    color_noise: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    radius: int = 1,
) -> np.ndarray:
    """Z-buffered square splats of class colours on a mid-gray background.

    Each point covers the ``(2r+1)^2`` block around the pixel containing its
    calibrated location; the nearest point wins every pixel. Noise is drawn
    per point so one splat has one colour.
    """
    h, w = calib.height, calib.width
    image = np.full((h, w, 3), BACKGROUND)
    uv = calibrate_points(pc, calib)
    vis = np.flatnonzero(np.isfinite(uv[:, 0]))
    if not len(vis):
        return image
    hom = np.hstack([pc.coords[vis], np.ones((len(vis), 1))])
    depth = (hom @ calib.projection.T)[:, 2]
    colors = palette[semantic[vis]]
    if color_noise > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        colors = colors + rng.normal(0.0, color_noise, colors.shape)
    col0 = np.floor(uv[vis, 0]).astype(np.int64)
    row0 = np.floor(uv[vis, 1]).astype(np.int64)
    offs = np.arange(-radius, radius + 1)
    dr, dc = np.meshgrid(offs, offs, indexing="ij")
    rows = (row0[:, None] + dr.reshape(1, -1)).reshape(-1)
    cols = (col0[:, None] + dc.reshape(1, -1)).reshape(-1)
    owner = np.repeat(np.arange(len(vis)), dr.size)
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    rows, cols, owner = rows[inside], cols[inside], owner[inside]
    flat = rows * w + cols
    order = np.lexsort((owner, depth[owner], flat))
    flat, owner = flat[order], owner[order]
    first = np.r_[True, flat[1:] != flat[:-1]]
    image.reshape(-1, 3)[flat[first]] = colors[owner[first]]
    return np.clip(image, 0.0, 1.0)


def generate_scenes(count: int, base: SceneSpec = SceneSpec(), seed: int = 0) -> list[Scene]:
    """``count`` scenes with seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [generate_scene(_respec(base, int(s))) for s in seeds]


def _respec(spec: SceneSpec, seed: int) -> SceneSpec:
    return replace(spec, seed=seed)


def save_scene(directory, scene: Scene) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dataio.write_points(d / "points.bin", scene.points)
    dataio.write_labels(d / "labels.label", dataio.join_labels(scene.semantic, scene.instance))
    dataio.write_calibration(d / "calib.txt", scene.calib)
    dataio.write_rgb(d / "image.rgb", scene.image)
    (d / "things.txt").write_text(",".join(str(c) for c in scene.thing_classes) + "\n", encoding="utf-8")


def load_scene(directory) -> Scene:
    d = Path(directory)
    pc = dataio.read_points(d / "points.bin")
    semantic, instance = dataio.split_labels(dataio.read_labels(d / "labels.label"))
    if len(semantic) != pc.n:
        raise ContractError(f"{d}: {pc.n} points but {len(semantic)} labels")
    calib = dataio.read_calibration(d / "calib.txt")
    image = dataio.read_rgb(d / "image.rgb").astype(np.float64) / 255.0
    things = ()
    tf = d / "things.txt"
    if tf.exists():
        text = tf.read_text(encoding="utf-8").strip()
        things = tuple(int(t) for t in text.split(",") if t)
    return Scene(pc, semantic, instance, image, calib, things)
