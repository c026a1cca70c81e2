"""Desk-scale multi-view, multi-modal segmentation network and its training loop.

Data flow of :func:`forward`::

    points -> MLP ------------------------------------------------> F_P
    points -> max-pool per voxel -> linear ---- LMA(image) -> F_V
    range image -> 2 convs -------------------- LMA(image) -> F_R
    for each fusion stage:
        F_V, F_R interpolated to points; LVA over (F_V, F_R, F_P)
        (between stages) scatter back to voxels / range pixels
    classifier on the point view; BEV-pooled point features -> centre/offset maps

The encoders are deliberately tiny stand-ins for production backbones.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .dataio import Config
from .errors import ContractError, TrainingError
from .geometry import (
    Calibration,
    PointCloud,
    RangeView,
    VoxelGrid,
    calibrate_points,
    perturb_calibration,
    project_to_range,
    range_input_features,
    voxel_index,
)
from .lma import ImageFeatures, LmaParams, deformable_fuse, fuse_with_residual
from .losses import LossParts, LossWeights, heatmap_mse, lovasz_softmax, offset_l1, total_loss, weighted_ce
from .lva import LvaParams, fuse_views
from .metrics import miou
from .panoptic import BevConfig, PanopticPrediction, build_targets, group_instances, majority_vote
from .synth import Scene, SceneSpec, generate_scenes
from .tensor import Tensor, concat, conv2d, linear, relu, reshape, segment_max, sigmoid, softmax, spmm
from .viewxform import ViewBundle, bilinear_matrix, bilinear_sample, scatter_matrix, trilinear_matrix

log = logging.getLogger(__name__)

ALL_VIEWS = frozenset("VPRI")
POINT_INPUTS = 5
RANGE_INPUTS = 5
_COORD_SCALE = np.array([20.0, 20.0, 2.0])


def desk_config() -> Config:
    """Overrides sized for synthetic scenes on one CPU core."""
    return Config(
        voxel_size=0.4,
        range_height=32,
        range_width=256,
        channels=16,
        image_channels=8,
        num_classes=4,
        thing_classes=(2, 3),
        bev_height=48,
        bev_width=72,
        bev_cell=0.5,
        bev_x_min=0.0,
        bev_y_min=-18.0,
        min_points=30,
        lr=0.05,
        eval_scenes=8,
        noise_draws=10,
    )


def scene_spec(cfg: Config, seed: int = 0) -> SceneSpec:
    return SceneSpec(
        num_classes=cfg.num_classes,
        max_points=cfg.points_per_scene,
        image_height=cfg.image_height,
        image_width=cfg.image_width,
        color_noise=cfg.color_noise,
        seed=seed,
    )


def bev_config(cfg: Config) -> BevConfig:
    return BevConfig(
        height=cfg.bev_height,
        width=cfg.bev_width,
        cell=cfg.bev_cell,
        x_min=cfg.bev_x_min,
        y_min=cfg.bev_y_min,
        sigma=cfg.heatmap_sigma,
        threshold=cfg.center_threshold,
        nms_kernel=cfg.nms_kernel,
    )


def loss_weights(cfg: Config) -> LossWeights:
    return LossWeights(cfg.alpha, cfg.beta, cfg.gamma, cfg.class_weights or None)


# -- scene preprocessing ---------------------------------------------------------


@dataclass
class SceneData:
    """A scene plus every index map and constant matrix the network needs."""

    scene: Scene
    point_input: np.ndarray
    voxels: VoxelGrid
    range_view: RangeView
    range_input: np.ndarray
    voxel_to_point: sp.csr_matrix
    range_to_point: sp.csr_matrix
    point_to_range: sp.csr_matrix
    range_occupied: np.ndarray
    calib: Calibration
    voxel_pixels: np.ndarray
    range_pixels: np.ndarray
    bev_pool: sp.csr_matrix
    heatmap: np.ndarray
    offsets: np.ndarray
    foreground: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return self.scene.semantic

    def with_calibration(self, calib: Calibration) -> "SceneData":
        """Same scene seen through a different (e.g. perturbed) calibration."""
        pc = self.scene.points
        winners = self.range_view.pixel_to_point.reshape(-1)[self.range_occupied]
        return replace(
            self,
            calib=calib,
            voxel_pixels=calibrate_points(self.voxels.centers, calib),
            range_pixels=calibrate_points(pc.coords[winners], calib),
        )


def _normalise(coords: np.ndarray, intensity: np.ndarray) -> np.ndarray:
    r = np.linalg.norm(coords, axis=1, keepdims=True)
    return np.hstack([coords / _COORD_SCALE, intensity[:, None], r / _COORD_SCALE[0]])


def prepare_scene(scene: Scene, cfg: Config) -> SceneData:
    pc = scene.points
    occupied, p2v = voxel_index(pc.coords, cfg.voxel_size)
    vg = VoxelGrid(cfg.voxel_size, occupied, p2v)
    rv = project_to_range(pc, cfg.range_height, cfg.range_width, cfg.fov_up, cfg.fov_down)
    raw = range_input_features(pc, rv)
    range_input = np.concatenate(
        [raw[..., :1] / _COORD_SCALE[0], raw[..., 1:4] / _COORD_SCALE, raw[..., 4:]], axis=2
    )
    occ = rv.occupied()
    winners = rv.pixel_to_point.reshape(-1)[occ]
    bev = bev_config(cfg)
    row, col, inside = bev.cell_of(pc.coords[:, :2])
    cells = row * bev.width + col
    counts = np.bincount(cells[inside], minlength=bev.height * bev.width).astype(np.float64)
    idx = np.flatnonzero(inside)
    pool = sp.csr_matrix(
        (1.0 / counts[cells[idx]], (cells[idx], idx)), shape=(bev.height * bev.width, pc.n)
    )
    target = build_targets(pc.coords, scene.semantic, scene.instance, cfg.thing_classes, bev)
    return SceneData(
        scene=scene,
        point_input=_normalise(pc.coords, pc.intensity),
        voxels=vg,
        range_view=rv,
        range_input=range_input,
        voxel_to_point=trilinear_matrix(pc.coords, occupied, cfg.voxel_size),
        range_to_point=bilinear_matrix(rv.point_rc[:, 0], rv.point_rc[:, 1], rv.height, rv.width),
        point_to_range=scatter_matrix(rv, pc.n),
        range_occupied=occ,
        calib=scene.calib,
        voxel_pixels=calibrate_points(vg.centers, scene.calib),
        range_pixels=calibrate_points(pc.coords[winners], scene.calib),
        bev_pool=pool,
        heatmap=target.heatmap,
        offsets=target.offsets,
        foreground=target.foreground,
    )


# -- parameters ------------------------------------------------------------------


def _he(rng, fan_in, *shape):
    return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), shape), requires_grad=True)


def _zeros(*shape):
    return Tensor(np.zeros(shape), requires_grad=True)


@dataclass
class ModelParams:
    """All learnable tensors, grouped by block; :meth:`named` gives a flat, ordered view."""

    encoders: dict
    lma_voxel: LmaParams
    lma_range: LmaParams
    lva: list
    between: list  # per stage transition: dict of voxel/range/point tensors
    heads: dict

    @classmethod
    def init(cls, cfg: Config, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        c, ci, k = cfg.channels, cfg.image_channels, cfg.num_classes
        if cfg.lva_stages < 1:
            raise ContractError("lva_stages must be at least 1")
        encoders = {
            "point1_w": _he(rng, POINT_INPUTS, POINT_INPUTS, c),
            "point1_b": _zeros(c),
            "point2_w": _he(rng, c, c, c),
            "point2_b": _zeros(c),
            "voxel_w": _he(rng, c, c, c),
            "voxel_b": _zeros(c),
            "range1_w": _he(rng, 9 * RANGE_INPUTS, 3, 3, RANGE_INPUTS, c),
            "range1_b": _zeros(c),
            "range2_w": _he(rng, 9 * c, 3, 3, c, c),
            "range2_b": _zeros(c),
            "image1_w": _he(rng, 27, 3, 3, 3, ci),
            "image1_b": _zeros(ci),
            "image2_w": _he(rng, 9 * ci, 3, 3, ci, ci),
            "image2_b": _zeros(ci),
            "voxel_fuse_w": _he(rng, 2 * c, 2 * c, c),
            "voxel_fuse_b": _zeros(c),
            "range_fuse_w": _he(rng, 2 * c, 2 * c, c),
            "range_fuse_b": _zeros(c),
        }
        lma_args = dict(heads=cfg.heads, samples=cfg.samples, radius=cfg.lma_radius)
        lma_voxel = LmaParams.init(rng, c, ci, c, **lma_args)
        lma_range = LmaParams.init(rng, c, ci, c, **lma_args)
        lva = [LvaParams.init(rng, c) for _ in range(cfg.lva_stages)]
        between = [
            {
                "voxel_w": _he(rng, c, c, c),
                "voxel_b": _zeros(c),
                "range_w": _he(rng, 9 * c, 3, 3, c, c),
                "range_b": _zeros(c),
                "point_w": _he(rng, c, c, c),
                "point_b": _zeros(c),
            }
            for _ in range(cfg.lva_stages - 1)
        ]
        heads = {
            "cls_w": _he(rng, c, c, k),
            "cls_b": _zeros(k),
            "pan_w": Tensor(rng.normal(0.0, 0.01, (c + k, 3)), requires_grad=True),
            "pan_b": _zeros(3),
        }
        return cls(encoders, lma_voxel, lma_range, lva, between, heads)

    def named(self) -> dict[str, Tensor]:
        out = {f"enc.{k}": v for k, v in self.encoders.items()}
        out.update(self.lma_voxel.named("lma_voxel."))
        out.update(self.lma_range.named("lma_range."))
        for i, p in enumerate(self.lva):
            out.update(p.named(f"lva{i}."))
        for i, d in enumerate(self.between):
            out.update({f"between{i}.{k}": v for k, v in d.items()})
        out.update({f"head.{k}": v for k, v in self.heads.items()})
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named().items()}

    def load_state(self, state: dict) -> None:
        named = self.named()
        if set(named) != set(state):
            missing = sorted(set(named) ^ set(state))
            raise ContractError(f"checkpoint keys do not match the model: {missing[:5]}")
        for k, t in named.items():
            if t.shape != state[k].shape:
                raise ContractError(f"{k}: checkpoint shape {state[k].shape} != model {t.shape}")
            t.data[...] = state[k]


# -- forward ---------------------------------------------------------------------


@dataclass
class ForwardOutput:
    logits: Tensor  # N x K
    heatmap: Tensor  # H_B x W_B
    offsets: Tensor  # H_B x W_B x 2
    point_features: Tensor


def _views(views) -> frozenset:
    v = frozenset(views)
    if not v & frozenset("VPR"):
        raise ContractError("at least one LiDAR view (V, P or R) must stay enabled")
    if v - ALL_VIEWS:
        raise ContractError(f"unknown views {sorted(v - ALL_VIEWS)}")
    return v


def image_features(data: SceneData, params: ModelParams) -> ImageFeatures:
    e = params.encoders
    img = Tensor(data.scene.image - 0.5)
    f = relu(conv2d(img, e["image1_w"], e["image1_b"]))
    return ImageFeatures(relu(conv2d(f, e["image2_w"], e["image2_b"])))


def forward(
    data: SceneData,
    params: ModelParams,
    views: Iterable[str] = ALL_VIEWS,
    zero_image: bool = False,
) -> ForwardOutput:
    """Run the network on one prepared scene.

    ``views`` masks modalities: disabled views contribute zero features.
    Dropping ``"I"`` skips the image branch entirely; ``zero_image`` instead
    runs the attention on an all-zero image feature map.
    """
    views = _views(views)
    if data.calib is None:
        raise ContractError("scene has no calibration")
    e = params.encoders
    n = data.scene.n
    c = params.lva[0].channels
    hr, wr = data.range_view.height, data.range_view.width

    f_point = relu(linear(Tensor(data.point_input), e["point1_w"], e["point1_b"]))
    f_point = relu(linear(f_point, e["point2_w"], e["point2_b"]))
    f_voxel = segment_max(f_point, data.voxels.point_to_voxel, data.voxels.n_voxels)
    f_voxel = relu(linear(f_voxel, e["voxel_w"], e["voxel_b"]))
    f_range = relu(conv2d(Tensor(data.range_input), e["range1_w"], e["range1_b"]))
    f_range = relu(conv2d(f_range, e["range2_w"], e["range2_b"]))
    f_range = reshape(f_range, (hr * wr, c))

    if "I" in views:
        img = image_features(data, params)
        if zero_image:
            img = ImageFeatures(Tensor(np.zeros(img.features.shape)), img.scale)
        enh_voxel = deformable_fuse(f_voxel, img, data.voxel_pixels, params.lma_voxel)
        occ = data.range_occupied
        queries = spmm(_select(occ, hr * wr), f_range)
        enh_occ = deformable_fuse(queries, img, data.range_pixels, params.lma_range)
        enh_range = spmm(_select(occ, hr * wr).T, enh_occ)
    else:
        enh_voxel = Tensor(np.zeros((data.voxels.n_voxels, c)))
        enh_range = Tensor(np.zeros((hr * wr, c)))
    f_voxel = relu(linear(fuse_with_residual(enh_voxel, f_voxel), e["voxel_fuse_w"], e["voxel_fuse_b"]))
    f_range = relu(linear(fuse_with_residual(enh_range, f_range), e["range_fuse_w"], e["range_fuse_b"]))

    zeros_nc = Tensor(np.zeros((n, c)))
    stages = len(params.lva)
    for s in range(stages):
        pv = spmm(data.voxel_to_point, f_voxel) if "V" in views else zeros_nc
        pr = spmm(data.range_to_point, f_range) if "R" in views else zeros_nc
        pp = f_point if "P" in views else zeros_nc
        a_voxel, a_range, a_point = fuse_views(ViewBundle(pv, pr, pp), params.lva[s])
        if s == stages - 1:
            f_point = a_point
            break
        b = params.between[s]
        f_voxel = segment_max(a_voxel, data.voxels.point_to_voxel, data.voxels.n_voxels)
        f_voxel = relu(linear(f_voxel, b["voxel_w"], b["voxel_b"]))
        f_range = reshape(spmm(data.point_to_range, a_range), (hr, wr, c))
        f_range = reshape(relu(conv2d(f_range, b["range_w"], b["range_b"])), (hr * wr, c))
        f_point = relu(linear(a_point, b["point_w"], b["point_b"]))

    h = params.heads
    logits = linear(f_point, h["cls_w"], h["cls_b"])
    head_in = concat([f_point, softmax(logits, axis=1)], axis=1)
    bev = linear(spmm(data.bev_pool, head_in), h["pan_w"], h["pan_b"])
    hb, wb = data.heatmap.shape
    heatmap = sigmoid(reshape(bev[:, 0], (hb, wb)))
    offsets = reshape(bev[:, 1:3], (hb, wb, 2))
    return ForwardOutput(logits, heatmap, offsets, f_point)


def _select(rows: np.ndarray, total: int) -> sp.csr_matrix:
    return sp.csr_matrix((np.ones(len(rows)), (np.arange(len(rows)), rows)), shape=(len(rows), total))


def scene_loss(data: SceneData, out: ForwardOutput, cfg: Config) -> tuple[Tensor, LossParts]:
    labels = data.labels
    w = loss_weights(cfg)
    probs = softmax(out.logits, axis=1)
    parts = LossParts(
        wce=weighted_ce(out.logits, labels, w.class_weights, cfg.ignore_index),
        lovasz=lovasz_softmax(probs, labels, ignore_index=cfg.ignore_index),
        heatmap=heatmap_mse(out.heatmap, data.heatmap),
        offset=offset_l1(out.offsets, data.offsets, data.foreground),
    )
    return total_loss(parts, w), parts


# -- optimisation ----------------------------------------------------------------


class SGD:
    """SGD with momentum, decoupled-from-clipping weight decay and global-norm clipping."""

    def __init__(self, params: dict, lr: float, momentum: float = 0.9, weight_decay: float = 1e-4,
                 clip: Optional[float] = 10.0):
        if lr < 0:
            raise ContractError("learning rate must be non-negative")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip = clip
        self.buffers = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad**2)) for p in self.params.values() if p.grad is not None))

    def step(self, lr: Optional[float] = None) -> float:
        lr = self.lr if lr is None else lr
        norm = self.grad_norm()
        if not math.isfinite(norm):
            raise TrainingError(f"non-finite gradient norm {norm}")
        scale = self.clip / norm if self.clip is not None and norm > self.clip else 1.0
        for k, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad * scale
            g = g + self.weight_decay * p.data
            buf = self.buffers[k]
            buf *= self.momentum
            buf += g
            p.data -= lr * buf
        return norm


def learning_rate(cfg: Config, base: float, step: int, total: int) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return base * (step + 1) / cfg.warmup_steps
    if cfg.cosine:
        t = (step - cfg.warmup_steps) / max(1, total - cfg.warmup_steps)
        return 0.5 * base * (1.0 + math.cos(math.pi * t))
    return base


@dataclass
class TrainResult:
    params: ModelParams
    losses: list = field(default_factory=list)


def train(
    scenes: Sequence[SceneData],
    params: ModelParams,
    cfg: Config,
    steps: Optional[int] = None,
    lr: Optional[float] = None,
    seed: int = 0,
    views: Iterable[str] = ALL_VIEWS,
) -> TrainResult:
    """One scene per step, visiting scenes in a fresh seeded permutation each epoch."""
    steps = cfg.steps if steps is None else steps
    lr = cfg.lr if lr is None else lr
    if steps < 1:
        raise ContractError("steps must be at least 1")
    if lr < 0:
        raise ContractError("learning rate must be non-negative")
    if not scenes:
        raise ContractError("no training scenes")
    views = _views(views)
    rng = np.random.default_rng(seed)
    opt = SGD(params.named(), lr, cfg.momentum, cfg.weight_decay, cfg.grad_clip)
    order: list[int] = []
    losses = []
    for step in range(steps):
        if not order:
            order = list(rng.permutation(len(scenes)))
        data = scenes[order.pop()]
        opt.zero_grad()
        loss, _ = scene_loss(data, forward(data, params, views), cfg)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"loss became {value} at step {step}")
        loss.backward()
        opt.step(learning_rate(cfg, lr, step, steps))
        losses.append(value)
        if step % 50 == 0:
            log.debug("step %d loss %.4f", step, value)
    return TrainResult(params, losses)


# -- evaluation ------------------------------------------------------------------


def predict(data: SceneData, params: ModelParams, views: Iterable[str] = ALL_VIEWS) -> np.ndarray:
    return np.argmax(forward(data, params, views).logits.data, axis=1)


def accuracy(scenes: Sequence[SceneData], params: ModelParams, cfg: Config,
             views: Iterable[str] = ALL_VIEWS) -> float:
    """Fraction of non-ignored points classified correctly, pooled over scenes."""
    correct = total = 0
    for data in scenes:
        pred = predict(data, params, views)
        keep = data.labels != cfg.ignore_index
        correct += int(np.sum(pred[keep] == data.labels[keep]))
        total += int(keep.sum())
    return correct / total if total else float("nan")


def predict_panoptic(data: SceneData, params: ModelParams, cfg: Config,
                     views: Iterable[str] = ALL_VIEWS) -> PanopticPrediction:
    out = forward(data, params, views)
    semantic = np.argmax(out.logits.data, axis=1)
    grouped = group_instances(
        out.heatmap.data, out.offsets.data, data.scene.points.coords, semantic,
        cfg.thing_classes, bev_config(cfg), cfg.min_points,
    )
    return majority_vote(grouped, semantic)


def evaluate(scenes: Sequence[SceneData], params: ModelParams, cfg: Config,
             views: Iterable[str] = ALL_VIEWS) -> dict:
    preds, gts = [], []
    for data in scenes:
        preds.append(predict(data, params, views))
        gts.append(data.labels)
    report = miou(np.concatenate(preds), np.concatenate(gts), cfg.num_classes, cfg.ignore_index)
    return {"accuracy": accuracy(scenes, params, cfg, views), "miou": report.miou}


def make_scenes(cfg: Config, count: int, seed: int) -> list[SceneData]:
    return [prepare_scene(s, cfg) for s in generate_scenes(count, scene_spec(cfg), seed)]


# -- modality ablation -----------------------------------------------------------

ABLATION_SETS = ("V", "P", "R", "VI", "RI", "VP", "VPR", "VPRI")


def ablate(cfg: Config, views: Iterable[str], seed: int = 0,
           train_scenes: Optional[Sequence[SceneData]] = None,
           eval_scenes: Optional[Sequence[SceneData]] = None) -> dict:
    """Train and evaluate the network with only ``views`` enabled."""
    views = _views(views)
    train_scenes = make_scenes(cfg, cfg.scenes, seed) if train_scenes is None else train_scenes
    eval_scenes = make_scenes(cfg, cfg.eval_scenes, seed + 10_000) if eval_scenes is None else eval_scenes
    params = ModelParams.init(cfg, seed)
    result = train(train_scenes, params, cfg, seed=seed, views=views)
    out = evaluate(eval_scenes, result.params, cfg, views)
    out["views"] = "".join(sorted(views, key="VPRI".index))
    out["final_loss"] = result.losses[-1]
    return out


# -- calibration robustness probe -----------------------------------------------


@dataclass
class ProbeParams:
    """Point MLP + image encoder + one fusion block + classifier."""

    tensors: dict
    lma: Optional[LmaParams]

    def named(self) -> dict:
        out = {f"probe.{k}": v for k, v in self.tensors.items()}
        if self.lma is not None:
            out.update(self.lma.named("probe.lma."))
        return out


def init_probe(cfg: Config, mode: str, seed: int) -> ProbeParams:
    if mode not in ("soft", "hard"):
        raise ContractError(f"fusion mode must be 'soft' or 'hard', got {mode!r}")
    rng = np.random.default_rng(seed)
    c, ci, k = cfg.channels, cfg.image_channels, cfg.num_classes
    t = {
        "point1_w": _he(rng, POINT_INPUTS, POINT_INPUTS, c),
        "point1_b": _zeros(c),
        "image1_w": _he(rng, 27, 3, 3, 3, ci),
        "image1_b": _zeros(ci),
        "image2_w": _he(rng, 9 * ci, 3, 3, ci, ci),
        "image2_b": _zeros(ci),
        "cls1_w": _he(rng, c, c, c),
        "cls1_b": _zeros(c),
        "cls2_w": _he(rng, c, c, k),
        "cls2_b": _zeros(k),
    }
    lma = None
    if mode == "hard":
        t["add_w"] = _he(rng, ci, ci, c)
    else:
        lma = LmaParams.init(rng, c, ci, c, heads=cfg.heads, samples=cfg.samples, radius=cfg.lma_radius)
    return ProbeParams(t, lma)


def probe_logits(data: SceneData, params: ProbeParams, pixels: np.ndarray) -> Tensor:
    """Point features fused with image features at ``pixels`` (one per point)."""
    t = params.tensors
    f = relu(linear(Tensor(data.point_input), t["point1_w"], t["point1_b"]))
    img = Tensor(data.scene.image - 0.5)
    fi = relu(conv2d(img, t["image1_w"], t["image1_b"]))
    fi = relu(conv2d(fi, t["image2_w"], t["image2_b"]))
    if params.lma is None:
        valid = np.all(np.isfinite(pixels), axis=1)
        safe = np.where(valid[:, None], pixels - 0.5, -10.0)
        sampled = bilinear_sample(fi, safe[:, 1], safe[:, 0])
        fused = f + linear(sampled, t["add_w"])
    else:
        fused = f + deformable_fuse(f, ImageFeatures(fi), pixels, params.lma)
    h = relu(linear(fused, t["cls1_w"], t["cls1_b"]))
    return linear(h, t["cls2_w"], t["cls2_b"])


def train_probe(scenes: Sequence[SceneData], params: ProbeParams, cfg: Config,
                steps: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    opt = SGD(params.named(), cfg.lr, cfg.momentum, cfg.weight_decay, cfg.grad_clip)
    pixels = [calibrate_points(d.scene.points, d.calib) for d in scenes]
    losses = []
    order: list[int] = []
    for step in range(steps):
        if not order:
            order = list(rng.permutation(len(scenes)))
        i = order.pop()
        opt.zero_grad()
        loss = weighted_ce(probe_logits(scenes[i], params, pixels[i]), scenes[i].labels,
                           ignore_index=cfg.ignore_index)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"probe loss became {value} at step {step}")
        loss.backward()
        opt.step()
        losses.append(value)
    return losses


def probe_accuracy(scenes: Sequence[SceneData], params: ProbeParams, cfg: Config,
                   sigma_trans: float, sigma_rot: float, draws: int, seed: int) -> float:
    """Accuracy with the calibration perturbed ``draws`` times per scene (pooled)."""
    correct = total = 0
    for si, data in enumerate(scenes):
        for d in range(draws if sigma_trans > 0 or sigma_rot > 0 else 1):
            calib = perturb_calibration(data.calib, sigma_rot, sigma_trans, seed * 1_000_003 + si * 101 + d)
            pixels = calibrate_points(data.scene.points, calib)
            pred = np.argmax(probe_logits(data, params, pixels).data, axis=1)
            keep = data.labels != cfg.ignore_index
            correct += int(np.sum(pred[keep] == data.labels[keep]))
            total += int(keep.sum())
    return correct / total


def calibration_sweep(cfg: Config, sigmas: Sequence[float], seed: int = 0,
                      steps: Optional[int] = None) -> dict:
    """Accuracy versus calibration noise for soft (attention) and hard (additive) fusion.

    Both probes train on clean calibration; evaluation perturbs the extrinsic
    with translation noise ``sigma`` (and rotation ``cfg.calib_sigma_rot``).
    """
    steps = cfg.steps if steps is None else steps
    train_scenes = make_scenes(cfg, cfg.scenes, seed)
    eval_scenes = make_scenes(cfg, cfg.eval_scenes, seed + 10_000)
    rows = {}
    for mode in ("soft", "hard"):
        params = init_probe(cfg, mode, seed)
        train_probe(train_scenes, params, cfg, steps, seed)
        rows[mode] = [
            probe_accuracy(eval_scenes, params, cfg, s, cfg.calib_sigma_rot, cfg.noise_draws, seed)
            for s in sigmas
        ]
    return {"sigmas": list(sigmas), "soft": rows["soft"], "hard": rows["hard"]}
