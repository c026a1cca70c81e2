"""Cross-view fusion of per-point voxel, range and point features.

The three views are concatenated, mixed by a square gate, compressed by a
two-layer MLP into a global per-point feature, and each view is then updated
by its own adapter through a residual connection::

    global = ReLU(L2(ReLU(L1(W_v [F_V | F_R | F_P]))))
    F_i'   = F_i + ReLU(A_i(global))
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, concat, linear, matmul, relu
from .viewxform import ViewBundle

VIEWS = ("voxel", "range", "point")


@dataclass
class LvaParams:
    gate: Tensor  # 3C x 3C
    global1_weight: Tensor  # 3C x C
    global1_bias: Tensor
    global2_weight: Tensor  # C x C
    global2_bias: Tensor
    adapter_weight: dict  # view -> C x C
    adapter_bias: dict  # view -> C

    def __post_init__(self):
        c = self.global2_weight.shape[0]
        if self.gate.shape != (3 * c, 3 * c) or self.global1_weight.shape != (3 * c, c):
            raise DimensionError(f"LVA widths inconsistent with C_f={c}")
        if set(self.adapter_weight) != set(VIEWS) or set(self.adapter_bias) != set(VIEWS):
            raise ContractError(f"adapters must cover exactly {VIEWS}")

    @property
    def channels(self) -> int:
        return self.global2_weight.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int) -> "LvaParams":
        c = channels

        def he(fan_in, fan_out):
            return Tensor(rng.normal(0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)), requires_grad=True)

        return cls(
            gate=he(3 * c, 3 * c),
            global1_weight=he(3 * c, c),
            global1_bias=Tensor(np.zeros(c), requires_grad=True),
            global2_weight=he(c, c),
            global2_bias=Tensor(np.zeros(c), requires_grad=True),
            adapter_weight={v: Tensor(rng.normal(0, 0.1 / np.sqrt(c), (c, c)), requires_grad=True) for v in VIEWS},
            adapter_bias={v: Tensor(np.zeros(c), requires_grad=True) for v in VIEWS},
        )

    @classmethod
    def zeros(cls, channels: int) -> "LvaParams":
        c = channels
        z = lambda *s: Tensor(np.zeros(s), requires_grad=True)  # noqa: E731
        return cls(
            gate=z(3 * c, 3 * c),
            global1_weight=z(3 * c, c),
            global1_bias=z(c),
            global2_weight=z(c, c),
            global2_bias=z(c),
            adapter_weight={v: z(c, c) for v in VIEWS},
            adapter_bias={v: z(c) for v in VIEWS},
        )

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = {
            prefix + "gate": self.gate,
            prefix + "global1_weight": self.global1_weight,
            prefix + "global1_bias": self.global1_bias,
            prefix + "global2_weight": self.global2_weight,
            prefix + "global2_bias": self.global2_bias,
        }
        for v in VIEWS:
            out[f"{prefix}adapter_{v}_weight"] = self.adapter_weight[v]
            out[f"{prefix}adapter_{v}_bias"] = self.adapter_bias[v]
        return out


def global_aggregate(f_voxel: Tensor, f_range: Tensor, f_point: Tensor, params: LvaParams) -> Tensor:
    c = params.channels
    for name, t in (("voxel", f_voxel), ("range", f_range), ("point", f_point)):
        if t.ndim != 2 or t.shape[1] != c:
            raise ContractError(f"{name} features {t.shape} do not have width {c}")
    if not f_voxel.shape[0] == f_range.shape[0] == f_point.shape[0]:
        raise ContractError("view features disagree on point count")
    mixed = matmul(concat([f_voxel, f_range, f_point], axis=1), params.gate)
    hidden = relu(linear(mixed, params.global1_weight, params.global1_bias))
    return relu(linear(hidden, params.global2_weight, params.global2_bias))


def view_adapt(feature: Tensor, global_feature: Tensor, view: str, params: LvaParams) -> Tensor:
    if view not in VIEWS:
        raise ContractError(f"unknown view {view!r}; expected one of {VIEWS}")
    if feature.shape != global_feature.shape:
        raise ContractError(f"shape mismatch: {feature.shape} vs {global_feature.shape}")
    return feature + relu(linear(global_feature, params.adapter_weight[view], params.adapter_bias[view]))


def fuse_views(bundle: ViewBundle, params: LvaParams) -> tuple[Tensor, Tensor, Tensor]:
    """Adapted (voxel, range, point) features, each ``m x C_f``."""
    g = global_aggregate(bundle.voxel, bundle.range, bundle.point, params)
    return (
        view_adapt(bundle.voxel, g, "voxel", params),
        view_adapt(bundle.range, g, "range", params),
        view_adapt(bundle.point, g, "point", params),
    )
