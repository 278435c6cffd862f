"""Image, reconstruction, Lumos and total objectives."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class LumosWeights:
    lambda_c: float = 0.1
    lambda_i: float = 1.0
    lambda_v: float = 0.01

    def __post_init__(self):
        if min(self.lambda_c, self.lambda_i, self.lambda_v) < 0:
            raise ValueError("Lumos weights must be non-negative")


@dataclass(frozen=True)
class ObjectiveWeights:
    omega_distill: float = 1.0
    omega_lumos: float = 1.0

    def __post_init__(self):
        if min(self.omega_distill, self.omega_lumos) < 0:
            raise ValueError("objective weights must be non-negative")


@dataclass
class LossReport:
    rec: float
    distill: float
    content: float
    image: float
    voxel: float
    lumos: float
    total: float
    step: int | None = None
    lr: float | None = None

    def check(self, lumos_w: LumosWeights, obj_w: ObjectiveWeights, tol: float = 1e-6) -> None:
        """Raise if the aggregation identities or finiteness are violated."""
        vals = [self.rec, self.distill, self.content, self.image, self.voxel, self.lumos, self.total]
        if not all(math.isfinite(v) for v in vals):
            raise FloatingPointError(f"non-finite loss in {self}")
        lum = lumos_w.lambda_c * self.content + lumos_w.lambda_i * self.image + lumos_w.lambda_v * self.voxel
        tot = self.rec + obj_w.omega_distill * self.distill + obj_w.omega_lumos * self.lumos
        if abs(lum - self.lumos) > tol or abs(tot - self.total) > tol:
            raise AssertionError(f"inconsistent LossReport {self}")

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in asdict(self).items() if v is not None})


def _check_shapes(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def image_loss(I_r, I_c):
    """Mean absolute difference over every element; returns ``(loss, grad)``."""
    a, b = _check_shapes(I_r, I_c)
    d = a - b
    return float(np.abs(d).mean()), np.sign(d) / d.size


def rec_loss(rendered, target, kind: str = "mse"):
    a, b = _check_shapes(rendered, target)
    d = a - b
    if kind == "mse":
        return float(np.mean(d * d)), 2.0 * d / d.size
    if kind == "l1":
        return image_loss(a, b)
    raise ValueError(f"unknown reconstruction loss {kind!r}")


def lumos_loss(content: float, image: float, voxel: float, w: LumosWeights = LumosWeights()) -> float:
    return w.lambda_c * content + w.lambda_i * image + w.lambda_v * voxel


def total_loss(rec: float, distill: float, lumos: float, w: ObjectiveWeights = ObjectiveWeights()) -> float:
    return rec + w.omega_distill * distill + w.omega_lumos * lumos
