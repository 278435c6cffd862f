"""Pinhole projection, depth back-projection and the point-map distillation loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CameraView

BEHIND_EPS = 1e-6


class BehindCameraError(ValueError):
    pass


@dataclass
class PointMap:
    """Per-pixel world points ``points`` (S, H, W, 3) with validity ``mask`` (S, H, W)."""

    points: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points)
        if self.points.ndim == 3:
            self.points = self.points[None]
        if self.points.ndim != 4 or self.points.shape[-1] != 3:
            raise ValueError(f"point map must be SxHxWx3, got {self.points.shape}")
        self.mask = np.broadcast_to(np.asarray(self.mask, dtype=bool), self.points.shape[:3]).copy()

    @classmethod
    def stack(cls, maps) -> "PointMap":
        maps = list(maps)
        return cls(np.concatenate([m.points for m in maps]), np.concatenate([m.mask for m in maps]))


def pixel_rays(cam: CameraView) -> np.ndarray:
    """Camera-frame ray per pixel center, scaled to z = 1. Shape (H, W, 3)."""
    xs = (np.arange(cam.width) + 0.5 - cam.cx) / cam.fx
    ys = (np.arange(cam.height) + 0.5 - cam.cy) / cam.fy
    rays = np.ones((cam.height, cam.width, 3))
    rays[..., 0] = xs[None, :]
    rays[..., 1] = ys[:, None]
    return rays


def backproject_points(depth, cam: CameraView) -> np.ndarray:
    """World point (H, W, 3) of every pixel center at the given camera depth, unmasked."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (cam.height, cam.width):
        raise ValueError(f"depth shape {depth.shape} does not match camera {(cam.height, cam.width)}")
    c2w = cam.c2w
    return (pixel_rays(cam) * depth[..., None]) @ c2w[:3, :3].T + c2w[:3, 3]


def backproject(depth, cam: CameraView, mask=None) -> PointMap:
    """Single-view point map; pixels with depth <= 0 (or outside ``mask``) are invalid."""
    world = backproject_points(depth, cam)
    valid = np.asarray(depth) > 0
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    world[~valid] = 0.0
    return PointMap(world[None], valid[None])


def backproject_grad(grad_points, cam: CameraView) -> np.ndarray:
    """Adjoint of ``backproject`` w.r.t. depth: (H, W, 3) point cotangent -> (H, W)."""
    dirs = pixel_rays(cam) @ cam.c2w[:3, :3].T
    return np.einsum("hwc,hwc->hw", grad_points, dirs)


def project(point, cam: CameraView):
    """World point -> (u, v, z_cam). Raises BehindCameraError for z_cam <= 1e-6."""
    X, Y, Z = cam.R @ np.asarray(point, dtype=np.float64) + cam.t
    if Z <= BEHIND_EPS:
        raise BehindCameraError(f"point at camera depth {Z} is behind the camera")
    return cam.fx * X / Z + cam.cx, cam.fy * Y / Z + cam.cy, Z


def project_points(points, cam: CameraView):
    """Vectorized projection; returns (uv, z, in_front) with uv undefined where not in front."""
    p = np.asarray(points, dtype=np.float64) @ cam.R.T + cam.t
    z = p[..., 2]
    front = z > BEHIND_EPS
    zs = np.where(front, z, 1.0)
    uv = np.stack([cam.fx * p[..., 0] / zs + cam.cx, cam.fy * p[..., 1] / zs + cam.cy], axis=-1)
    return uv, z, front


def distill_loss(P_S: PointMap, P_T: PointMap):
    """Mean over valid pixel sites of the L1 norm of the 3-vector difference.

    Returns ``(loss, grad)`` where ``grad`` has the shape of ``P_S.points`` and is
    zero at masked sites. The count is of sites, not coordinates, so a uniform
    per-coordinate error e gives 3e.
    """
    if P_S.points.shape != P_T.points.shape:
        raise ValueError(f"point map shapes differ: {P_S.points.shape} vs {P_T.points.shape}")
    if not np.array_equal(P_S.mask, P_T.mask):
        raise ValueError("point map masks differ")
    count = int(P_S.mask.sum())
    if count == 0:
        raise ValueError("no valid pixels for distillation")
    diff = np.where(P_S.mask[..., None], P_S.points - P_T.points, 0.0)
    loss = float(np.abs(diff).sum() / count)
    return loss, np.sign(diff) / count
