"""Deterministic synthetic scenes and camera rings for offline end-to-end runs."""
from __future__ import annotations

import numpy as np

from .core import SH_C0, CameraView, GaussianScene, sh_coeff_count
from .geometry import PointMap, backproject
from .renderer import RenderOptions, render

TEACHER_ALPHA = 0.5


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera 4x4 for a camera at ``eye`` looking at ``target`` (+y down in the image)."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    if np.linalg.norm(r) < 1e-9:
        raise ValueError("view direction parallel to the up vector")
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    w2c = np.eye(4)
    w2c[:3, :3] = np.stack([r, d, f])
    w2c[:3, 3] = -w2c[:3, :3] @ eye
    return w2c


def ring_cameras(center, radius, n_views=6, width=64, height=64, fov_deg=50.0,
                 elevation_deg=20.0) -> list[CameraView]:
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    el = np.radians(elevation_deg)
    cams = []
    for k in range(n_views):
        th = 2 * np.pi * k / n_views
        eye = np.asarray(center) + radius * np.array([np.cos(th) * np.cos(el), np.sin(th) * np.cos(el), np.sin(el)])
        cams.append(CameraView(width, height, f, f, width / 2.0, height / 2.0, look_at(eye, center)))
    return cams


def random_scene(rng: np.random.Generator, n: int, bbox, sh_degree: int = 1,
                 scale_range=(0.03, 0.1), opacity_range=(0.6, 0.95)) -> GaussianScene:
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    extent = float(np.max(hi - lo))
    centers = rng.uniform(lo, hi, size=(n, 3))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    scales = extent * rng.uniform(*scale_range, size=(n, 3))
    opac = rng.uniform(*opacity_range, size=n)
    sh = np.zeros((n, sh_coeff_count(sh_degree), 3))
    sh[:, 0, :] = (rng.uniform(0.05, 0.95, size=(n, 3)) - 0.5) / SH_C0
    if sh_degree > 0:
        sh[:, 1:, :] = 0.1 * rng.normal(size=(n, sh.shape[1] - 1, 3))
    return GaussianScene(centers, opac, q, scales, sh, sh_degree)


def gen_scene(seed: int = 0, n_primitives: int = 300, bbox=((-1, -1, -1), (1, 1, 1)), n_views: int = 6,
              width: int = 64, height: int = 64, sh_degree: int = 1, opts: RenderOptions = RenderOptions()):
    """Random scene in ``bbox`` plus a ring of cameras around its centroid and clean renders.

    Returns ``(scene, cams, renders)``.
    """
    if n_primitives < 1:
        raise ValueError("need at least one primitive")
    if not 4 <= n_views <= 8:
        raise ValueError("gen_scene places 4 to 8 cameras")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
        raise ValueError(f"invalid bbox {bbox}")
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, n_primitives, (lo, hi), sh_degree)
    center = scene.centers.mean(axis=0)
    radius = 2.2 * float(np.linalg.norm(hi - lo))
    cams = ring_cameras(center, radius, n_views, width, height)
    renders = [render(scene, cam, opts) for cam in cams]
    return scene, cams, renders


def teacher_point_map(renders, cams, alpha_threshold: float = TEACHER_ALPHA) -> PointMap:
    """Back-project rendered depth of a reference scene; pixels under the alpha threshold are masked."""
    return PointMap.stack(backproject(r.depth, cam, r.alpha > alpha_threshold) for r, cam in zip(renders, cams))
