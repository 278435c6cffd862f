"""Differentiable Gaussian splat rasterization.

The per-pixel compositing loops run in a compiled Cython extension when it is
importable and fall back to a numpy implementation otherwise. Set
``LUMOS_NO_EXT=1`` to force the fallback.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from ..core import CameraView, GaussianScene
from . import _fallback
from .project import Projected, preprocess, preprocess_backward
from .sh import eval_sh, rotate_sh, sh_basis

try:
    if os.environ.get("LUMOS_NO_EXT"):
        raise ImportError("compiled kernels disabled by LUMOS_NO_EXT")
    from . import _kernels
    BACKEND = "cython"
except ImportError:
    _kernels = None
    BACKEND = "numpy"

TILE = 16
NFEAT = 5  # r, g, b, camera depth, 1 (accumulated alpha)

__all__ = ["RenderOptions", "RenderOutput", "SceneGrad", "render", "render_backward",
           "project_gaussian", "eval_sh", "rotate_sh", "sh_basis", "BACKEND", "transform_scene"]


@dataclass(frozen=True)
class RenderOptions:
    background: tuple = (0.0, 0.0, 0.0)
    near: float = 0.01
    far: float = 1000.0
    lowpass: float = 0.3
    alpha_cutoff: float = 1.0 / 255.0
    alpha_max: float = 0.999
    transmittance_floor: float = 1e-4
    depth_eps: float = 1e-6
    precision: str = "float64"
    backend: str | None = None

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if self.lowpass < 0:
            raise ValueError("lowpass must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.dtype(self.precision)


@dataclass
class RenderOutput:
    rgb: np.ndarray     # (H, W, 3)
    depth: np.ndarray   # (H, W)
    alpha: np.ndarray   # (H, W)
    ctx: dict = field(default=None, repr=False)


@dataclass
class SceneGrad:
    centers: np.ndarray
    opacities: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    sh: np.ndarray

    @classmethod
    def zeros_like(cls, scene: GaussianScene) -> "SceneGrad":
        return cls(np.zeros_like(scene.centers), np.zeros_like(scene.opacities),
                   np.zeros_like(scene.rotations), np.zeros_like(scene.scales), np.zeros_like(scene.sh))

    def __iadd__(self, other: "SceneGrad") -> "SceneGrad":
        for name in ("centers", "opacities", "rotations", "scales", "sh"):
            getattr(self, name)[...] += getattr(other, name)
        return self

    def items(self):
        return [(name, getattr(self, name)) for name in ("centers", "opacities", "rotations", "scales", "sh")]


def _backend(opts: RenderOptions) -> str:
    name = opts.backend or BACKEND
    if name == "cython" and _kernels is None:
        raise RuntimeError("compiled kernels are not available")
    return name


def project_gaussian(g, cam: CameraView, opts: RenderOptions = RenderOptions()):
    """Screen-space (mean2d, cov2d, z_cam) of one primitive, or None when clipped by near/far."""
    scene = GaussianScene.from_primitives([g], sh_degree=int(round(np.sqrt(len(g.sh)))) - 1)
    pr = preprocess(scene.centers, scene.rotations, scene.scales, scene.sh, scene.sh_degree,
                    cam, opts.near, opts.far, opts.lowpass)
    if not pr.valid[0]:
        return None
    return pr.means2d[0], pr.cov2d[0], float(pr.depths[0])


def _boxes(pr: Projected, opac, order, width, height, opts):
    """Pixel boxes [x0, x1) x [y0, y1) outside which a splat's alpha is below the cutoff."""
    cutoff = opts.alpha_cutoff
    o = opac[order].astype(np.float64)
    if cutoff > 0:
        with np.errstate(divide="ignore"):
            Q = 2.0 * np.log(np.maximum(o, 1e-300) / cutoff)
    else:
        Q = np.full(len(order), np.inf)
    cov = pr.cov2d[order].astype(np.float64)
    mu = pr.means2d[order].astype(np.float64)
    boxes = np.zeros((len(order), 4), dtype=np.int64)
    reach = Q >= 0
    finite = np.isfinite(Q)
    rx = np.sqrt(np.where(reach & finite, Q, 0.0) * cov[:, 0, 0])
    ry = np.sqrt(np.where(reach & finite, Q, 0.0) * cov[:, 1, 1])
    # one extra pixel of margin; pixels inside the box are still alpha-tested
    x0 = np.floor(mu[:, 0] - rx - 1.5)
    x1 = np.ceil(mu[:, 0] + rx + 0.5) + 1
    y0 = np.floor(mu[:, 1] - ry - 1.5)
    y1 = np.ceil(mu[:, 1] + ry + 0.5) + 1
    x0 = np.where(finite, x0, 0)
    y0 = np.where(finite, y0, 0)
    x1 = np.where(finite, x1, width)
    y1 = np.where(finite, y1, height)
    boxes[:, 0] = np.clip(x0, 0, width)
    boxes[:, 1] = np.clip(x1, 0, width)
    boxes[:, 2] = np.clip(y0, 0, height)
    boxes[:, 3] = np.clip(y1, 0, height)
    boxes[~reach] = 0
    return boxes


def _tiles(boxes, width, height):
    """CSR lists of (depth-ordered) splat slots per 16x16 tile."""
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    keys, ids = [], []
    nonempty = (boxes[:, 1] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 2])
    for slot in np.flatnonzero(nonempty):
        x0, x1, y0, y1 = boxes[slot]
        txs = np.arange(x0 // TILE, (x1 - 1) // TILE + 1)
        tys = np.arange(y0 // TILE, (y1 - 1) // TILE + 1)
        k = (tys[:, None] * tiles_x + txs[None, :]).ravel()
        keys.append(k)
        ids.append(np.full(len(k), slot))
    ptr = np.zeros(tiles_x * tiles_y + 1, dtype=np.int32)
    if not keys:
        return ptr, np.zeros(0, dtype=np.int32)
    keys = np.concatenate(keys)
    ids = np.concatenate(ids)
    perm = np.lexsort((ids, keys))
    ptr[1:] = np.cumsum(np.bincount(keys, minlength=tiles_x * tiles_y))
    return ptr, ids[perm].astype(np.int32)


def _prepare(scene: GaussianScene, cam: CameraView, opts: RenderOptions):
    dt = opts.dtype
    p = scene.astype(dt)
    pr = preprocess(p["centers"], p["rotations"], p["scales"], p["sh"], scene.sh_degree,
                    cam, opts.near, opts.far, opts.lowpass)
    idx = np.flatnonzero(pr.valid)
    order = idx[np.argsort(pr.depths[idx], kind="stable")]
    feats = np.concatenate([pr.colors, pr.depths[:, None], np.ones((len(scene), 1), dtype=dt)], axis=1)
    bg = np.concatenate([np.asarray(opts.background, dtype=dt), np.zeros(2, dtype=dt)])
    boxes = _boxes(pr, p["opacities"], order, cam.width, cam.height, opts)
    arrays = dict(
        means2d=np.ascontiguousarray(pr.means2d[order]),
        conics=np.ascontiguousarray(pr.conics[order]),
        opac=np.ascontiguousarray(p["opacities"][order]),
        feats=np.ascontiguousarray(feats[order]),
        bg=bg,
    )
    return pr, order, boxes, arrays, p


def render(scene: GaussianScene, cam: CameraView, opts: RenderOptions = RenderOptions()) -> RenderOutput:
    """Composite the scene front to back into rgb, expected depth and alpha images."""
    backend = _backend(opts)
    dt = opts.dtype
    H, W = cam.height, cam.width
    pr, order, boxes, a, p = _prepare(scene, cam, opts)
    common = (opts.alpha_cutoff, opts.alpha_max, opts.transmittance_floor)
    if backend == "cython":
        ptr, ids = _tiles(boxes, W, H)
        out = np.zeros((H, W, NFEAT), dtype=dt)
        _kernels.rasterize_forward(a["means2d"], a["conics"], a["opac"], a["feats"], ptr, ids,
                                   a["bg"], H, W, TILE, *common, out)
        saved = (ptr, ids)
    else:
        out, saved = _fallback.rasterize_forward(a["means2d"], a["conics"], a["opac"], a["feats"],
                                                 boxes, a["bg"], H, W, *common)
    alpha = out[..., 4]
    depth = out[..., 3] / np.maximum(alpha, dt.type(opts.depth_eps))
    ctx = dict(pr=pr, order=order, boxes=boxes, arrays=a, params=p, saved=saved, out=out,
               backend=backend)
    return RenderOutput(out[..., :3].copy(), depth, alpha.copy(), ctx)


def render_backward(scene: GaussianScene, cam: CameraView, opts: RenderOptions = RenderOptions(),
                    grad_rgb=None, grad_depth=None, grad_alpha=None,
                    forward: RenderOutput | None = None) -> SceneGrad:
    """Reverse-mode gradients of <grad_rgb, rgb> + <grad_depth, depth> + <grad_alpha, alpha>."""
    H, W = cam.height, cam.width
    if forward is None or forward.ctx is None:
        forward = render(scene, cam, opts)
    ctx = forward.ctx
    g_out = np.zeros((H, W, NFEAT))
    for g, sl, shape in ((grad_rgb, slice(0, 3), (H, W, 3)), (grad_depth, 3, (H, W)), (grad_alpha, 4, (H, W))):
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != shape:
            raise ValueError(f"upstream gradient shape {g.shape} does not match {shape}")
        g_out[..., sl] = g
    out = ctx["out"].astype(np.float64)
    alpha = out[..., 4]
    safe = alpha > opts.depth_eps
    denom = np.maximum(alpha, opts.depth_eps)
    g_depth_img = g_out[..., 3].copy()
    g_out[..., 3] = g_depth_img / denom
    g_out[..., 4] += np.where(safe, -g_depth_img * out[..., 3] / (denom * denom), 0.0)

    a = ctx["arrays"]
    n = len(ctx["order"])
    common = (opts.alpha_cutoff, opts.alpha_max, opts.transmittance_floor)
    if ctx["backend"] == "cython":
        ptr, ids = ctx["saved"]
        g_means = np.zeros((n, 2))
        g_conics = np.zeros((n, 3))
        g_opac = np.zeros(n)
        g_feats = np.zeros((n, NFEAT))
        _kernels.rasterize_backward(a["means2d"], a["conics"], a["opac"], a["feats"], ptr, ids,
                                    a["bg"], H, W, TILE, *common, np.ascontiguousarray(g_out),
                                    g_means, g_conics, g_opac, g_feats)
    else:
        g_means, g_conics, g_opac, g_feats = _fallback.rasterize_backward(
            a["means2d"], a["conics"], a["opac"], a["feats"], ctx["boxes"], a["bg"], H, W, *common,
            g_out, ctx["saved"])

    N = len(scene)
    order = ctx["order"]

    def scatter(vals, shape):
        full = np.zeros((N,) + shape)
        full[order] = vals
        return full

    p = ctx["params"]
    g_centers, g_opacities, g_rot, g_scales, g_sh = preprocess_backward(
        ctx["pr"], p["centers"], p["scales"], p["sh"], scene.sh_degree, cam,
        scatter(g_means, (2,)), scatter(g_conics, (3,)), scatter(g_opac, ()),
        scatter(g_feats[:, :3], (3,)), scatter(g_feats[:, 3], ()))
    return SceneGrad(g_centers, g_opacities, g_rot, g_scales, g_sh)


def transform_scene(scene: GaussianScene, T) -> GaussianScene:
    """Apply the rigid transform ``T`` (4x4) to every primitive, rotating SH colors too."""
    from ..core import quat_multiply, rotmat_to_quat

    T = np.asarray(T, dtype=np.float64)
    R, t = T[:3, :3], T[:3, 3]
    q = rotmat_to_quat(R)
    rot = quat_multiply(np.broadcast_to(q, scene.rotations.shape), scene.rotations)
    return GaussianScene(scene.centers @ R.T + t, scene.opacities.copy(), rot, scene.scales.copy(),
                         rotate_sh(scene.sh, R), scene.sh_degree)
