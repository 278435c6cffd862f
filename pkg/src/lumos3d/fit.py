"""Per-scene gradient fitting of a Gaussian scene against multi-view targets.

Each step renders every view, evaluates the reconstruction, distillation and
Lumos terms, back-propagates through the feature extractor and the renderer,
and applies an Adam update with a warm-up + cosine learning-rate schedule.
Constraints are enforced by projection after every update.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .core import CameraView, GaussianScene
from .features import Extractor, ExtractorSpec, FeaturePyramid, content_loss
from .geometry import PointMap, backproject_grad, backproject_points, distill_loss
from .losses import LossReport, LumosWeights, ObjectiveWeights, image_loss, rec_loss
from .renderer import RenderOptions, SceneGrad, render, render_backward
from .voxelfeat import (default_voxel_sizes, downsample_nearest, voxel_loss, voxel_stats,
                        voxel_stats_backward, voxelize, voxelize_backward)

GROUPS = ("centers", "opacities", "rotations", "scales", "sh")
FULL_ITERS = 30000  # full-length schedule the default warm-up is scaled from
FULL_WARMUP = 1000
SCALE_FLOOR = 1e-6


@dataclass(frozen=True)
class FitConfig:
    iters: int = 1000
    lr_max: float = 2e-4
    lr_min: float = 0.0
    warmup: int | None = None  # None: 1000 steps per 30k, scaled to ``iters``
    lumos: LumosWeights = LumosWeights()
    objective: ObjectiveWeights = ObjectiveWeights()
    rec_kind: str = "mse"
    trainable: tuple = GROUPS
    lr_scale: tuple = (("centers", 1.0), ("opacities", 1.0), ("rotations", 1.0), ("scales", 1.0), ("sh", 1.0))
    content_weights: tuple = (0.5, 0.5)
    voxel_weights: tuple = (0.2, 0.2, 0.2, 0.2, 0.2)
    extractor: ExtractorSpec = ExtractorSpec()
    render: RenderOptions = RenderOptions()
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if not self.lr_max > 0:
            raise ValueError("lr_max must be positive")
        if not 0 <= self.resolved_warmup <= max(self.iters, 0):
            raise ValueError(f"warmup {self.resolved_warmup} outside [0, {self.iters}]")
        unknown = set(self.trainable) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")

    @property
    def resolved_warmup(self) -> int:
        if self.warmup is not None:
            return int(self.warmup)
        return min(FULL_WARMUP, int(round(self.iters * FULL_WARMUP / FULL_ITERS)))

    def group_lr_scale(self, group: str) -> float:
        return dict(self.lr_scale).get(group, 1.0)


def lr_schedule(step: int, cfg: FitConfig) -> float:
    """Linear warm-up to ``lr_max`` followed by cosine annealing to ``lr_min``."""
    if not 0 <= step < cfg.iters:
        raise ValueError(f"step {step} outside [0, {cfg.iters})")
    w = cfg.resolved_warmup
    if step < w:
        return cfg.lr_max * (step + 1) / w
    span = cfg.iters - w
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1 + math.cos(math.pi * (step - w) / span))


@dataclass
class FitState:
    scene: GaussianScene
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @classmethod
    def initial(cls, scene: GaussianScene) -> "FitState":
        scene = scene.copy()
        return cls(scene, 0, {g: np.zeros_like(getattr(scene, g)) for g in GROUPS},
                   {g: np.zeros_like(getattr(scene, g)) for g in GROUPS})


@dataclass
class FitContext:
    """Constant (teacher-side) quantities shared by every step."""

    targets: np.ndarray          # (S, H, W, 3)
    teacher: PointMap
    clean_pyramid: FeaturePyramid
    voxel_sizes: list
    voxel_origin: np.ndarray
    teacher_stats: list
    extractor: Extractor
    voxel_levels: list           # pyramid levels with at least one valid teacher sample
    voxel_weights: np.ndarray    # renormalized over ``voxel_levels``


def prepare_context(views, targets, teacher_points: PointMap, cfg: FitConfig) -> FitContext:
    targets = np.stack([np.asarray(t, dtype=np.float64) for t in targets])
    if not len(views) == len(targets) == teacher_points.points.shape[0]:
        raise ValueError("view, target and teacher point-map counts disagree")
    for cam, t in zip(views, targets):
        if t.shape[:2] != (cam.height, cam.width):
            raise ValueError(f"target shape {t.shape} does not match camera")
    ext = Extractor(cfg.extractor)
    clean = FeaturePyramid.stack([ext.forward(t)[0] for t in targets])
    sizes, origin = default_voxel_sizes(teacher_points.points, teacher_points.mask, len(clean.levels))
    stats, active = [], []
    for i, level in enumerate(clean.levels):
        stride = 2 ** i
        m = downsample_nearest(teacher_points.mask, stride)
        if not m.any():  # deep level of a sparse mask: no samples left
            continue
        grid = voxelize(downsample_nearest(teacher_points.points, stride), level, sizes[i], origin, m)
        stats.append(voxel_stats(grid))
        active.append(i)
    w = np.asarray(cfg.voxel_weights, dtype=np.float64)
    if len(w) != len(clean.levels):
        raise ValueError(f"expected {len(clean.levels)} voxel weights, got {len(w)}")
    w = w[active]
    w = w / w.sum() if w.sum() > 0 else w
    return FitContext(targets, teacher_points, clean, sizes, origin, stats, ext, active, w)


def evaluate_objective(scene: GaussianScene, views, ctx: FitContext, cfg: FitConfig,
                       with_grad: bool = True):
    """Loss report and (optionally) the scene gradient of the total objective."""
    opts = cfg.render
    lw, ow = cfg.lumos, cfg.objective

    def fwd(cam):
        return render(scene, cam, opts)

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            outs = list(pool.map(fwd, views))
    else:
        outs = [fwd(cam) for cam in views]
    rendered = np.stack([o.rgb for o in outs]).astype(np.float64)

    rec, g_rec = rec_loss(rendered, ctx.targets, cfg.rec_kind)
    image, g_image = image_loss(rendered, ctx.targets)

    pyrs, states = zip(*(ctx.extractor.forward(img) for img in rendered))
    F_r = FeaturePyramid.stack(pyrs)
    content, g_content = content_loss(F_r, ctx.clean_pyramid, cfg.content_weights)

    mask = ctx.teacher.mask
    pts = np.stack([backproject_points(o.depth, cam) for o, cam in zip(outs, views)])
    student = PointMap(np.where(mask[..., None], pts, 0.0), mask)
    distill, g_points = distill_loss(student, ctx.teacher)

    r_stats, grids = [], {}
    for i in ctx.voxel_levels:
        stride = 2 ** i
        grid = voxelize(downsample_nearest(student.points, stride), F_r.levels[i], ctx.voxel_sizes[i],
                        ctx.voxel_origin, downsample_nearest(mask, stride))
        grids[i] = grid
        r_stats.append(voxel_stats(grid))
    voxel, g_vox = voxel_loss(r_stats, ctx.teacher_stats, ctx.voxel_weights)
    g_vox = dict(zip(ctx.voxel_levels, zip(r_stats, g_vox)))

    lumos = lw.lambda_c * content + lw.lambda_i * image + lw.lambda_v * voxel
    total = rec + ow.omega_distill * distill + ow.omega_lumos * lumos
    report = LossReport(rec, distill, content, image, voxel, lumos, total)
    if not with_grad:
        return report, None

    # feature-space cotangents, per level, stacked over views
    g_levels = []
    for i, level in enumerate(F_r.levels):
        g = np.zeros_like(level)
        if g_content[i] is not None:
            g += ow.omega_lumos * lw.lambda_c * g_content[i]
        if i in grids:
            st, (g_mean, g_std) = g_vox[i]
            g_cells = voxel_stats_backward(grids[i], st, g_mean, g_std)
            g += ow.omega_lumos * lw.lambda_v * voxelize_backward(grids[i], g_cells)
        g_levels.append(g)
    g_img = g_rec + ow.omega_lumos * lw.lambda_i * g_image
    for s, state in enumerate(states):
        g_img[s] += ctx.extractor.backward(state, [g[s] for g in g_levels])
    g_depth = [ow.omega_distill * backproject_grad(g_points[s], cam) for s, cam in enumerate(views)]

    def bwd(s):
        return render_backward(scene, views[s], opts, g_img[s], g_depth[s], None, outs[s])

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            parts = list(pool.map(bwd, range(len(views))))
    else:
        parts = [bwd(s) for s in range(len(views))]
    grad = SceneGrad.zeros_like(scene)
    for part in parts:  # fixed reduction order
        grad += part
    return report, grad


def project_constraints(scene: GaussianScene) -> None:
    norm = np.linalg.norm(scene.rotations, axis=1, keepdims=True)
    off = np.abs(norm[:, 0] - 1.0) > 1e-12  # leave unit quaternions bit-exact
    scene.rotations[off] /= norm[off]
    np.clip(scene.opacities, 0.0, 1.0, out=scene.opacities)
    np.maximum(scene.scales, SCALE_FLOOR, out=scene.scales)


def step(state: FitState, views, targets, degraded, teacher_points: PointMap, cfg: FitConfig,
         ctx: FitContext | None = None):
    """One Adam step on the total objective; returns ``(state, report)``."""
    if degraded is not None and len(degraded) != len(views):
        raise ValueError("degraded input count does not match views")
    if ctx is None:
        ctx = prepare_context(views, targets, teacher_points, cfg)
    report, grad = evaluate_objective(state.scene, views, ctx, cfg)
    lr = lr_schedule(state.step, cfg)
    b1, b2 = cfg.betas
    t = state.step + 1
    for name in cfg.trainable:
        g = getattr(grad, name)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        param = getattr(state.scene, name)
        param -= lr * cfg.group_lr_scale(name) * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    project_constraints(state.scene)
    report.step = state.step
    report.lr = lr
    report.check(cfg.lumos, cfg.objective)
    state.step += 1
    state.history.append(report)
    return state, report


def fit_scene(init_scene: GaussianScene, views, targets, degraded, teacher_points: PointMap,
              cfg: FitConfig, callback=None):
    """Run ``cfg.iters`` steps; returns ``(scene, history)``."""
    if cfg.iters == 0:
        return init_scene, []
    ctx = prepare_context(views, targets, teacher_points, cfg)
    state = FitState.initial(init_scene)
    for _ in range(cfg.iters):
        state, report = step(state, views, targets, degraded, teacher_points, cfg, ctx)
        if callback is not None:
            callback(state, report)
    return state.scene, state.history


def with_weights(cfg: FitConfig, **kw) -> FitConfig:
    """Copy of ``cfg`` with Lumos/objective weights overridden by keyword (lambda_c=..., omega_lumos=...)."""
    lumos = replace(cfg.lumos, **{k: v for k, v in kw.items() if k.startswith("lambda_")})
    obj = replace(cfg.objective, **{k: v for k, v in kw.items() if k.startswith("omega_")})
    return replace(cfg, lumos=lumos, objective=obj)
