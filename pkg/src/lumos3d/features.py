"""Multi-scale feature extraction for the content and voxel losses.

The default extractor is training-free: per level, luminance, its horizontal
and vertical central differences, and the 3x3 local standard deviation, with
2x average pooling between levels. Every stage is linear or pointwise, so the
backward pass is the transpose of cached sparse operators plus pointwise
chain rules.

The ``external_weights`` extractor loads 3x3 convolution kernels from a JSON
manifest ``{"conv1": "conv1.lumt", ..., "conv5": "conv5.lumt"}`` (paths
relative to the manifest). Each kernel is a LUMT tensor of shape
(C_out, C_in, 3, 3); optional ``convK_bias`` entries hold (C_out,) biases.
Level 1 is relu(conv1(rgb)); level i is relu(conv_i(avgpool2(level i-1))),
with zero padding.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .core import tensor_read
from .voxelfeat import normalize_weights

NUM_LEVELS = 5
LUMA = np.array([0.2126, 0.7152, 0.0722])
STD_EPS = 1e-6
CHANNELS = ("luminance", "grad_x", "grad_y", "local_std")


@dataclass
class FeaturePyramid:
    """``levels[i]`` has shape (..., h_i, w_i, C) with stride 2**i relative to the input."""

    levels: list

    @classmethod
    def stack(cls, pyramids) -> "FeaturePyramid":
        pyramids = list(pyramids)
        return cls([np.stack([p.levels[i] for p in pyramids]) for i in range(len(pyramids[0].levels))])


@dataclass(frozen=True)
class ExtractorSpec:
    kind: str = "fixed_pyramid"
    weight_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("fixed_pyramid", "external_weights"):
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        if self.kind == "external_weights":
            if self.weight_path is None or not Path(self.weight_path).is_file():
                raise FileNotFoundError(f"unreadable weight manifest: {self.weight_path}")


def level_shapes(height: int, width: int, levels: int = NUM_LEVELS):
    shapes = [(height, width)]
    for _ in range(levels - 1):
        h, w = shapes[-1]
        shapes.append(((h + 1) // 2, (w + 1) // 2))
    return shapes


def _replicate(i, n):
    return np.clip(i, 0, n - 1)


@lru_cache(maxsize=64)
def _pool_op(h: int, w: int) -> sp.csr_matrix:
    """2x average pooling with ceil output size; edge cells average what they cover."""
    ho, wo = (h + 1) // 2, (w + 1) // 2
    rows, cols, vals = [], [], []
    oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    for ky in (0, 1):
        for kx in (0, 1):
            iy, ix = 2 * oy + ky, 2 * ox + kx
            ok = (iy < h) & (ix < w)
            rows.append((oy * wo + ox)[ok])
            cols.append((iy * w + ix)[ok])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    counts = np.bincount(rows, minlength=ho * wo)
    vals = 1.0 / counts[rows]
    return sp.csr_matrix((vals, (rows, cols)), shape=(ho * wo, h * w))


@lru_cache(maxsize=64)
def _stencil_ops(h: int, w: int):
    """(grad_x, grad_y, box3) operators with replicate padding, acting on flattened h*w images."""
    y, x = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = (y * w + x).ravel()

    def op(taps):
        rows, cols, vals = [], [], []
        for dy, dx, wt in taps:
            src = (_replicate(y + dy, h) * w + _replicate(x + dx, w)).ravel()
            rows.append(out)
            cols.append(src)
            vals.append(np.full(out.shape, wt))
        m = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(h * w, h * w))
        return m.tocsr()  # duplicates are summed

    gx = op([(0, 1, 0.5), (0, -1, -0.5)])
    gy = op([(1, 0, 0.5), (-1, 0, -0.5)])
    box = op([(dy, dx, 1.0 / 9.0) for dy in (-1, 0, 1) for dx in (-1, 0, 1)])
    return gx, gy, box


def _fixed_forward(img):
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape[:2]
    shapes = level_shapes(H, W)
    P = (img @ LUMA).ravel()
    levels, cache = [], []
    for i, (h, w) in enumerate(shapes):
        if i > 0:
            P = _pool_op(*shapes[i - 1]) @ P
        gx, gy, box = _stencil_ops(h, w)
        m = box @ P
        var_raw = box @ (P * P) - m * m
        var = np.maximum(var_raw, 0.0)
        root = np.sqrt(var + STD_EPS)
        std = root - np.sqrt(STD_EPS)
        levels.append(np.stack([P, gx @ P, gy @ P, std], axis=1).reshape(h, w, 4))
        cache.append((P, m, var_raw, root))
    return FeaturePyramid(levels), (shapes, cache)


def _fixed_backward(state, grads):
    shapes, cache = state
    g_next = None
    for i in range(len(shapes) - 1, -1, -1):
        h, w = shapes[i]
        P, m, var_raw, root = cache[i]
        gP = np.zeros(h * w) if g_next is None else g_next
        g = grads[i]
        if g is not None:
            g = np.asarray(g, dtype=np.float64).reshape(h * w, 4)
            gx, gy, box = _stencil_ops(h, w)
            gP = gP + g[:, 0] + gx.T @ g[:, 1] + gy.T @ g[:, 2]
            g_var = np.where(var_raw > 0, g[:, 3] / (2.0 * root), 0.0)
            gP = gP + 2.0 * P * (box.T @ g_var) - 2.0 * (box.T @ (m * g_var))
        g_next = _pool_op(*shapes[i - 1]).T @ gP if i > 0 else gP
    H, W = shapes[0]
    return g_next.reshape(H, W, 1) * LUMA


def _conv3(x, K, b):
    h, w, _ = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros((h, w, K.shape[0]))
    for ky in range(3):
        for kx in range(3):
            out += xp[ky:ky + h, kx:kx + w] @ K[:, :, ky, kx].T
    return out + b


def _conv3_backward(g_out, K, shape):
    h, w, cin = shape
    gxp = np.zeros((h + 2, w + 2, cin))
    for ky in range(3):
        for kx in range(3):
            gxp[ky:ky + h, kx:kx + w] += g_out @ K[:, :, ky, kx]
    return gxp[1:-1, 1:-1]


def _pool_channels(x):
    h, w, c = x.shape
    return (_pool_op(h, w) @ x.reshape(h * w, c)).reshape((h + 1) // 2, (w + 1) // 2, c)


def _pool_channels_backward(g, shape):
    h, w, c = shape
    return (_pool_op(h, w).T @ g.reshape(-1, c)).reshape(h, w, c)


@lru_cache(maxsize=8)
def load_external_weights(manifest_path: str):
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FileNotFoundError(f"unreadable weight manifest {manifest_path}: {exc}") from exc
    layers = []
    for i in range(1, NUM_LEVELS + 1):
        name = f"conv{i}"
        if name not in manifest:
            raise ValueError(f"weight manifest lacks {name}")
        K = tensor_read(manifest_path.parent / manifest[name]).astype(np.float64)
        if K.ndim != 4 or K.shape[2:] != (3, 3):
            raise ValueError(f"{name}: expected (C_out, C_in, 3, 3) kernel, got {K.shape}")
        cin = 3 if i == 1 else layers[-1][0].shape[0]
        if K.shape[1] != cin:
            raise ValueError(f"{name}: expects {K.shape[1]} input channels, previous level has {cin}")
        bname = f"{name}_bias"
        b = (tensor_read(manifest_path.parent / manifest[bname]).astype(np.float64).reshape(K.shape[0])
             if bname in manifest else np.zeros(K.shape[0]))
        layers.append((K, b))
    return tuple(layers)


def _external_forward(img, layers):
    x = np.asarray(img, dtype=np.float64)
    levels, cache = [], []
    for i, (K, b) in enumerate(layers):
        pre_shape = x.shape
        if i > 0:
            x = _pool_channels(x)
        z = _conv3(x, K, b)
        cache.append((pre_shape, x.shape, z > 0))
        x = np.maximum(z, 0.0)
        levels.append(x)
    return FeaturePyramid(levels), cache


def _external_backward(cache, grads, layers):
    g_next = None
    for i in range(len(layers) - 1, -1, -1):
        pre_shape, in_shape, active = cache[i]
        g = np.zeros(active.shape) if g_next is None else g_next
        if grads[i] is not None:
            g = g + grads[i]
        g_in = _conv3_backward(np.where(active, g, 0.0), layers[i][0], in_shape)
        g_next = _pool_channels_backward(g_in, pre_shape) if i > 0 else g_in
    return g_next


class Extractor:
    """Feature pyramid extractor with an explicit adjoint."""

    def __init__(self, spec: ExtractorSpec = ExtractorSpec()):
        self.spec = spec
        self._layers = (load_external_weights(str(Path(spec.weight_path).resolve()))
                        if spec.kind == "external_weights" else None)

    def forward(self, img):
        if self._layers is None:
            return _fixed_forward(img)
        return _external_forward(img, self._layers)

    def backward(self, state, grads):
        """Image cotangent (H, W, 3) from per-level cotangents (None = zero)."""
        if self._layers is None:
            return _fixed_backward(state, grads)
        return _external_backward(state, grads, self._layers)


def extract(img, spec: ExtractorSpec = ExtractorSpec()) -> FeaturePyramid:
    return Extractor(spec).forward(img)[0]


def content_loss(F_r: FeaturePyramid, F_c: FeaturePyramid, layer_weights=(0.5, 0.5)):
    """Weighted per-site L1 over the two deepest levels.

    Returns ``(loss, grads)``; ``grads`` lists one array per level of ``F_r``
    (None for levels that do not enter the loss).
    """
    if len(F_r.levels) != len(F_c.levels):
        raise ValueError("pyramids have different depths")
    w = normalize_weights(layer_weights, 2, "content layer")
    grads = [None] * len(F_r.levels)
    loss = 0.0
    for wi, li in zip(w, (len(F_r.levels) - 2, len(F_r.levels) - 1)):
        a, b = F_r.levels[li], F_c.levels[li]
        if a.shape != b.shape:
            raise ValueError(f"level {li + 1} shapes differ: {a.shape} vs {b.shape}")
        diff = a - b
        sites = diff.size // diff.shape[-1]
        loss += wi * np.abs(diff).sum() / sites
        grads[li] = wi * np.sign(diff) / sites
    return float(loss), grads
