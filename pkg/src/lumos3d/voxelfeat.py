"""Voxel pooling of per-pixel features and the voxel-statistics loss."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

STATS_EPS = 1e-8


@dataclass
class VoxelGrid:
    """Occupied cells, sorted lexicographically by integer key.

    ``inverse`` maps each valid input point (in flattened input order) to its
    cell; ``valid`` is the flattened input mask.
    """

    voxel_size: float
    origin: np.ndarray
    keys: np.ndarray      # (M, 3) int64
    features: np.ndarray  # (M, C) cell means
    counts: np.ndarray    # (M,)
    inverse: np.ndarray
    valid: np.ndarray
    input_shape: tuple

    def __len__(self) -> int:
        return len(self.keys)

    def cells(self) -> dict:
        return {tuple(int(v) for v in k): (f, int(c)) for k, f, c in zip(self.keys, self.features, self.counts)}


@dataclass
class VoxelStats:
    mean: np.ndarray  # (C,)
    std: np.ndarray   # (C,)


def voxelize(points, feats, voxel_size: float, origin=(0.0, 0.0, 0.0), mask=None) -> VoxelGrid:
    """Average the features of all points that share a voxel index floor((p - origin) / size)."""
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    points = np.asarray(points, dtype=np.float64)
    feats = np.asarray(feats, dtype=np.float64)
    if points.shape[:-1] != feats.shape[:-1] or points.shape[-1] != 3:
        raise ValueError(f"points {points.shape} and features {feats.shape} are not pixel-aligned")
    lead = points.shape[:-1]
    P = points.reshape(-1, 3)
    Fe = feats.reshape(-1, feats.shape[-1])
    valid = np.all(np.isfinite(P), axis=1)
    if mask is not None:
        valid &= np.broadcast_to(np.asarray(mask, dtype=bool), lead).reshape(-1)
    if not valid.any():
        raise ValueError("no valid points to voxelize")
    origin = np.asarray(origin, dtype=np.float64)
    keys = np.floor((P[valid] - origin) / voxel_size).astype(np.int64)
    ukeys, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(ukeys), Fe.shape[1]))
    np.add.at(sums, inverse, Fe[valid])
    return VoxelGrid(float(voxel_size), origin, ukeys, sums / counts[:, None], counts, inverse, valid, lead)


def voxelize_backward(grid: VoxelGrid, g_cells) -> np.ndarray:
    """Per-point feature cotangent (input shape + (C,)) from per-cell cotangents."""
    g_cells = np.asarray(g_cells, dtype=np.float64)
    out = np.zeros((grid.valid.size, g_cells.shape[1]))
    out[grid.valid] = (g_cells / grid.counts[:, None])[grid.inverse]
    return out.reshape(grid.input_shape + (g_cells.shape[1],))


def voxel_stats(grid: VoxelGrid) -> VoxelStats:
    """Channel-wise mean and population std over occupied cells (eps inside the root)."""
    if len(grid) == 0:
        raise ValueError("empty voxel grid")
    f = grid.features
    mu = f.mean(axis=0)
    var = np.mean((f - mu) ** 2, axis=0)
    return VoxelStats(mu, np.sqrt(var + STATS_EPS))


def voxel_stats_backward(grid: VoxelGrid, stats: VoxelStats, g_mean, g_std) -> np.ndarray:
    f = grid.features
    m = len(f)
    return (np.asarray(g_mean)[None, :] / m
            + np.asarray(g_std)[None, :] * (f - stats.mean) / (m * stats.std[None, :]))


def normalize_weights(weights, count: int, what: str) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != count:
        raise ValueError(f"{what}: expected {count} weights, got {len(w)}")
    if np.any(w < 0):
        raise ValueError(f"{what}: weights must be non-negative")
    total = w.sum()
    if not np.isclose(total, 1.0, rtol=0, atol=1e-12):
        warnings.warn(f"{what} weights sum to {total}; renormalizing", stacklevel=3)
        w = w / total
    return w


def voxel_loss(restored, teacher, weights=None):
    """Sum_i w_i (|mu_r - mu_d|_1 + |sigma_r - sigma_d|_1).

    Returns ``(loss, grads)`` with ``grads[i] = (g_mean, g_std)`` for the restored stats.
    """
    restored, teacher = list(restored), list(teacher)
    if len(restored) != len(teacher):
        raise ValueError(f"scale count mismatch: {len(restored)} vs {len(teacher)}")
    n = len(restored)
    w = normalize_weights(np.full(n, 1.0 / n) if weights is None else weights, n, "voxel scale")
    loss, grads = 0.0, []
    for wi, r, d in zip(w, restored, teacher):
        dm = r.mean - d.mean
        ds = r.std - d.std
        loss += wi * (np.abs(dm).sum() + np.abs(ds).sum())
        grads.append((wi * np.sign(dm), wi * np.sign(ds)))
    return float(loss), grads


def default_voxel_sizes(points, mask=None, levels: int = 5, divisions: float = 64.0):
    """Per-scale sizes v0 * 2**i with v0 = bounding-box diagonal / 64; plus the box minimum as origin."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if mask is not None:
        P = P[np.asarray(mask, dtype=bool).reshape(-1)]
    if len(P) == 0:
        raise ValueError("no valid points")
    lo, hi = P.min(axis=0), P.max(axis=0)
    v0 = max(float(np.linalg.norm(hi - lo)) / divisions, 1e-9)
    return [v0 * 2.0 ** i for i in range(levels)], lo


def downsample_nearest(arr, stride: int):
    """Top-left pixel of each stride x stride block of an (S, H, W, ...) array.

    The result has ceil(H / stride) rows, matching the pyramid level sizes.
    """
    return arr[:, ::stride, ::stride]
