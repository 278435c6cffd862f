import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lumos3d.voxelfeat import (STATS_EPS, VoxelStats, default_voxel_sizes, downsample_nearest, voxel_loss,
                               voxel_stats, voxel_stats_backward, voxelize, voxelize_backward)


def brute_voxelize(points, feats, size, origin):
    """Group by quantized key with plain Python loops."""
    groups = {}
    for p, f in zip(points, feats):
        key = tuple(int(math.floor((p[k] - origin[k]) / size)) for k in range(3))
        groups.setdefault(key, []).append(f)
    return {k: (np.mean(v, axis=0), len(v)) for k, v in groups.items()}


def test_single_cell_plain_mean():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0.1, 0.2, size=(10, 3))
    feats = rng.normal(size=(10, 2))
    grid = voxelize(pts, feats, 1.0)
    assert len(grid) == 1 and np.allclose(grid.features[0], feats.mean(axis=0), atol=1e-15)
    assert grid.counts[0] == 10


def test_matches_brute_force_100_points():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1, 1, size=(100, 3))
    feats = rng.normal(size=(100, 3))
    grid = voxelize(pts, feats, 0.25)
    ref = brute_voxelize(pts, feats, 0.25, (0, 0, 0))
    got = grid.cells()
    assert set(got) == set(ref)
    for k, (f, c) in ref.items():
        assert got[k][1] == c and np.allclose(got[k][0], f, atol=1e-12)


def test_translation_covariance():
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, size=(60, 3))
    feats = rng.normal(size=(60, 2))
    shift = np.array([0.37, -1.2, 5.0])
    a = voxelize(pts, feats, 0.3, (0.1, 0.2, 0.3))
    b = voxelize(pts + shift, feats, 0.3, np.array([0.1, 0.2, 0.3]) + shift)
    assert np.array_equal(a.keys, b.keys) and np.allclose(a.features, b.features, atol=1e-12)


def test_mask_and_errors():
    pts = np.zeros((2, 2, 3))
    feats = np.ones((2, 2, 1))
    mask = np.array([[True, False], [False, False]])
    g = voxelize(pts, feats, 0.5, mask=mask)
    assert g.counts.tolist() == [1]
    with pytest.raises(ValueError):
        voxelize(pts, feats, 0.0)
    with pytest.raises(ValueError):
        voxelize(pts, feats, 0.5, mask=np.zeros((2, 2), bool))
    with pytest.raises(ValueError):
        voxelize(pts, np.ones((2, 3, 1)), 0.5)


def test_stats_examples():
    pts = np.array([[0.1, 0, 0], [1.1, 0, 0]])
    g = voxelize(pts, np.array([[0.0], [2.0]]), 1.0)
    st_ = voxel_stats(g)
    assert st_.mean[0] == 1.0 and st_.std[0] == pytest.approx(math.sqrt(1 + STATS_EPS), abs=1e-15)
    same = voxelize(pts, np.array([[3.0], [3.0]]), 1.0)
    assert voxel_stats(same).std[0] == pytest.approx(math.sqrt(STATS_EPS), abs=1e-15)


def test_stats_permutation_invariant():
    rng = np.random.default_rng(3)
    pts = rng.uniform(size=(50, 3))
    feats = rng.normal(size=(50, 4))
    perm = rng.permutation(50)
    a, b = voxel_stats(voxelize(pts, feats, 0.2)), voxel_stats(voxelize(pts[perm], feats[perm], 0.2))
    assert np.allclose(a.mean, b.mean, atol=1e-15) and np.allclose(a.std, b.std, atol=1e-15)


def test_voxel_loss_examples():
    s = VoxelStats(np.array([0.5]), np.array([1.0]))
    assert voxel_loss([s], [s], [1.0])[0] == 0.0
    t = VoxelStats(np.array([0.3]), np.array([0.9]))
    assert voxel_loss([s], [t], [1.0])[0] == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(ValueError):
        voxel_loss([s, s], [s], [0.5, 0.5])


def test_voxel_loss_renormalizes_with_warning():
    s = VoxelStats(np.array([1.0]), np.array([1.0]))
    t = VoxelStats(np.array([0.0]), np.array([1.0]))
    with pytest.warns(UserWarning):
        loss = voxel_loss([s, s], [t, t], [1.0, 1.0])[0]
    assert loss == pytest.approx(1.0)


def chained_loss(pts, feats, size, teacher):
    grid = voxelize(pts, feats, size)
    st_ = voxel_stats(grid)
    return grid, st_, voxel_loss([st_], [teacher], [1.0])


def test_gradient_chain_fd_20x4():
    rng = np.random.default_rng(4)
    pts = rng.uniform(0, 1, size=(20, 3))
    feats = rng.normal(size=(20, 4))
    teacher = VoxelStats(rng.normal(size=4), rng.uniform(0.5, 1.5, size=4))
    grid, st_, (loss, grads) = chained_loss(pts, feats, 0.4, teacher)
    g_cells = voxel_stats_backward(grid, st_, *grads[0])
    g_feats = voxelize_backward(grid, g_cells)
    h = 1e-6
    fd = np.zeros_like(feats)
    for idx in np.ndindex(feats.shape):
        d = np.zeros_like(feats)
        d[idx] = h
        fd[idx] = (chained_loss(pts, feats + d, 0.4, teacher)[2][0]
                   - chained_loss(pts, feats - d, 0.4, teacher)[2][0]) / (2 * h)
    assert np.linalg.norm(g_feats - fd) / np.linalg.norm(fd) < 1e-3


def test_fine_voxels_are_identity():
    rng = np.random.default_rng(5)
    pts = rng.uniform(size=(30, 3))
    feats = rng.normal(size=(30, 2))
    grid = voxelize(pts, feats, 1e-6)
    assert len(grid) == 30
    st_ = voxel_stats(grid)
    assert np.allclose(st_.mean, feats.mean(0), atol=1e-14)
    assert np.allclose(st_.std, np.sqrt(feats.var(0) + STATS_EPS), atol=1e-14)


def test_within_voxel_shuffle_invariant():
    rng = np.random.default_rng(6)
    pts = rng.uniform(size=(40, 3))
    feats = rng.normal(size=(40, 3))
    grid = voxelize(pts, feats, 0.5)
    shuffled = feats.copy()
    for c in range(len(grid)):
        members = np.flatnonzero(grid.inverse == c)
        shuffled[members] = feats[rng.permutation(members)]
    a, b = voxel_stats(grid), voxel_stats(voxelize(pts, shuffled, 0.5))
    assert np.allclose(a.mean, b.mean, atol=1e-14) and np.allclose(a.std, b.std, atol=1e-14)


def test_default_sizes_and_downsample():
    pts = np.zeros((1, 4, 4, 3))
    pts[0, 3, 3] = [1.0, 2.0, 2.0]
    sizes, origin = default_voxel_sizes(pts)
    assert sizes[0] == pytest.approx(3.0 / 64) and sizes[4] == pytest.approx(16 * 3.0 / 64)
    assert np.array_equal(origin, [0, 0, 0])
    arr = np.arange(2 * 5 * 5).reshape(2, 5, 5)
    assert downsample_nearest(arr, 2).shape == (2, 3, 3)
    assert downsample_nearest(arr, 2)[1, 1, 1] == arr[1, 2, 2]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 2.0))
def test_property_brute_force(seed, size):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(50, 3))
    feats = rng.normal(size=(50, 2))
    origin = rng.normal(size=3)
    got = voxelize(pts, feats, size, origin).cells()
    ref = brute_voxelize(pts, feats, size, origin)
    assert set(got) == set(ref)
    assert all(np.allclose(got[k][0], ref[k][0], atol=1e-12) for k in ref)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_property_loss_nonnegative_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    a = [VoxelStats(rng.normal(size=3), rng.uniform(size=3)) for _ in range(5)]
    b = [VoxelStats(rng.normal(size=3), rng.uniform(size=3)) for _ in range(5)]
    assert voxel_loss(a, b)[0] > 0
    assert voxel_loss(a, a)[0] == 0
    assert voxel_loss(a[::-1], b[::-1])[0] == pytest.approx(voxel_loss(a, b)[0], abs=1e-14)
