import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lumos3d.losses import (LossReport, LumosWeights, ObjectiveWeights, image_loss, lumos_loss, rec_loss,
                            total_loss)


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        d = np.zeros_like(x)
        d[idx] = h
        g[idx] = (f(x + d) - f(x - d)) / (2 * h)
    return g


def test_image_loss_examples():
    a = np.random.default_rng(0).uniform(size=(2, 4, 4, 3))
    assert image_loss(a, a)[0] == 0.0
    assert image_loss(np.zeros((2, 3, 3, 3)), np.ones((2, 3, 3, 3)))[0] == 1.0


def test_image_loss_gradient_fd():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(2, 2, 3, 3, 3))
    loss, g = image_loss(a, b)
    assert np.max(np.abs(g - fd_grad(lambda x: image_loss(x, b)[0], a))) < 1e-6
    assert np.all(image_loss(a, a)[1] == 0)


def test_rec_loss_examples_and_fd():
    a = np.random.default_rng(2).uniform(size=(2, 3, 3, 3))
    assert rec_loss(a, a)[0] == 0.0
    assert rec_loss(a + 0.1, a)[0] == pytest.approx(0.01, abs=1e-15)
    b = np.random.default_rng(3).uniform(size=a.shape)
    loss, g = rec_loss(a, b)
    assert np.allclose(g, 2 * (a - b) / a.size, atol=1e-15)
    assert np.max(np.abs(g - fd_grad(lambda x: rec_loss(x, b)[0], a))) < 1e-6
    assert rec_loss(a, b, "l1")[0] == image_loss(a, b)[0]
    with pytest.raises(ValueError):
        rec_loss(a, b, "huber")


def test_shape_mismatch():
    with pytest.raises(ValueError):
        image_loss(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        rec_loss(np.zeros((2, 2)), np.zeros((3, 2)))


def test_lumos_and_total_examples():
    assert LumosWeights() == LumosWeights(0.1, 1.0, 0.01)
    assert ObjectiveWeights() == ObjectiveWeights(1.0, 1.0)
    assert lumos_loss(0, 0, 0) == 0
    assert lumos_loss(1, 1, 1) == pytest.approx(1.11, abs=1e-15)
    assert lumos_loss(2, 0, 0) == pytest.approx(0.2, abs=1e-15)
    assert total_loss(0, 0, 0) == 0
    assert total_loss(1, 2, 3) == 6


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LumosWeights(lambda_v=-0.1)
    with pytest.raises(ValueError):
        ObjectiveWeights(omega_distill=-1.0)


def test_report_check_and_json():
    lw, ow = LumosWeights(), ObjectiveWeights()
    lum = lumos_loss(1.0, 0.5, 2.0, lw)
    r = LossReport(0.3, 0.2, 1.0, 0.5, 2.0, lum, total_loss(0.3, 0.2, lum, ow), step=4)
    r.check(lw, ow)
    d = json.loads(r.to_json())
    assert d["step"] == 4 and "lr" not in d
    bad = LossReport(0.3, 0.2, 1.0, 0.5, 2.0, lum + 1e-3, r.total)
    with pytest.raises(AssertionError):
        bad.check(lw, ow)
    with pytest.raises(FloatingPointError):
        LossReport(float("nan"), 0, 0, 0, 0, 0, 0).check(lw, ow)


nonneg = st.floats(0.0, 100.0)


@settings(max_examples=100, deadline=None)
@given(nonneg, nonneg, nonneg, nonneg, nonneg, st.floats(0.0, 10.0))
def test_omega_lumos_scaling(rec, distill, lumos, wd, wl, k):
    base = total_loss(rec, distill, lumos, ObjectiveWeights(wd, wl))
    scaled = total_loss(rec, distill, lumos, ObjectiveWeights(wd, wl * k))
    assert scaled - rec - wd * distill == pytest.approx(k * (base - rec - wd * distill), rel=1e-12, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(nonneg, nonneg, nonneg, nonneg, nonneg, nonneg)
def test_losses_nonnegative(c, i, v, lc, li, lv):
    assert lumos_loss(c, i, v, LumosWeights(lc, li, lv)) >= 0
    assert total_loss(c, i, v, ObjectiveWeights(lc, li)) >= 0
