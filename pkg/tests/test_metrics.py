import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lumos3d.core import to_srgb8
from lumos3d.metrics import PSNR_CAP, evaluate, gaussian_window, psnr, ssim

# (2*0.2*0.8 + 1e-4) / (0.2**2 + 0.8**2 + 1e-4), 15 digits
SSIM_CONST_02_08 = 0.470666078517865


def test_psnr_examples():
    a = np.random.default_rng(0).uniform(0, 0.9, size=(8, 8, 3))
    assert psnr(a, a) == PSNR_CAP == 99.0
    assert psnr(a + 0.1, a) == pytest.approx(20.0, abs=1e-9)


def test_psnr_brute_force():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(2, 7, 9, 3))
    mse = sum((a[idx] - b[idx]) ** 2 for idx in np.ndindex(a.shape)) / a.size
    assert psnr(a, b) == pytest.approx(10 * np.log10(1 / mse), abs=1e-9)


def test_ssim_examples():
    a = np.random.default_rng(2).uniform(size=(16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    c1 = np.full((16, 16), 0.2)
    c2 = np.full((16, 16), 0.8)
    assert ssim(c1, c2) == pytest.approx(SSIM_CONST_02_08, abs=1e-6)
    assert ssim(np.full((16, 16, 3), 0.2), np.full((16, 16, 3), 0.8)) == pytest.approx(SSIM_CONST_02_08, abs=1e-6)
    b = np.random.default_rng(3).uniform(size=(16, 16, 3))
    assert ssim(a, b) == ssim(b, a)


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 20)), np.zeros((10, 20)))
    with pytest.raises(ValueError):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4))


def test_gaussian_window():
    g = gaussian_window()
    assert g.shape == (11,) and g.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.array_equal(g, g[::-1]) and np.argmax(g) == 5


def test_evaluate_quantizes():
    rng = np.random.default_rng(4)
    a = rng.uniform(size=(16, 16, 3))
    b = np.clip(a + rng.normal(0, 0.05, size=a.shape), 0, 1)
    rep = evaluate([a, a], [a, a])
    assert rep.psnr == 99.0 and rep.ssim == pytest.approx(1.0) and len(rep.per_view) == 2
    qa, qb = to_srgb8(a) / 255.0, to_srgb8(b) / 255.0
    rep = evaluate([a], [b])
    assert rep.psnr == psnr(qa, qb) and rep.ssim == ssim(qa, qb)
    assert evaluate([a], [b], quantize=False).psnr == psnr(a, b)
    with pytest.raises(ValueError):
        evaluate([], [])
    assert evaluate([a], [a], names=["v0"]).to_dict()["per_view"][0]["view"] == "v0"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_flip_invariance_and_range(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 14, 13, 3))
    s = ssim(a, b)
    assert -1 <= s <= 1
    for ax in (0, 1):
        assert ssim(np.flip(a, ax), np.flip(b, ax)) == pytest.approx(s, abs=1e-12)
        assert psnr(np.flip(a, ax), np.flip(b, ax)) == pytest.approx(psnr(a, b), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 0.2), st.floats(1.1, 3.0))
def test_psnr_decreases_with_noise(seed, amp, factor):
    a = np.full((8, 8), 0.5)
    n = np.random.default_rng(seed).uniform(-1, 1, size=a.shape)
    assert psnr(a + amp * factor * n, a) < psnr(a + amp * n, a)
