import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lumos3d.core import tensor_write
from lumos3d.features import (LUMA, NUM_LEVELS, Extractor, ExtractorSpec, FeaturePyramid, content_loss,
                              extract, level_shapes)


def rand_img(seed, h=21, w=19):
    return np.random.default_rng(seed).uniform(size=(h, w, 3))


def test_level_shapes_ceil_halving():
    assert level_shapes(37, 21) == [(37, 21), (19, 11), (10, 6), (5, 3), (3, 2)]
    pyr = extract(rand_img(0, 37, 21))
    assert [lv.shape for lv in pyr.levels] == [s + (4,) for s in level_shapes(37, 21)]


def test_constant_image_zero_gradients_and_std():
    pyr = extract(np.full((24, 24, 3), 0.37))
    for lv in pyr.levels:
        assert np.allclose(lv[..., 0], 0.37 * LUMA.sum(), atol=1e-12)
        assert np.max(np.abs(lv[..., 1:])) < 1e-12


def test_vertical_step_edge():
    img = np.zeros((16, 16, 3))
    img[:, 8:] = 1.0
    lv = extract(img).levels[0]
    gx, gy = lv[..., 1], lv[..., 2]
    lum = LUMA.sum()
    # central difference (P[x+1] - P[x-1]) / 2 is nonzero only on the two columns beside the edge
    assert np.allclose(gx[:, 7], 0.5 * lum) and np.allclose(gx[:, 8], 0.5 * lum)
    assert np.all(gx[:, [c for c in range(16) if c not in (7, 8)]] == 0)
    assert np.argmax(gx[0]) in (7, 8)
    assert np.all(gy == 0)


def test_extract_deterministic():
    img = rand_img(1)
    a, b = extract(img), extract(img)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.levels, b.levels))


def test_shift_stability_deep_levels():
    y, x = np.mgrid[0:64, 0:64] / 64.0
    img = np.stack([0.5 + 0.4 * np.sin(6 * x + 3 * y), 0.5 + 0.3 * np.cos(5 * y), 0.5 + 0.2 * x], -1)
    shifted = np.roll(img, 1, axis=1)
    a, b = extract(img), extract(shifted)
    for i in (3, 4):
        assert np.mean(np.abs(a.levels[i] - b.levels[i])) < 0.05


def _adjoint_check(ext, img, seed):
    rng = np.random.default_rng(seed)
    pyr, state = ext.forward(img)
    gs = [rng.normal(size=lv.shape) for lv in pyr.levels]
    gimg = ext.backward(state, gs)
    d = rng.normal(size=img.shape)
    h = 1e-6

    def f(x):
        return sum(np.sum(g * lv) for g, lv in zip(gs, ext.forward(x)[0].levels))

    fd = (f(img + h * d) - f(img - h * d)) / (2 * h)
    return fd, float(np.sum(gimg * d))


def test_fixed_backward_matches_fd():
    fd, an = _adjoint_check(Extractor(), rand_img(2), 3)
    assert an == pytest.approx(fd, rel=1e-6)


def test_fixed_backward_partial_levels():
    ext = Extractor()
    img = rand_img(4)
    pyr, state = ext.forward(img)
    gs = [None] * NUM_LEVELS
    gs[4] = np.ones_like(pyr.levels[4])
    g = ext.backward(state, gs)
    assert g.shape == img.shape and np.all(np.isfinite(g))


def _write_weights(tmp_path, seed, with_bias=True):
    rng = np.random.default_rng(seed)
    manifest, cin = {}, 3
    for i, cout in enumerate((4, 5, 5, 6, 6), start=1):
        tensor_write(rng.normal(size=(cout, cin, 3, 3)) * 0.4, tmp_path / f"conv{i}.lumt")
        manifest[f"conv{i}"] = f"conv{i}.lumt"
        if with_bias:
            tensor_write(rng.normal(size=cout) * 0.1, tmp_path / f"conv{i}_b.lumt")
            manifest[f"conv{i}_bias"] = f"conv{i}_b.lumt"
        cin = cout
    (tmp_path / "weights.json").write_text(json.dumps(manifest))
    return tmp_path / "weights.json"


def test_external_weights_forward_and_adjoint(tmp_path):
    path = _write_weights(tmp_path, 0)
    ext = Extractor(ExtractorSpec("external_weights", str(path)))
    img = rand_img(5, 17, 15)
    pyr, _ = ext.forward(img)
    assert [lv.shape[-1] for lv in pyr.levels] == [4, 5, 5, 6, 6]
    assert [lv.shape[:2] for lv in pyr.levels] == level_shapes(17, 15)
    assert all(np.all(lv >= 0) for lv in pyr.levels)
    fd, an = _adjoint_check(ext, img, 6)
    assert an == pytest.approx(fd, rel=1e-6)


def test_external_weights_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        ExtractorSpec("external_weights", str(tmp_path / "missing.json"))
    with pytest.raises(ValueError):
        ExtractorSpec("vgg")
    path = _write_weights(tmp_path, 1, with_bias=False)
    manifest = json.loads(path.read_text())
    del manifest["conv5"]
    (tmp_path / "short.json").write_text(json.dumps(manifest))
    with pytest.raises(ValueError):
        Extractor(ExtractorSpec("external_weights", str(tmp_path / "short.json")))


# --- content loss ------------------------------------------------------------

def brute_content(Fr, Fc, w):
    total = 0.0
    for wi, li in zip(w, (3, 4)):
        a, b = Fr.levels[li], Fc.levels[li]
        sites = list(np.ndindex(a.shape[:-1]))
        total += wi * sum(sum(abs(a[s][c] - b[s][c]) for c in range(a.shape[-1])) for s in sites) / len(sites)
    return total


def test_content_examples():
    a = extract(rand_img(7))
    assert content_loss(a, a)[0] == 0.0
    b = FeaturePyramid([lv.copy() for lv in a.levels])
    b.levels[4] = b.levels[4] + 0.1
    loss, grads = content_loss(b, a, (0.0, 1.0))
    assert loss == pytest.approx(0.1 * 4, abs=1e-12)
    assert grads[0] is None and grads[4].shape == a.levels[4].shape


def test_content_weight_linearity_and_oracle():
    a, b = extract(rand_img(8)), extract(rand_img(9))
    l4 = content_loss(a, b, (1.0, 0.0))[0]
    l5 = content_loss(a, b, (0.0, 1.0))[0]
    assert content_loss(a, b, (0.5, 0.5))[0] == pytest.approx((l4 + l5) / 2, abs=1e-14)
    assert content_loss(a, b, (0.3, 0.7))[0] == pytest.approx(brute_content(a, b, (0.3, 0.7)), abs=1e-12)


def test_content_gradient_fd():
    a, b = extract(rand_img(10)), extract(rand_img(11))
    loss, grads = content_loss(a, b)
    rng = np.random.default_rng(0)
    h = 1e-7
    for li in (3, 4):
        d = rng.normal(size=a.levels[li].shape)
        ap = FeaturePyramid([lv + (h * d if i == li else 0) for i, lv in enumerate(a.levels)])
        am = FeaturePyramid([lv - (h * d if i == li else 0) for i, lv in enumerate(a.levels)])
        fd = (content_loss(ap, b)[0] - content_loss(am, b)[0]) / (2 * h)
        assert fd == pytest.approx(np.sum(grads[li] * d), rel=1e-6)


def test_content_errors_and_renormalization():
    a = extract(rand_img(0, 16, 16))
    b = extract(rand_img(0, 18, 16))
    with pytest.raises(ValueError):
        content_loss(a, b)
    c = extract(rand_img(1, 16, 16))
    with pytest.warns(UserWarning):
        l = content_loss(a, c, (1.0, 1.0))[0]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert l == pytest.approx(content_loss(a, c, (0.5, 0.5))[0], abs=1e-15)


def test_content_loss_batched_site_count():
    imgs = [rand_img(i) for i in range(3)]
    refs = [rand_img(10 + i) for i in range(3)]
    Fr = FeaturePyramid.stack(extract(x) for x in imgs)
    Fc = FeaturePyramid.stack(extract(x) for x in refs)
    batched = content_loss(Fr, Fc)[0]
    single = np.mean([content_loss(extract(x), extract(y))[0] for x, y in zip(imgs, refs)])
    assert batched == pytest.approx(single, abs=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 5), st.integers(0, 5))
def test_content_nonneg_and_shift_invariant(seed, dy, dx):
    a, b = extract(rand_img(seed, 16, 16)), extract(rand_img(seed + 1, 16, 16))
    loss = content_loss(a, b)[0]
    roll = lambda F: FeaturePyramid([np.roll(lv, (dy, dx), axis=(0, 1)) for lv in F.levels])
    assert loss >= 0
    assert content_loss(roll(a), roll(b))[0] == pytest.approx(loss, abs=1e-14)
