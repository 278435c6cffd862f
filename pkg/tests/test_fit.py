import math

import numpy as np
import pytest

from lumos3d.core import SH_C0
from lumos3d.fit import (FitConfig, FitState, fit_scene, lr_schedule, prepare_context, project_constraints,
                         step, with_weights)
from lumos3d.renderer import render
from lumos3d.synth import gen_scene, teacher_point_map

COLOR_LR = 1e-2  # color-scale step for the SH-only fits


@pytest.fixture(scope="module")
def small():
    scene, cams, renders = gen_scene(seed=3, n_primitives=50, n_views=4, width=32, height=32, sh_degree=0)
    return scene, cams, [r.rgb for r in renders], teacher_point_map(renders, cams)


def perturbed_colors(scene, sigma=0.2, seed=0):
    init = scene.copy()
    init.sh[:, 0] += np.random.default_rng(seed).normal(0, sigma, size=init.sh[:, 0].shape) / SH_C0
    return init


def test_lr_examples():
    cfg = FitConfig(iters=100, warmup=10, lr_max=2e-4)
    assert lr_schedule(55, cfg) == pytest.approx(1e-4, abs=1e-18)
    assert lr_schedule(10, cfg) == 2e-4
    assert lr_schedule(9, cfg) == 2e-4
    assert lr_schedule(0, cfg) == pytest.approx(2e-5)
    assert lr_schedule(99, cfg) <= 2e-4 * 0.5 * (1 + math.cos(math.pi * (1 - 1 / 90)))
    with pytest.raises(ValueError):
        lr_schedule(100, cfg)


def test_default_warmup_scaling():
    assert FitConfig(iters=30000).resolved_warmup == 1000
    assert FitConfig(iters=60000).resolved_warmup == 1000
    assert FitConfig(iters=1000).resolved_warmup == 33
    assert FitConfig(iters=10).resolved_warmup == 0


def test_config_errors():
    with pytest.raises(ValueError):
        FitConfig(iters=10, warmup=11)
    with pytest.raises(ValueError):
        FitConfig(lr_max=0.0)
    with pytest.raises(ValueError):
        FitConfig(iters=-1)
    with pytest.raises(ValueError):
        FitConfig(trainable=("colors",))


def test_with_weights():
    cfg = with_weights(FitConfig(), lambda_v=0.0, omega_distill=0.5)
    assert cfg.lumos.lambda_v == 0.0 and cfg.lumos.lambda_c == 0.1 and cfg.objective.omega_distill == 0.5


def test_iters_zero_returns_init(small):
    scene, cams, clean, teacher = small
    out, hist = fit_scene(scene, cams, clean, None, teacher, FitConfig(iters=0))
    assert out is scene and hist == []


def test_fixed_point_at_optimum(small):
    scene, cams, clean, teacher = small
    cfg = with_weights(FitConfig(iters=3), omega_distill=0.0, omega_lumos=0.0)
    out, hist = fit_scene(scene, cams, clean, None, teacher, cfg)
    assert all(r.rec == 0.0 for r in hist)
    for g in ("centers", "opacities", "rotations", "scales", "sh"):
        assert np.array_equal(getattr(out, g), getattr(scene, g))


def test_zero_weights_leave_parameters(small):
    scene, cams, clean, teacher = small
    init = perturbed_colors(scene)
    cfg = FitConfig(iters=3, trainable=())
    out, _ = fit_scene(init, cams, clean, None, teacher, cfg)
    assert np.array_equal(out.sh, init.sh) and np.array_equal(out.centers, init.centers)


def test_deterministic_histories(small):
    scene, cams, clean, teacher = small
    init = perturbed_colors(scene)
    cfg = FitConfig(iters=4, lr_max=COLOR_LR)
    a = fit_scene(init, cams, clean, None, teacher, cfg)
    b = fit_scene(init, cams, clean, None, teacher, cfg)
    assert [r.to_json() for r in a[1]] == [r.to_json() for r in b[1]]
    assert a[0].sh.tobytes() == b[0].sh.tobytes()


def test_threads_match_serial(small):
    scene, cams, clean, teacher = small
    init = perturbed_colors(scene)
    a = fit_scene(init, cams, clean, None, teacher, FitConfig(iters=2, lr_max=COLOR_LR))
    b = fit_scene(init, cams, clean, None, teacher, FitConfig(iters=2, lr_max=COLOR_LR, threads=3))
    assert [r.total for r in a[1]] == [r.total for r in b[1]]


def _image_loss_drop(small, cfg):
    scene, cams, clean, teacher = small
    _, hist = fit_scene(perturbed_colors(scene), cams, clean, None, teacher, cfg)
    image = np.array([r.image for r in hist])
    # monotone on average: each 50-step window mean below the previous one
    windows = image[: len(image) // 50 * 50].reshape(-1, 50).mean(axis=1)
    return image[-1] / image[0], windows


def test_color_only_fit_converges(small):
    ratio, windows = _image_loss_drop(small, FitConfig(iters=300, lr_max=COLOR_LR, trainable=("sh",)))
    assert ratio < 0.1
    assert np.all(np.diff(windows) < 0)


def test_rec_and_distill_only_converges(small):
    cfg = with_weights(FitConfig(iters=300, lr_max=COLOR_LR, trainable=("sh",)), omega_lumos=0.0)
    ratio, windows = _image_loss_drop(small, cfg)
    assert ratio < 0.2
    assert np.all(np.diff(windows) < 0)


def test_step_projects_constraints(small):
    scene, cams, clean, teacher = small
    state = FitState.initial(scene)
    state.scene.opacities[0] = 1.5
    state.scene.scales[1] = -0.1
    state.scene.rotations[2] *= 3.0
    cfg = FitConfig(iters=2, lr_max=COLOR_LR)
    state, report = step(state, cams, clean, clean, teacher, cfg)
    s = state.scene
    assert s.opacities.max() <= 1.0 and s.scales.min() >= 1e-6
    assert np.allclose(np.linalg.norm(s.rotations, axis=1), 1.0)
    assert state.step == 1 and report.step == 0 and report.lr == lr_schedule(0, cfg)


def test_project_constraints_direct(small):
    s = small[0].copy()
    s.opacities[:] = -1
    project_constraints(s)
    assert np.all(s.opacities == 0)


def test_count_mismatch_errors(small):
    scene, cams, clean, teacher = small
    with pytest.raises(ValueError):
        prepare_context(cams[:3], clean, teacher, FitConfig())
    with pytest.raises(ValueError):
        step(FitState.initial(scene), cams, clean, clean[:2], teacher, FitConfig(iters=1))
    with pytest.raises(ValueError):
        prepare_context(cams, clean, teacher, FitConfig(voxel_weights=(0.5, 0.5)))


def test_rendered_targets_give_zero_rec(small):
    scene, cams, clean, _ = small
    assert all(np.array_equal(render(scene, c).rgb, t) for c, t in zip(cams, clean))
