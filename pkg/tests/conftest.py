import numpy as np
import pytest

from lumos3d.core import CameraView, GaussianScene
from lumos3d.renderer import RenderOptions
from lumos3d.synth import look_at, random_scene

SMOOTH = RenderOptions(alpha_cutoff=0.0, transmittance_floor=0.0)


def make_camera(width=32, height=32, eye=(0.0, -4.0, 0.5), target=(0.0, 0.0, 0.0), f=None):
    f = f or 0.9 * width
    return CameraView(width, height, f, f, width / 2.0, height / 2.0, look_at(eye, target))


def make_scene(seed=0, n=8, sh_degree=1, extent=1.0, scale_range=(0.08, 0.2)):
    rng = np.random.default_rng(seed)
    return random_scene(rng, n, ((-extent / 2,) * 3, (extent / 2,) * 3), sh_degree, scale_range=scale_range)


@pytest.fixture
def camera():
    return make_camera()


@pytest.fixture
def scene():
    return make_scene()


def single(center=(0, 0, 0), opacity=0.8, scale=0.2, color=(1.0, 0.5, 0.25), sh_degree=0):
    from lumos3d.core import SH_C0
    k = (sh_degree + 1) ** 2
    sh = np.zeros((1, k, 3))
    sh[0, 0] = (np.asarray(color) - 0.5) / SH_C0
    return GaussianScene(np.array([center], float), np.array([opacity], float), np.array([[1.0, 0, 0, 0]]),
                         np.full((1, 3), scale, float), sh, sh_degree)
