"""Synthetic illumination degradation in linear RGB."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np


class Mode(str, Enum):
    LOW_LIGHT = "low_light"
    OVER_EXPOSURE = "over_exposure"


@dataclass(frozen=True)
class DegradeParams:
    exposure: float
    gamma: float
    mode: Mode = Mode.LOW_LIGHT

    def __post_init__(self):
        if not self.exposure > 0 or not self.gamma > 0:
            raise ValueError("exposure and gamma must be positive")
        object.__setattr__(self, "mode", Mode(self.mode))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


@dataclass(frozen=True)
class DegradeConfig:
    exposure_min: float = 0.05
    exposure_max: float = 0.1
    gamma_min: float = 1.3
    gamma_max: float = 1.4
    seed: int = 0
    mode: Mode = Mode.LOW_LIGHT

    def __post_init__(self):
        if not (0 < self.exposure_min <= self.exposure_max):
            raise ValueError(f"invalid exposure bounds [{self.exposure_min}, {self.exposure_max}]")
        if not (0 < self.gamma_min <= self.gamma_max):
            raise ValueError(f"invalid gamma bounds [{self.gamma_min}, {self.gamma_max}]")
        object.__setattr__(self, "mode", Mode(self.mode))

    @classmethod
    def over_exposure(cls, seed: int = 0) -> "DegradeConfig":
        return cls(3.0, 5.0, 0.7, 0.8, seed, Mode.OVER_EXPOSURE)


def sample_params(config: DegradeConfig, rng: np.random.Generator | None = None) -> DegradeParams:
    """Draw one (exposure, gamma) pair; one draw is shared by every view of a scene."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    exposure = rng.uniform(config.exposure_min, config.exposure_max)
    gamma = rng.uniform(config.gamma_min, config.gamma_max)
    if config.exposure_min == config.exposure_max:
        exposure = config.exposure_min
    if config.gamma_min == config.gamma_max:
        gamma = config.gamma_min
    return DegradeParams(float(exposure), float(gamma), config.mode)


def darken(img, p: DegradeParams) -> np.ndarray:
    """Exposure scale, clamp to [0, 1], then gamma."""
    if p.mode is not Mode.LOW_LIGHT:
        raise ValueError(f"darken needs low_light params, got {p.mode.value}")
    return np.clip(p.exposure * np.asarray(img, dtype=np.float64), 0.0, 1.0) ** p.gamma


def overexpose(img, p: DegradeParams) -> np.ndarray:
    if p.mode is not Mode.OVER_EXPOSURE:
        raise ValueError(f"overexpose needs over_exposure params, got {p.mode.value}")
    scaled = np.clip(p.exposure * np.asarray(img, dtype=np.float64), 0.0, None)
    return np.clip(scaled ** p.gamma, 0.0, 1.0)


def degrade(img, p: DegradeParams) -> np.ndarray:
    return darken(img, p) if p.mode is Mode.LOW_LIGHT else overexpose(img, p)


def undegrade(img, p: DegradeParams) -> np.ndarray:
    """Inverse of the degradation on pixels that were not clipped."""
    if p.gamma == 0 or p.exposure == 0:
        raise ValueError("exposure and gamma must be non-zero")
    return np.asarray(img, dtype=np.float64) ** (1.0 / p.gamma) / p.exposure
