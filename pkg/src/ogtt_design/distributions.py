"""Priors for inference and for design, and the measurement-noise model.

Gamma distributions are parameterised by (shape, scale): ``Gamma(10, 1/20)``
for the digestive mean life has mean 0.5 h.  ``Normal(80, 100)`` for the
arrival glucose is read as (mean, variance), i.e. sd 10 mg/dl.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from numba import njit

from .errors import ConfigurationError, InputError
from .glucose_model import (DIABETIC, HEALTHY, OSCILLATING, PARAM_NAMES, ModelConstants,
                            PatientParams, glucose_at_times)

_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


class ParamSampler(Protocol):
    def sample(self, rng: np.random.Generator) -> PatientParams: ...


@dataclass(frozen=True)
class InferencePrior:
    """Vague product prior used to fit any patient.

    ``log_density`` keeps the normalising constants of the untruncated gamma
    and normal factors and drops the (constant) truncation masses.
    """

    theta0_shape: float = 2.0
    theta0_scale: float = 1.0
    theta1_shape: float = 2.0
    theta1_scale: float = 1.0
    theta2_shape: float = 10.0
    theta2_scale: float = 1 / 20
    theta2_lower: float = 0.16
    g0_mean: float = 80.0
    g0_sd: float = 10.0
    g0_lower: float = 30.0
    g0_upper: float = 400.0

    def as_array(self) -> np.ndarray:
        return np.array([self.theta0_shape, self.theta0_scale, self.theta1_shape,
                         self.theta1_scale, self.theta2_shape, self.theta2_scale,
                         self.theta2_lower, self.g0_mean, self.g0_sd, self.g0_lower,
                         self.g0_upper])

    def to_dict(self) -> dict:
        return dict(zip(self.__dataclass_fields__, self.as_array().tolist()))

    def sample(self, rng: np.random.Generator) -> PatientParams:
        th0 = rng.gamma(self.theta0_shape, self.theta0_scale)
        th1 = rng.gamma(self.theta1_shape, self.theta1_scale)
        while True:
            th2 = rng.gamma(self.theta2_shape, self.theta2_scale)
            if th2 > self.theta2_lower:
                break
        while True:
            g0 = rng.normal(self.g0_mean, self.g0_sd)
            if self.g0_lower <= g0 <= self.g0_upper:
                break
        return PatientParams(th0, th1, th2, g0)

    def sample_many(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """``n`` draws as an ``(n, 4)`` array (vectorised rejection)."""
        out = np.empty((n, 4))
        out[:, 0] = rng.gamma(self.theta0_shape, self.theta0_scale, n)
        out[:, 1] = rng.gamma(self.theta1_shape, self.theta1_scale, n)
        out[:, 2] = _reject(lambda m: rng.gamma(self.theta2_shape, self.theta2_scale, m),
                            lambda x: x > self.theta2_lower, n)
        out[:, 3] = _reject(lambda m: rng.normal(self.g0_mean, self.g0_sd, m),
                            lambda x: (x >= self.g0_lower) & (x <= self.g0_upper), n)
        return out

    def log_density(self, params: PatientParams) -> float:
        return float(log_prior(params.as_array(), self.as_array(), np.ones(4, dtype=np.bool_)))

    def mean(self) -> PatientParams:
        """Exact prior means (truncations included)."""
        from scipy import special, stats

        k, s, lo = self.theta2_shape, self.theta2_scale, self.theta2_lower
        # E[X | X > lo] for Gamma(k, s) = k s Q(k+1, lo/s) / Q(k, lo/s)
        th2 = k * s * special.gammaincc(k + 1, lo / s) / special.gammaincc(k, lo / s)
        a = (self.g0_lower - self.g0_mean) / self.g0_sd
        b = (self.g0_upper - self.g0_mean) / self.g0_sd
        g0 = stats.truncnorm.mean(a, b, loc=self.g0_mean, scale=self.g0_sd)
        return PatientParams(self.theta0_shape * self.theta0_scale,
                             self.theta1_shape * self.theta1_scale, float(th2), float(g0))


def _reject(draw, accept, n):
    out = np.empty(0)
    while out.size < n:
        x = draw(2 * (n - out.size) + 8)
        out = np.concatenate((out, x[accept(x)]))
    return out[:n]


@njit(cache=True)
def _gamma_logpdf(x, shape, scale):
    if x <= 0.0:
        return -np.inf
    return (shape - 1.0) * math.log(x) - x / scale - math.lgamma(shape) - shape * math.log(scale)


@njit(cache=True)
def log_prior(x, hyper, free):
    """Log prior of a full parameter vector; only ``free`` coordinates count."""
    lp = 0.0
    if free[0]:
        lp += _gamma_logpdf(x[0], hyper[0], hyper[1])
    if free[1]:
        lp += _gamma_logpdf(x[1], hyper[2], hyper[3])
    if free[2]:
        if x[2] <= hyper[6]:
            return -np.inf
        lp += _gamma_logpdf(x[2], hyper[4], hyper[5])
    if free[3]:
        if x[3] < hyper[9] or x[3] > hyper[10]:
            return -np.inf
        z = (x[3] - hyper[7]) / hyper[8]
        lp += -0.5 * z * z - math.log(hyper[8]) - _LOG_SQRT_2PI
    return lp


@dataclass(frozen=True)
class DesignPrior:
    """Equal-weight point masses on typical patients."""

    atoms: tuple[PatientParams, ...] = (HEALTHY, DIABETIC, OSCILLATING)

    def __post_init__(self):
        if len(self.atoms) == 0:
            raise ConfigurationError("design prior needs at least one atom")
        object.__setattr__(self, "atoms", tuple(self.atoms))
        for a in self.atoms:
            if not a.in_support():
                raise ConfigurationError(f"design-prior atom outside support: {a}")

    @property
    def weights(self) -> np.ndarray:
        return np.full(len(self.atoms), 1.0 / len(self.atoms))

    def sample(self, rng: np.random.Generator) -> PatientParams:
        return self.atoms[int(rng.integers(len(self.atoms)))]

    def to_json(self) -> list[dict]:
        return [a.to_dict() for a in self.atoms]

    @classmethod
    def from_json(cls, data: Sequence[dict]) -> "DesignPrior":
        try:
            atoms = tuple(PatientParams(**{k: float(d[k]) for k in PARAM_NAMES}) for d in data)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"bad design-prior atom list: {exc}") from exc
        return cls(atoms)

    @classmethod
    def load(cls, path) -> "DesignPrior":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


@dataclass(frozen=True)
class PinnedPrior:
    """Draw the ``free`` coordinates from ``prior`` and hold the rest at ``base``.

    Used to build sub-problems (e.g. only the arrival glucose unknown) where
    the design prior and the inference prior coincide on the free block.
    """

    prior: InferencePrior
    base: PatientParams
    free: tuple[str, ...] = ("g0",)

    def sample(self, rng: np.random.Generator) -> PatientParams:
        x = self.base.as_array()
        draw = self.prior.sample(rng).as_array()
        for name in self.free:
            i = PARAM_NAMES.index(name)
            x[i] = draw[i]
        return PatientParams.from_array(x)


@dataclass(frozen=True)
class NoiseModel:
    """Additive Gaussian measurement error with sd ``sigma`` (mg/dl).

    ``sigma = 0`` is allowed for noiseless simulation; the likelihood rejects it.
    """

    sigma: float = 5.0

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma >= 0):
            raise InputError("sigma must be finite and non-negative")


def sample_inference_prior(rng: np.random.Generator, prior: InferencePrior = InferencePrior()) -> PatientParams:
    return prior.sample(rng)


def log_prior_inference(params: PatientParams, prior: InferencePrior = InferencePrior()) -> float:
    return prior.log_density(params)


def sample_design_prior(rng: np.random.Generator, prior: DesignPrior | None = None) -> PatientParams:
    return (DesignPrior() if prior is None else prior).sample(rng)


def simulate_data(params: PatientParams, times, noise: NoiseModel, consts: ModelConstants,
                  rng: np.random.Generator) -> np.ndarray:
    """Noisy glucose measurements at ``times`` (hours, or a :class:`Design`)."""
    g = glucose_at_times(params, consts, getattr(times, "times", times))
    return g + noise.sigma * rng.standard_normal(g.shape[0])
