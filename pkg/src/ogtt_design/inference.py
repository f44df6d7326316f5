"""Posterior of the patient parameters given glucose measurements."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .distributions import InferencePrior, NoiseModel, log_prior
from .errors import InputError, SamplerError
from .glucose_model import ATOL, PARAM_NAMES, RTOL, ModelConstants, PatientParams, glucose_curve
from .twalk import TWalkResult, perturbed_partner, run_twalk

log = logging.getLogger(__name__)

RAW_ITERATIONS = 1500
THINNING_STRIDE = 15
FIT_BURN_IN = 300


@dataclass(frozen=True)
class PosteriorProblem:
    """Data, noise, prior and model constants defining one posterior.

    ``free`` names the inferred coordinates; the others are held at ``base``.
    The full problem infers all four.
    """

    times: np.ndarray  # hours
    data: np.ndarray  # mg/dl
    noise: NoiseModel = NoiseModel()
    prior: InferencePrior = InferencePrior()
    consts: ModelConstants = ModelConstants()
    free: tuple[str, ...] = PARAM_NAMES
    base: PatientParams | None = None
    horizon: float = 3.0
    rtol: float = RTOL
    atol: float = ATOL
    _args: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(getattr(self.times, "times", self.times), dtype=float))
        y = np.atleast_1d(np.asarray(self.data, dtype=float))
        if t.shape != y.shape:
            raise InputError(f"{t.size} times but {y.size} measurements")
        if np.any(t < 0) or np.any(t > self.horizon):
            raise InputError(f"measurement times must lie in [0, {self.horizon}] h")
        if not np.all(np.isfinite(y)):
            raise InputError("non-finite measurement")
        if not self.noise.sigma > 0:
            raise InputError("likelihood needs sigma > 0")
        bad = set(self.free) - set(PARAM_NAMES)
        if bad or not self.free:
            raise InputError(f"bad free-parameter list {self.free}")
        if self.base is None and set(self.free) != set(PARAM_NAMES):
            raise InputError("fixed coordinates need a base parameter set")
        order = np.argsort(t, kind="stable")
        object.__setattr__(self, "times", t[order])
        object.__setattr__(self, "data", y[order])
        free_idx = np.array(sorted(PARAM_NAMES.index(n) for n in self.free), dtype=np.int64)
        free_mask = np.zeros(4, dtype=np.bool_)
        free_mask[free_idx] = True
        base = self.base.as_array() if self.base is not None else np.zeros(4)
        object.__setattr__(self, "_args", (
            base, free_idx, free_mask, self.consts.as_array(),
            np.ascontiguousarray(self.times), np.ascontiguousarray(self.data),
            float(self.noise.sigma), self.prior.as_array(), float(self.rtol), float(self.atol)))

    @property
    def free_index(self) -> np.ndarray:
        return self._args[1]

    def pack(self, params: PatientParams) -> np.ndarray:
        """Free coordinates of ``params``."""
        return params.as_array()[self.free_index]

    def unpack(self, z) -> np.ndarray:
        """Full ``(..., 4)`` parameter array from free coordinates."""
        z = np.asarray(z, dtype=float)
        base = self._args[0]
        out = np.broadcast_to(base, z.shape[:-1] + (4,)).copy()
        out[..., self.free_index] = z
        return out


@njit(cache=True)
def _log_likelihood(x, k, t, y, sigma, rtol, atol):
    status, _, g = glucose_curve(x, k, t, rtol, atol)
    if status != 0:
        return np.nan
    ss = 0.0
    for i in range(y.shape[0]):
        ss += (y[i] - g[i]) ** 2
    return -ss / (2.0 * sigma * sigma)


@njit(cache=True)
def log_posterior_free(z, args):
    """Compiled target over the free coordinates ``z`` (NaN: integration failed)."""
    base, free_idx, free_mask, k, t, y, sigma, hyper, rtol, atol = args
    x = base.copy()
    for j in range(free_idx.shape[0]):
        x[free_idx[j]] = z[j]
    lp = log_prior(x, hyper, free_mask)
    if lp == -np.inf:
        return lp
    return lp + _log_likelihood(x, k, t, y, sigma, rtol, atol)


def log_likelihood(params: PatientParams, problem: PosteriorProblem) -> float:
    """Gaussian log-likelihood with additive constants dropped."""
    base, _, _, k, t, y, sigma, _, rtol, atol = problem._args
    ll = _log_likelihood(params.as_array(), k, t, y, sigma, rtol, atol)
    if math.isnan(ll):
        log.warning("integration failed for %s; log-likelihood set to -inf", params)
        return -math.inf
    return float(ll)


def log_posterior(params: PatientParams, problem: PosteriorProblem) -> float:
    """Unnormalised log posterior; fixed coordinates are overridden by ``problem.base``."""
    val = log_posterior_free(problem.pack(params), problem._args)
    if math.isnan(val):
        log.warning("integration failed for %s; log-posterior set to -inf", params)
        return -math.inf
    return float(val)


@dataclass(frozen=True)
class PosteriorSample:
    draws: np.ndarray  # (T2, 4) full parameter vectors
    raw_chain_length: int
    thinning_stride: int
    burn_in: int
    start_point: PatientParams
    acceptance_rate: float
    n_failed: int = 0
    log_post: np.ndarray | None = None

    def __len__(self):
        return self.draws.shape[0]

    def params(self) -> list[PatientParams]:
        return [PatientParams.from_array(d) for d in self.draws]

    def mean(self) -> PatientParams:
        return PatientParams.from_array(self.draws.mean(axis=0))


def start_at_truth(true_params: PatientParams) -> PatientParams:
    """Design-loop chains start at the parameters that generated the data."""
    return true_params


def run_chain(problem: PosteriorProblem, start: PatientParams, raw_iterations: int,
              rng: np.random.Generator) -> TWalkResult:
    """Raw t-walk chain on the free coordinates of ``problem``."""
    z0 = problem.pack(start)
    l0 = log_posterior_free(z0, problem._args)
    if not l0 > -np.inf:
        raise SamplerError("start point outside the posterior support",
                           {"start": start.to_dict(), "log_posterior": float(l0)})
    for _ in range(100):
        zp = perturbed_partner(z0, rng)
        if log_posterior_free(zp, problem._args) > -np.inf and np.all(zp != z0):
            break
    else:
        raise SamplerError("could not place the second t-walk point inside the support",
                           {"start": start.to_dict()})
    return run_twalk(log_posterior_free, z0, zp, raw_iterations, rng, problem._args)


def run_mcmc(problem: PosteriorProblem, start: PatientParams, raw_iterations: int = RAW_ITERATIONS,
             thinning_stride: int = THINNING_STRIDE, rng: np.random.Generator | None = None,
             burn_in: int = 0, keep_chain: bool = False):
    """Thinned t-walk posterior sample.

    Keeps every ``thinning_stride``-th state after ``burn_in`` iterations, so
    the defaults (1500 raw, stride 15, no burn-in) give 100 draws.
    """
    if thinning_stride < 1 or raw_iterations < thinning_stride:
        raise InputError("need raw_iterations >= thinning_stride >= 1")
    if not 0 <= burn_in < raw_iterations:
        raise InputError("burn_in must be in [0, raw_iterations)")
    rng = np.random.default_rng() if rng is None else rng
    res = run_chain(problem, start, raw_iterations, rng)
    if res.accepted.sum() == 0:
        raise SamplerError("t-walk accepted no proposal", {
            "start": start.to_dict(), "proposed": res.proposed.tolist(),
            "n_failed": res.n_failed})
    if res.n_failed:
        log.info("%d likelihood evaluations failed to integrate (rejected)", res.n_failed)
    idx = np.arange(burn_in + thinning_stride, raw_iterations + 1, thinning_stride)
    sample = PosteriorSample(
        draws=problem.unpack(res.chain[idx]), raw_chain_length=raw_iterations,
        thinning_stride=thinning_stride, burn_in=burn_in, start_point=start,
        acceptance_rate=res.acceptance_rate, n_failed=res.n_failed,
        log_post=res.log_density[idx])
    if keep_chain:
        return sample, res
    return sample


def prior_mean_start(problem: PosteriorProblem) -> PatientParams:
    """Prior mean on the free coordinates, ``problem.base`` elsewhere."""
    z = problem.pack(problem.prior.mean())
    return PatientParams.from_array(problem.unpack(z))


def fit_data(problem: PosteriorProblem, rng: np.random.Generator, n_draws: int = 100,
             thinning_stride: int = THINNING_STRIDE, burn_in: int = FIT_BURN_IN,
             start: PatientParams | None = None, keep_chain: bool = False):
    """Fit observed data: start at the prior mean, discard ``burn_in``, keep ``n_draws``."""
    start = prior_mean_start(problem) if start is None else start
    raw = burn_in + n_draws * thinning_stride
    return run_mcmc(problem, start, raw, thinning_stride, rng, burn_in=burn_in, keep_chain=keep_chain)
