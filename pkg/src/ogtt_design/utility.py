"""Curve-reconstruction utility of a design and its nested Monte Carlo estimate.

The utility of data ``y`` for a patient ``theta`` is minus the posterior
expected integrated squared error between the true glucose curve and the
curve of a posterior draw over the first three hours.  The expected utility
of a design averages this over simulated patients::

    for i in 1..T1:
        theta_i ~ design prior
        y_i     ~ model(theta_i) at the design times, plus noise
        draws   ~ posterior(. | y_i)   (t-walk started at theta_i, thinned)
        u_i     = -mean_j ISE(theta_i, draw_j)
    U_hat = mean(u_i),  var(U_hat) = var(u) / T1

Replicates are independent, each seeded from ``(stream, design, index,
attempt)``, so an estimate can later be extended with more replicates and
the result equals a single longer run.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
import multiprocessing as mp

import numpy as np
from numba import njit

from .design import Design
from .distributions import DesignPrior, InferencePrior, NoiseModel, ParamSampler, PinnedPrior, simulate_data
from .errors import ContractViolation, EstimationError, InputError, IntegrationError, SamplerError
from .glucose_model import (ATOL, PARAM_NAMES, RTOL, ModelConstants, PatientParams, glucose_curve)
from .inference import FIT_BURN_IN, THINNING_STRIDE, PosteriorProblem, run_mcmc, start_at_truth
from .seeding import RngStream, generator

log = logging.getLogger(__name__)

HORIZON = 3.0
QUAD_STEP = 1 / 60  # hours
DEFAULT_T2 = 100
MAX_EXCLUDED_FRACTION = 0.01


def quadrature_grid(horizon: float = HORIZON, step: float = QUAD_STEP):
    """Nodes and composite Simpson weights on a uniform grid over ``[0, horizon]``."""
    n = int(round(horizon / step))
    if n < 2 or abs(n * step - horizon) > 1e-9:
        raise InputError("horizon must be a multiple of the quadrature step")
    if n % 2:
        raise InputError("Simpson's rule needs an even number of intervals")
    t = np.linspace(0.0, horizon, n + 1)
    h = horizon / n
    w = np.full(n + 1, 2.0)
    w[1::2] = 4.0
    w[0] = w[-1] = 1.0
    return t, w * h / 3.0


@njit(cache=True)
def _ise_batch(x_true, draws, k, t, w, rtol, atol):
    """ISE of each row of ``draws`` against ``x_true``; returns ``(status, t_fail, ise)``."""
    out = np.empty(draws.shape[0])
    status, t_fail, g_true = glucose_curve(x_true, k, t, rtol, atol)
    if status != 0:
        return status, t_fail, out
    for j in range(draws.shape[0]):
        # thinned MCMC output can repeat a state; reuse the previous curve then
        if j > 0 and np.all(draws[j] == draws[j - 1]):
            out[j] = out[j - 1]
            continue
        status, t_fail, g = glucose_curve(draws[j], k, t, rtol, atol)
        if status != 0:
            return status, t_fail, out
        s = 0.0
        for i in range(t.shape[0]):
            s += w[i] * (g[i] - g_true[i]) ** 2
        out[j] = s
    return 0, 0.0, out


def posterior_ise(true_params: PatientParams, draws, consts: ModelConstants = ModelConstants(),
                  horizon: float = HORIZON, step: float = QUAD_STEP) -> np.ndarray:
    """Integrated squared error of every draw (``(n, 4)`` array) against the truth."""
    t, w = quadrature_grid(horizon, step)
    draws = np.ascontiguousarray(np.atleast_2d(np.asarray(draws, dtype=float)))
    status, t_fail, ise = _ise_batch(true_params.as_array(), draws, consts.as_array(), t, w, RTOL, ATOL)
    if status != 0:
        raise IntegrationError(f"curve integration failed at t={t_fail:.6g} h", t_fail)
    return ise


@njit(cache=True)
def _curves(draws, k, t, rtol, atol):
    out = np.empty((draws.shape[0], t.shape[0]))
    for j in range(draws.shape[0]):
        status, t_fail, g = glucose_curve(draws[j], k, t, rtol, atol)
        if status != 0:
            return status, t_fail, out
        out[j] = g
    return 0, 0.0, out


def curve_matrix(draws, consts: ModelConstants = ModelConstants(), times=None) -> np.ndarray:
    """Glucose curves of each parameter row on sorted ``times`` (default: the quadrature grid)."""
    t = quadrature_grid()[0] if times is None else np.ascontiguousarray(times, dtype=float)
    draws = np.ascontiguousarray(np.atleast_2d(np.asarray(draws, dtype=float)))
    status, t_fail, out = _curves(draws, consts.as_array(), t, RTOL, ATOL)
    if status != 0:
        raise IntegrationError(f"curve integration failed at t={t_fail:.6g} h", t_fail)
    return out


def pairwise_ise(curves_a: np.ndarray, curves_b: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``(n_a, n_b)`` matrix of weighted squared curve distances."""
    wa = curves_a * np.sqrt(weights)
    wb = curves_b * np.sqrt(weights)
    d = (wa * wa).sum(1)[:, None] + (wb * wb).sum(1)[None, :] - 2.0 * wa @ wb.T
    return np.maximum(d, 0.0)


def integrated_squared_error(true_params: PatientParams, fitted_params: PatientParams,
                             consts: ModelConstants = ModelConstants(), horizon: float = HORIZON,
                             step: float = QUAD_STEP) -> float:
    """``int_0^horizon (G_true - G_fitted)^2 dt`` in (mg/dl)^2 h."""
    for p in (true_params, fitted_params):
        if not p.in_support():
            raise InputError(f"parameters outside support: {p}")
    return float(posterior_ise(true_params, fitted_params.as_array(), consts, horizon, step)[0])


def estimate_u(true_params: PatientParams, posterior, consts: ModelConstants = ModelConstants(),
               horizon: float = HORIZON) -> float:
    """Minus the mean ISE over posterior draws (a ``PosteriorSample`` or ``(n, 4)`` array)."""
    draws = getattr(posterior, "draws", posterior)
    if len(draws) == 0:
        raise InputError("empty posterior sample")
    return -float(np.mean(posterior_ise(true_params, draws, consts, horizon)))


@dataclass(frozen=True)
class UtilitySetup:
    """Everything besides the design that a replicate depends on."""

    consts: ModelConstants = ModelConstants()
    noise: NoiseModel = NoiseModel()
    prior: InferencePrior = InferencePrior()
    free: tuple[str, ...] = PARAM_NAMES
    base: PatientParams | None = None
    horizon: float = HORIZON
    thinning_stride: int = THINNING_STRIDE
    # discarded even from a truth start: early thinned draws stay correlated
    # with the generating parameters and would bias the utility upwards
    burn_in: int = FIT_BURN_IN

    def problem(self, times, data) -> PosteriorProblem:
        return PosteriorProblem(times, data, noise=self.noise, prior=self.prior, consts=self.consts,
                                free=self.free, base=self.base, horizon=self.horizon)

    def to_dict(self) -> dict:
        return {"consts": self.consts.to_dict(), "sigma": self.noise.sigma,
                "prior": self.prior.to_dict(), "free": list(self.free),
                "base": None if self.base is None else self.base.to_dict(),
                "horizon": self.horizon, "thinning_stride": self.thinning_stride,
                "burn_in": self.burn_in}

    @classmethod
    def from_dict(cls, d: dict) -> "UtilitySetup":
        return cls(consts=ModelConstants(**d["consts"]), noise=NoiseModel(d["sigma"]),
                   prior=InferencePrior(**d["prior"]), free=tuple(d["free"]),
                   base=None if d["base"] is None else PatientParams(**d["base"]),
                   horizon=d["horizon"], thinning_stride=d["thinning_stride"],
                   burn_in=d.get("burn_in", 0))


@dataclass(frozen=True)
class UtilitySample:
    """One outer replicate: the simulated patient and its utility estimate."""

    u_hat: float
    generating_params: PatientParams
    seed: int
    index: int
    attempt: int = 0
    inner_se: float = float("nan")  # naive sd(ISE)/sqrt(T2) of the inner average
    acceptance_rate: float = float("nan")

    def __post_init__(self):
        if not self.u_hat <= 0:
            raise ContractViolation(f"utility sample must be <= 0, got {self.u_hat}")

    def to_json(self) -> str:
        return json.dumps({"index": self.index, "attempt": self.attempt, "seed": str(self.seed),
                           "u_hat": self.u_hat, "params": self.generating_params.to_dict(),
                           "inner_se": self.inner_se, "acceptance_rate": self.acceptance_rate})

    @classmethod
    def from_json(cls, line: str) -> "UtilitySample":
        d = json.loads(line)
        return cls(d["u_hat"], PatientParams(**d["params"]), int(d["seed"]), d["index"],
                   d["attempt"], d["inner_se"], d["acceptance_rate"])


def simulate_replicate(design: Design, design_prior: ParamSampler, T2: int, setup: UtilitySetup,
                       seed: int, index: int = 0, attempt: int = 0) -> UtilitySample:
    """Draw a patient, simulate data at ``design``, fit it and score the fit."""
    rng = generator(seed)
    theta = design_prior.sample(rng)
    y = simulate_data(theta, design.times, setup.noise, setup.consts, rng)
    problem = setup.problem(design.times, y)
    stride = setup.thinning_stride
    post = run_mcmc(problem, start_at_truth(theta), raw_iterations=setup.burn_in + T2 * stride,
                    thinning_stride=stride, rng=rng, burn_in=setup.burn_in)
    ise = posterior_ise(theta, post.draws, setup.consts, setup.horizon)
    return UtilitySample(u_hat=-float(ise.mean()), generating_params=theta, seed=seed, index=index,
                         attempt=attempt, inner_se=float(ise.std(ddof=1) / math.sqrt(len(ise))),
                         acceptance_rate=post.acceptance_rate)


def _replicate_with_retry(args):
    design, design_prior, T2, setup, stream, index = args
    errors = []
    for attempt in (0, 1):
        seed = stream.seed(design.key(), index, attempt)
        try:
            return index, simulate_replicate(design, design_prior, T2, setup, seed, index, attempt), errors
        except (IntegrationError, SamplerError) as exc:
            errors.append(f"attempt {attempt}: {exc}")
            log.warning("replicate %d of %s failed (attempt %d): %s", index, design, attempt, exc)
    return index, None, errors


def _run_indices(design, design_prior, T2, setup, stream, indices, workers: int = 1):
    jobs = [(design, design_prior, T2, setup, stream, i) for i in indices]
    if workers <= 1 or len(jobs) < 2:
        results = [_replicate_with_retry(j) for j in jobs]
    else:
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(workers, mp_context=ctx) as pool:
            results = list(pool.map(_replicate_with_retry, jobs,
                                    chunksize=max(1, len(jobs) // (4 * workers))))
    results.sort(key=lambda r: r[0])
    samples = [s for _, s, _ in results if s is not None]
    excluded = [i for i, s, _ in results if s is None]
    return samples, excluded


@dataclass(frozen=True)
class DesignUtilityEstimate:
    """Outer-loop sample for one design with its mean and Monte Carlo variance."""

    design: Design
    samples: tuple[UtilitySample, ...]
    T2: int
    setup: UtilitySetup = UtilitySetup()
    stream: RngStream | None = None
    n_attempted: int = -1
    excluded: tuple[int, ...] = ()
    _u: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "excluded", tuple(self.excluded))
        if self.n_attempted < 0:
            object.__setattr__(self, "n_attempted", len(self.samples) + len(self.excluded))
        object.__setattr__(self, "_u", np.array([s.u_hat for s in self.samples], dtype=float))

    @property
    def T1(self) -> int:
        return len(self.samples)

    @property
    def values(self) -> np.ndarray:
        return self._u.copy()

    @property
    def mean(self) -> float:
        return float(self._u.mean()) if self.T1 else float("nan")

    @property
    def variance_of_mean(self) -> float:
        if self.T1 < 2:
            return float("nan")
        return float(self._u.var(ddof=1) / self.T1)

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance_of_mean)

    def summary(self) -> dict:
        return {"design": list(self.design.minutes), "T1": self.T1, "T2": self.T2,
                "mean": self.mean, "variance_of_mean": self.variance_of_mean,
                "std_error": self.std_error, "n_attempted": self.n_attempted,
                "excluded": list(self.excluded)}


def _check_exclusions(n_attempted, excluded, design):
    if len(excluded) > MAX_EXCLUDED_FRACTION * n_attempted:
        raise EstimationError(f"{len(excluded)} of {n_attempted} replicates failed twice for "
                              f"{design} (cap {MAX_EXCLUDED_FRACTION:.0%})")
    if excluded:
        log.warning("%d replicate(s) excluded for %s", len(excluded), design)


def estimate_U(design: Design, design_prior: ParamSampler, T1: int, T2: int = DEFAULT_T2,
               stream: RngStream = RngStream(0), setup: UtilitySetup = UtilitySetup(),
               workers: int = 1) -> DesignUtilityEstimate:
    """Nested Monte Carlo estimate of the expected utility of ``design``."""
    if T1 < 2:
        raise InputError("T1 must be at least 2")
    if T2 < 1:
        raise InputError("T2 must be positive")
    if design.times[-1] > setup.horizon:
        raise InputError("design extends past the utility horizon")
    samples, excluded = _run_indices(design, design_prior, T2, setup, stream, range(T1), workers)
    _check_exclusions(T1, excluded, design)
    return DesignUtilityEstimate(design, tuple(samples), T2, setup, stream, T1, tuple(excluded))


def extend_estimate(existing: DesignUtilityEstimate, additional_T1: int, stream: RngStream | None = None,
                    design_prior: ParamSampler | None = None, T2: int | None = None,
                    workers: int = 1) -> DesignUtilityEstimate:
    """Append ``additional_T1`` fresh replicates, continuing the replicate index.

    The inner sample size is frozen: passing a different ``T2`` raises
    :class:`ContractViolation`, since it would change the distribution of the
    replicates being pooled.
    """
    if T2 is not None and T2 != existing.T2:
        raise ContractViolation(f"T2 changed from {existing.T2} to {T2}; start a new estimate")
    if additional_T1 < 0:
        raise InputError("additional_T1 must be non-negative")
    if additional_T1 == 0:
        return existing
    if design_prior is None:
        raise InputError("extending needs the design prior that generated the estimate")
    stream = existing.stream if stream is None else stream
    if stream is None:
        raise InputError("no random stream to continue from")
    start = existing.n_attempted
    samples, excluded = _run_indices(existing.design, design_prior, existing.T2, existing.setup,
                                     stream, range(start, start + additional_T1), workers)
    n_attempted = start + additional_T1
    excluded = existing.excluded + tuple(excluded)
    _check_exclusions(n_attempted, excluded, existing.design)
    return DesignUtilityEstimate(existing.design, existing.samples + tuple(samples), existing.T2,
                                 existing.setup, existing.stream, n_attempted, excluded)


# ---------------------------------------------------------------------------
# sample stores: JSON lines, one replicate per line, plus a metadata sidecar

def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def save_samples(estimate: DesignUtilityEstimate, path, extra_meta: dict | None = None) -> Path:
    """Write or append to a sample store; existing lines must be a prefix of ``estimate``."""
    path = Path(path)
    lines = [s.to_json() for s in estimate.samples]
    existing: list[str] = []
    if path.exists():
        existing = path.read_text().splitlines()
        if existing != lines[: len(existing)]:
            raise ContractViolation(f"{path} holds replicates that are not a prefix of this estimate")
    meta = {"design": list(estimate.design.minutes), "T2": estimate.T2,
            "setup": estimate.setup.to_dict(),
            "stream": None if estimate.stream is None else estimate.stream.to_dict(),
            "n_attempted": estimate.n_attempted, "excluded": list(estimate.excluded)}
    meta_file = _meta_path(path)
    if meta_file.exists():
        old = json.loads(meta_file.read_text())
        if old["T2"] != meta["T2"] or old["setup"] != meta["setup"]:
            raise ContractViolation(f"{path} was written with a different T2 or setup")
    if extra_meta:
        meta.update(extra_meta)
    with path.open("a") as fh:
        for line in lines[len(existing):]:
            fh.write(line + "\n")
    meta_file.write_text(json.dumps(meta, indent=2))
    return path


def load_samples(path) -> DesignUtilityEstimate:
    path = Path(path)
    meta_file = _meta_path(path)
    if not path.exists() or not meta_file.exists():
        raise InputError(f"sample store {path} (or its .meta.json) not found")
    meta = json.loads(meta_file.read_text())
    samples = tuple(UtilitySample.from_json(l) for l in path.read_text().splitlines() if l.strip())
    stream = None if meta["stream"] is None else RngStream(**meta["stream"])
    return DesignUtilityEstimate(Design(tuple(meta["design"])), samples, meta["T2"],
                                 UtilitySetup.from_dict(meta["setup"]), stream,
                                 meta["n_attempted"], tuple(meta["excluded"]))


def store_path(directory, design: Design, label: str = "estimate") -> Path:
    return Path(directory) / f"{label}_{design.key().replace(',', '-')}.jsonl"


# ---------------------------------------------------------------------------
# a tractable sub-problem with a closed-form expected utility

FLAT_BASE = PatientParams(0.0, 0.0, 0.5, 80.0)


def flat_g0_problem(prior: InferencePrior = InferencePrior(), sigma: float = 5.0):
    """Setup and design prior for the model with no hormonal response and no drink.

    With ``theta0 = theta1 = 0`` and ``v0 = 0`` the curve is the constant
    ``g0``, the only unknown.  The design prior is the inference prior on
    ``g0``, so the posterior is normal-normal (up to a truncation that sits
    five prior sds away and is ignored by :func:`flat_g0_expected_utility`).
    """
    consts = ModelConstants(v0=0.0)
    setup = UtilitySetup(consts=consts, noise=NoiseModel(sigma), prior=prior, free=("g0",),
                         base=FLAT_BASE)
    return setup, PinnedPrior(prior, FLAT_BASE, ("g0",))


def flat_g0_posterior_variance(n: int, prior: InferencePrior = InferencePrior(), sigma: float = 5.0) -> float:
    return 1.0 / (1.0 / prior.g0_sd ** 2 + n / sigma ** 2)


def flat_g0_expected_utility(n: int, prior: InferencePrior = InferencePrior(), sigma: float = 5.0,
                             horizon: float = HORIZON) -> float:
    """Exact expected utility with ``n`` measurements.

    Truth and draw are independent given the data, both with the posterior
    variance ``v``, so the expected squared gap is ``2 v`` at every time.
    """
    return -2.0 * horizon * flat_g0_posterior_variance(n, prior, sigma)


def default_workers() -> int:
    return os.cpu_count() or 1
