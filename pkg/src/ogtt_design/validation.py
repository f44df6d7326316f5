"""Checks of a chosen design away from the design prior.

* random designs: paired utility differences against random designs of
  several sizes, each pair evaluated on one patient drawn from the vague
  inference prior
* surrogate utility: on densely measured patients the unknown truth is
  replaced by the posterior given all 9 measurements
* robustness: inference for an extreme patient far outside the design prior
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .design import EARLY_ONLY, FULL, PROPOSED, CONVENTIONAL, Design
from .design_search import DEFAULT_GRID, enumerate_designs
from .distributions import simulate_data
from .errors import EstimationError, InputError, IntegrationError, SamplerError
from .glucose_model import PatientParams
from .inference import PosteriorSample, fit_data, run_mcmc, start_at_truth
from .seeding import RngStream
from .utility import (DEFAULT_T2, UtilitySetup, curve_matrix, pairwise_ise, posterior_ise,
                      quadrature_grid)

log = logging.getLogger(__name__)

EXTREME_PATIENT = PatientParams(80.0, 1.0, 1.5, 80.0)


# ---------------------------------------------------------------------------
# random designs

@dataclass(frozen=True)
class RandomDesignConfig:
    sizes: tuple[int, ...] = (4, 5, 6)
    designs_per_size: int = 100
    T2: int = DEFAULT_T2
    proposed: Design = PROPOSED
    grid: tuple[int, ...] = DEFAULT_GRID
    seed: int = 0
    bins: int = 20
    replicates: int = 2  # data sets per arm; their spread gives the per-trial standard error

    def __post_init__(self):
        if self.replicates < 2:
            raise InputError("need at least 2 replicates per arm to estimate a standard error")

    def to_dict(self) -> dict:
        return {"sizes": list(self.sizes), "designs_per_size": self.designs_per_size,
                "T2": self.T2, "replicates": self.replicates, "proposed": list(self.proposed.minutes), "grid": list(self.grid),
                "seed": self.seed, "bins": self.bins}


@dataclass(frozen=True)
class Trial:
    size: int
    index: int
    random_design: Design
    params: PatientParams
    u_proposed: float  # mean over the arm's replicate data sets
    u_random: float
    se_proposed: float  # spread of the replicates / sqrt(replicates)
    se_random: float
    mc_se: float = 0.0  # posterior-draw part of the difference's error alone

    @property
    def difference(self) -> float:
        return self.u_proposed - self.u_random

    @property
    def difference_se(self) -> float:
        return math.hypot(self.se_proposed, self.se_random)


def _arm_utility(theta, design, setup, T2, stream, parts):
    """One simulated data set at ``design`` and its utility; retried once on failure."""
    for attempt in (0, 1):
        rng = stream.generator(*parts, attempt)
        try:
            y = simulate_data(theta, design.times, setup.noise, setup.consts, rng)
            post = run_mcmc(setup.problem(design.times, y), start_at_truth(theta),
                            setup.burn_in + T2 * setup.thinning_stride, setup.thinning_stride, rng,
                            burn_in=setup.burn_in)
            ise = posterior_ise(theta, post.draws, setup.consts, setup.horizon)
            return -float(ise.mean()), float(ise.var(ddof=1) / len(ise))
        except (IntegrationError, SamplerError) as exc:
            log.warning("arm %s failed (attempt %d): %s", parts, attempt, exc)
    raise EstimationError(f"arm {parts} failed twice")


def random_design_trial(size: int, index: int, config: RandomDesignConfig,
                        setup: UtilitySetup = UtilitySetup()) -> Trial:
    stream = RngStream(config.seed, "validate-random")
    rng = stream.generator("trial", size, index)
    pool = enumerate_designs(size, config.grid)
    rand = pool[int(rng.integers(len(pool)))]
    theta = setup.prior.sample(rng)
    arms = {}
    for arm, design in (("proposed", config.proposed), ("random", rand)):
        res = np.array([_arm_utility(theta, design, setup, config.T2, stream, ("arm", size, index, arm, r))
                        for r in range(config.replicates)])
        u, mc_var = res[:, 0], res[:, 1]
        arms[arm] = (u.mean(), u.std(ddof=1) / math.sqrt(u.size), mc_var.mean() / u.size)
    (u_p, se_p, v_p), (u_r, se_r, v_r) = arms["proposed"], arms["random"]
    return Trial(size, index, rand, theta, float(u_p), float(u_r), float(se_p), float(se_r),
                 math.sqrt(v_p + v_r))


@dataclass
class RandomDesignReport:
    config: RandomDesignConfig
    trials: list[Trial]

    def differences(self, size: int) -> np.ndarray:
        return np.array([t.difference for t in self.trials if t.size == size])

    def pooled_se(self, size: int) -> float:
        """Root mean square of the per-trial standard errors of the difference.

        Each trial's error comes from its replicate data sets, so it covers
        both the measurement noise and the posterior-draw noise.
        """
        se = np.array([t.difference_se for t in self.trials if t.size == size])
        return float(np.sqrt(np.mean(se ** 2)))

    def histogram(self, size: int):
        counts, edges = np.histogram(self.differences(size), bins=self.config.bins)
        return counts, edges

    def size_summary(self, size: int) -> dict:
        d = self.differences(size)
        return {"size": size, "n": int(d.size), "mean": float(d.mean()),
                "p05": float(np.percentile(d, 5)), "p50": float(np.percentile(d, 50)),
                "p95": float(np.percentile(d, 95)), "pooled_se": self.pooled_se(size),
                "pooled_mc_se": float(np.sqrt(np.mean([t.mc_se ** 2 for t in self.trials if t.size == size]))),
                "n_negative": int((d < 0).sum())}

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(),
                "sizes": [self.size_summary(s) for s in self.config.sizes]}

    def write(self, out_dir, config_hash: str = "") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        p = out / "random_design_trials.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["size", "trial", "random_design", "theta0", "theta1", "theta2", "g0",
                        "u_proposed", "u_random", "difference", "difference_se", "mc_se"])
            for t in self.trials:
                w.writerow([t.size, t.index, t.random_design.key(), *t.params.as_tuple(),
                            t.u_proposed, t.u_random, t.difference, t.difference_se, t.mc_se])
        paths.append(p)
        for s in self.config.sizes:
            counts, edges = self.histogram(s)
            p = out / f"random_design_hist_size{s}.csv"
            with p.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["bin_left", "bin_right", "count"])
                for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                    w.writerow([lo, hi, int(c)])
            paths.append(p)
        p = out / "random_design_report.json"
        p.write_text(json.dumps(dict(self.to_dict(), config_hash=config_hash), indent=2))
        paths.append(p)
        return paths


def random_design_study(config: RandomDesignConfig = RandomDesignConfig(),
                        setup: UtilitySetup = UtilitySetup()) -> RandomDesignReport:
    """Paired (proposed minus random) utility differences for each design size."""
    trials = [random_design_trial(s, i, config, setup)
              for s in config.sizes for i in range(config.designs_per_size)]
    return RandomDesignReport(config, trials)


# ---------------------------------------------------------------------------
# surrogate utility on densely measured patients

@dataclass(frozen=True)
class SurrogatePatient:
    id: str
    full_data: np.ndarray  # glucose at the 9 full-design times
    truth: PatientParams | None = field(default=None, compare=False)

    def __post_init__(self):
        y = np.asarray(self.full_data, dtype=float)
        if y.shape != (FULL.size,):
            raise InputError(f"patient {self.id}: need {FULL.size} measurements at "
                             f"{FULL.key()} minutes, got {y.size}")
        if not np.all(np.isfinite(y)):
            raise InputError(f"patient {self.id}: non-finite glucose value")
        object.__setattr__(self, "full_data", y)

    def restrict(self, design: Design) -> np.ndarray:
        missing = set(design.minutes) - set(FULL.minutes)
        if missing:
            raise InputError(f"design times {sorted(missing)} are not in the full data")
        idx = [FULL.minutes.index(m) for m in design.minutes]
        return self.full_data[idx]


def synthetic_cohort(n: int = 17, setup: UtilitySetup = UtilitySetup(),
                     stream: RngStream = RngStream(0, "cohort")) -> list[SurrogatePatient]:
    """Patients drawn from the inference prior, measured every 15 minutes with noise."""
    out = []
    for i in range(n):
        rng = stream.generator(i)
        theta = setup.prior.sample(rng)
        y = simulate_data(theta, FULL.times, setup.noise, setup.consts, rng)
        out.append(SurrogatePatient(f"synthetic-{i:02d}", y, theta))
    return out


def read_cohort(path) -> list[SurrogatePatient]:
    """Cohort CSV with columns patient_id, time_minutes, glucose_mg_dl."""
    rows: dict[str, dict[int, float]] = {}
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            need = {"patient_id", "time_minutes", "glucose_mg_dl"}
            if reader.fieldnames is None or not need <= set(reader.fieldnames):
                raise InputError(f"{path}: cohort CSV needs columns {sorted(need)}")
            for r in reader:
                m = float(r["time_minutes"])
                if m != int(m):
                    raise InputError(f"{path}: fractional minute {m}")
                pid = r["patient_id"]
                if int(m) in rows.setdefault(pid, {}):
                    raise InputError(f"{path}: duplicate time {int(m)} for patient {pid}")
                rows[pid][int(m)] = float(r["glucose_mg_dl"])
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot read cohort {path}: {exc}") from exc
    if not rows:
        raise InputError(f"{path}: empty cohort")
    out = []
    for pid, d in rows.items():
        if sorted(d) != list(FULL.minutes):
            raise InputError(f"patient {pid}: times {sorted(d)} differ from {list(FULL.minutes)}")
        out.append(SurrogatePatient(pid, np.array([d[m] for m in FULL.minutes])))
    return out


def write_cohort(patients: Sequence[SurrogatePatient], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "time_minutes", "glucose_mg_dl"])
        for p in patients:
            for m, g in zip(FULL.minutes, p.full_data):
                w.writerow([p.id, m, repr(float(g))])


def surrogate_from_draws(outer_draws, inner_draws, setup: UtilitySetup = UtilitySetup()) -> float:
    """Minus the mean ISE over all (outer, inner) pairs of parameter draws."""
    t, w = quadrature_grid(setup.horizon)
    a = curve_matrix(outer_draws, setup.consts, t)
    b = curve_matrix(inner_draws, setup.consts, t)
    return -float(pairwise_ise(a, b, w).mean())


def full_data_posterior(patient: SurrogatePatient, setup: UtilitySetup = UtilitySetup(),
                        stream: RngStream = RngStream(0, "surrogate"), n_draws: int = DEFAULT_T2) -> PosteriorSample:
    rng = stream.generator(patient.id, "full")
    return fit_data(setup.problem(FULL.times, patient.full_data), rng, n_draws, setup.thinning_stride)


def surrogate_utility(patient: SurrogatePatient, design: Design, setup: UtilitySetup = UtilitySetup(),
                      stream: RngStream = RngStream(0, "surrogate"), n_draws: int = DEFAULT_T2,
                      outer: PosteriorSample | None = None) -> float:
    """Utility of ``design`` with the truth replaced by the full-data posterior.

    The inner posterior uses only the measurements at ``design``'s times,
    sampled by an independent chain (also when ``design`` is the full design).
    """
    y = patient.restrict(design)
    if outer is None:
        outer = full_data_posterior(patient, setup, stream, n_draws)
    rng = stream.generator(patient.id, design.key())
    inner = fit_data(setup.problem(design.times, y), rng, n_draws, setup.thinning_stride)
    return surrogate_from_draws(outer.draws, inner.draws, setup)


@dataclass
class SurrogateReport:
    designs: tuple[Design, Design]
    patient_ids: list[str]
    utilities: np.ndarray  # (n_patients, 2)

    @property
    def quotients(self) -> np.ndarray:
        """U(first) / U(second); above 1 means the second design reconstructs better."""
        return self.utilities[:, 0] / self.utilities[:, 1]

    @property
    def fraction_second_better(self) -> float:
        return float(np.mean(self.utilities[:, 1] > self.utilities[:, 0]))

    def to_dict(self) -> dict:
        return {"designs": [list(d.minutes) for d in self.designs],
                "patients": [{"id": pid, "u_first": float(u[0]), "u_second": float(u[1]),
                              "quotient": float(u[0] / u[1])}
                             for pid, u in zip(self.patient_ids, self.utilities)],
                "fraction_second_better": self.fraction_second_better}

    def write(self, out_dir, config_hash: str = "") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        p_csv = out / "surrogate_utilities.csv"
        with p_csv.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["patient_id", f"u_{self.designs[0].key()}", f"u_{self.designs[1].key()}", "quotient"])
            for pid, u in zip(self.patient_ids, self.utilities):
                w.writerow([pid, u[0], u[1], u[0] / u[1]])
        p_json = out / "surrogate_report.json"
        p_json.write_text(json.dumps(dict(self.to_dict(), config_hash=config_hash), indent=2))
        return [p_csv, p_json]


def surrogate_study(cohort: Sequence[SurrogatePatient], first: Design = CONVENTIONAL,
                    second: Design = PROPOSED, setup: UtilitySetup = UtilitySetup(),
                    stream: RngStream = RngStream(0, "surrogate"), n_draws: int = DEFAULT_T2) -> SurrogateReport:
    """Surrogate utilities of two designs for every patient (shared full-data posterior)."""
    util = np.empty((len(cohort), 2))
    for i, p in enumerate(cohort):
        outer = full_data_posterior(p, setup, stream, n_draws)
        for j, d in enumerate((first, second)):
            util[i, j] = surrogate_utility(p, d, setup, stream, n_draws, outer)
    return SurrogateReport((first, second), [p.id for p in cohort], util)


# ---------------------------------------------------------------------------
# robustness on an extreme patient

@dataclass
class RobustnessReport:
    design: Design
    true_params: PatientParams
    data: np.ndarray
    posterior_ise: float  # posterior expectation of the ISE
    mean_curve_ise: float  # ISE of the pointwise posterior-mean curve
    prior_predictive_ise: float  # same expectation under the inference prior (no data)
    coverage: float  # fraction of grid times where the truth is inside the band
    level: float
    grid: np.ndarray = field(repr=False)
    true_curve: np.ndarray = field(repr=False)
    band: np.ndarray = field(repr=False)  # (3, n_grid): lower, median, upper

    def to_dict(self) -> dict:
        return {"design": list(self.design.minutes), "true_params": self.true_params.to_dict(),
                "data": self.data.tolist(), "posterior_ise": self.posterior_ise,
                "mean_curve_ise": self.mean_curve_ise,
                "prior_predictive_ise": self.prior_predictive_ise,
                "coverage": self.coverage, "level": self.level}

    def write(self, out_dir, config_hash: str = "") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tag = self.design.key().replace(",", "-")
        p_csv = out / f"robustness_band_{tag}.csv"
        with p_csv.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_minutes", "true_glucose", "lower", "median", "upper"])
            for i, t in enumerate(self.grid):
                w.writerow([round(t * 60, 6), self.true_curve[i], *self.band[:, i]])
        p_json = out / f"robustness_{tag}.json"
        p_json.write_text(json.dumps(dict(self.to_dict(), config_hash=config_hash), indent=2))
        return [p_csv, p_json]


def robustness_check(stream: RngStream = RngStream(0, "validate-robust"), design: Design = PROPOSED,
                     true_params: PatientParams = EXTREME_PATIENT, setup: UtilitySetup = UtilitySetup(),
                     n_draws: int = DEFAULT_T2, n_prior: int = 2000, level: float = 0.95) -> RobustnessReport:
    """Simulate ``true_params`` at ``design``, fit from the prior mean and score the fit.

    Data and chain seeds do not depend on the design, so two designs are
    compared on paired noise streams.
    """
    rng = stream.generator("data")
    y = simulate_data(true_params, design.times, setup.noise, setup.consts, rng)
    post = fit_data(setup.problem(design.times, y), stream.generator("chain"), n_draws,
                    setup.thinning_stride)
    t, w = quadrature_grid(setup.horizon)
    truth = curve_matrix(true_params.as_array(), setup.consts, t)[0]
    curves = curve_matrix(post.draws, setup.consts, t)
    q = (1 - level) / 2
    band = np.quantile(curves, [q, 0.5, 1 - q], axis=0)
    coverage = float(np.mean((truth >= band[0]) & (truth <= band[2])))
    ise = posterior_ise(true_params, post.draws, setup.consts, setup.horizon)
    mean_curve_ise = float(w @ (curves.mean(0) - truth) ** 2)
    prior_draws = setup.prior.sample_many(stream.generator("prior"), n_prior)
    prior_ise = posterior_ise(true_params, prior_draws, setup.consts, setup.horizon)
    return RobustnessReport(design, true_params, y, float(ise.mean()), mean_curve_ise,
                            float(prior_ise.mean()), coverage, level, t, truth, band)


__all__ = ["EXTREME_PATIENT", "EARLY_ONLY", "RandomDesignConfig", "RandomDesignReport", "Trial",
           "random_design_study", "random_design_trial", "SurrogatePatient", "synthetic_cohort",
           "read_cohort", "write_cohort", "surrogate_utility", "surrogate_from_draws",
           "full_data_posterior", "SurrogateReport", "surrogate_study", "RobustnessReport",
           "robustness_check"]
