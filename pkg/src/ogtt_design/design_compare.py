"""Two-design z-test on utility estimates, with optional sample-size growth."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from scipy.stats import norm

from .design import CONVENTIONAL, EARLY_ONLY, FULL, PROPOSED, Design
from .distributions import ParamSampler
from .errors import InputError
from .seeding import RngStream
from .utility import DEFAULT_T2, DesignUtilityEstimate, UtilitySetup, estimate_U, extend_estimate

__all__ = ["A_BETTER", "B_BETTER", "INCONCLUSIVE", "ComparisonResult", "compare",
           "compare_with_growth", "growth_schedule", "Design", "CONVENTIONAL", "PROPOSED",
           "FULL", "EARLY_ONLY"]

A_BETTER = "A-better"
B_BETTER = "B-better"
INCONCLUSIVE = "inconclusive"
MIN_T1 = 30  # below this the normal approximation is not trusted


@dataclass(frozen=True)
class ComparisonResult:
    design_a: Design
    design_b: Design
    z: float
    alpha: float
    verdict: str
    T1_used: tuple[int, int]
    mean_a: float = float("nan")
    mean_b: float = float("nan")
    variance_a: float = float("nan")
    variance_b: float = float("nan")
    looks: int = 1
    planned_looks: int = 1
    alpha_per_look: float = float("nan")
    estimate_a: DesignUtilityEstimate | None = field(default=None, repr=False, compare=False)
    estimate_b: DesignUtilityEstimate | None = field(default=None, repr=False, compare=False)

    @property
    def conclusive(self) -> bool:
        return self.verdict != INCONCLUSIVE

    def winner(self) -> Design | None:
        return {A_BETTER: self.design_a, B_BETTER: self.design_b}.get(self.verdict)

    def to_dict(self) -> dict:
        return {"design_a": list(self.design_a.minutes), "design_b": list(self.design_b.minutes),
                "z": self.z, "alpha": self.alpha, "alpha_per_look": self.alpha_per_look,
                "verdict": self.verdict, "T1_used": list(self.T1_used),
                "mean_a": self.mean_a, "mean_b": self.mean_b,
                "variance_a": self.variance_a, "variance_b": self.variance_b,
                "looks": self.looks, "planned_looks": self.planned_looks}


def z_test(mean_a: float, var_a: float, mean_b: float, var_b: float, alpha: float):
    """``(z, verdict)`` for ``H0: U(a) = U(b)`` at two-sided level ``alpha``."""
    if not 0 < alpha < 1:
        raise InputError("alpha must lie in (0, 1)")
    diff = mean_a - mean_b
    s = math.sqrt(var_a + var_b)
    if s == 0:
        z = 0.0 if diff == 0 else math.copysign(math.inf, diff)
    else:
        z = diff / s
    q = norm.ppf(1 - alpha / 2)
    if z > q:
        return z, A_BETTER
    if z < -q:
        return z, B_BETTER
    return z, INCONCLUSIVE


def compare(est_a: DesignUtilityEstimate, est_b: DesignUtilityEstimate, alpha: float = 0.05,
            min_T1: int = MIN_T1) -> ComparisonResult:
    """Decide between two independently estimated designs.

    ``z = (U_a - U_b) / sqrt(var_a + var_b)``; A wins above the upper
    ``alpha/2`` normal quantile, B below the lower one.
    """
    for est in (est_a, est_b):
        if est.T1 < min_T1:
            raise InputError(f"{est.design} has T1={est.T1}; need at least {min_T1}")
    z, verdict = z_test(est_a.mean, est_a.variance_of_mean, est_b.mean, est_b.variance_of_mean, alpha)
    return ComparisonResult(est_a.design, est_b.design, z, alpha, verdict, (est_a.T1, est_b.T1),
                            est_a.mean, est_b.mean, est_a.variance_of_mean, est_b.variance_of_mean,
                            alpha_per_look=alpha, estimate_a=est_a, estimate_b=est_b)


def growth_schedule(T1_initial: int, T1_max: int, growth: float = 2.0) -> list[int]:
    """Sample sizes at which the test is run, e.g. ``150, 300, 600``."""
    if not 2 <= T1_initial <= T1_max:
        raise InputError("need 2 <= T1_initial <= T1_max")
    if growth <= 1 and T1_initial < T1_max:
        raise InputError("growth factor must exceed 1")
    out = [int(T1_initial)]
    while out[-1] < T1_max:
        out.append(min(int(T1_max), max(out[-1] + 1, int(math.ceil(out[-1] * growth)))))
    return out


def _grow(est, target, design, design_prior, T2, stream, setup, workers):
    if est is None:
        return estimate_U(design, design_prior, target, T2, stream, setup, workers)
    if est.T2 != T2:
        return extend_estimate(est, 0, T2=T2)  # raises
    return extend_estimate(est, max(0, target - est.n_attempted), design_prior=design_prior,
                           workers=workers)


def compare_with_growth(design_a: Design, design_b: Design, design_prior: ParamSampler,
                        alpha: float = 0.05, T1_initial: int = 150, T1_max: int = 600,
                        growth: float = 2.0, T2: int = DEFAULT_T2,
                        stream: RngStream = RngStream(0, "compare"),
                        setup: UtilitySetup = UtilitySetup(), workers: int = 1,
                        est_a: DesignUtilityEstimate | None = None,
                        est_b: DesignUtilityEstimate | None = None) -> ComparisonResult:
    """Test, and while inconclusive grow both samples and test again.

    Each of the planned looks is run at ``alpha / planned_looks`` so the
    overall probability of a false conclusive verdict stays below ``alpha``.
    Existing estimates passed as ``est_a``/``est_b`` are extended, not
    recomputed.  Two copies of the same design draw from distinct streams.
    """
    schedule = growth_schedule(T1_initial, T1_max, growth)
    planned = len(schedule)
    a_level = alpha / planned
    stream_b = stream.child("b") if design_b == design_a else stream
    result = None
    for look, target in enumerate(schedule, start=1):
        est_a = _grow(est_a, target, design_a, design_prior, T2, stream, setup, workers)
        est_b = _grow(est_b, target, design_b, design_prior, T2, stream_b, setup, workers)
        r = compare(est_a, est_b, a_level)
        result = ComparisonResult(design_a, design_b, r.z, alpha, r.verdict, r.T1_used,
                                  r.mean_a, r.mean_b, r.variance_a, r.variance_b, look, planned,
                                  a_level, est_a, est_b)
        if result.conclusive:
            break
    return result
