import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ogtt_design.design import Design
from ogtt_design.design_compare import (A_BETTER, B_BETTER, CONVENTIONAL, EARLY_ONLY, FULL,
                                        INCONCLUSIVE, PROPOSED, compare, compare_with_growth,
                                        growth_schedule, z_test)
from ogtt_design.distributions import DesignPrior
from ogtt_design.errors import InputError
from ogtt_design.glucose_model import HEALTHY
from ogtt_design.seeding import RngStream
from ogtt_design.utility import (DesignUtilityEstimate, UtilitySample, estimate_U,
                                 flat_g0_problem)

SETUP, FLAT_PRIOR = flat_g0_problem()


def injected(values, design=PROPOSED):
    return DesignUtilityEstimate(design, [UtilitySample(float(v), HEALTHY, 0, i)
                                          for i, v in enumerate(values)], 100)


def test_design_validation():
    assert PROPOSED.minutes == (0, 45, 75, 105, 120)
    assert CONVENTIONAL.times.tolist() == [0.0, 1.0, 2.0]
    assert FULL.size == 9 and EARLY_ONLY.label() == "0:00 0:15 0:30"
    assert Design.parse("0, 45,75") == Design((0, 45, 75))
    for bad in [(15, 30), (0, 30, 30), (0, 40), (0, 135), (0, 60, 30), ()]:
        with pytest.raises(InputError):
            Design(bad)
    with pytest.raises(InputError):
        Design.parse("0,a")


def test_identical_estimates_inconclusive():
    est = injected(-10 + np.random.default_rng(0).standard_normal(40))
    r = compare(est, est)
    assert r.z == 0 and r.verdict == INCONCLUSIVE


def test_hand_arithmetic_example():
    z, v = z_test(-10, 1, -13, 1, 0.05)
    assert z == pytest.approx(3 / math.sqrt(2)) and v == A_BETTER
    assert z_test(-13, 1, -10, 1, 0.05)[1] == B_BETTER
    assert z_test(-5, 0, -5, 0, 0.05) == (0.0, INCONCLUSIVE)


def test_minimum_T1_and_alpha():
    small = injected(np.arange(-10, 0))
    with pytest.raises(InputError):
        compare(small, small)
    with pytest.raises(InputError):
        z_test(0, 1, 0, 1, 1.5)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 100), shift=st.floats(-1e3, 0))
def test_antisymmetry_and_scale_invariance(seed, scale, shift):
    rng = np.random.default_rng(seed)
    ua = -np.abs(rng.normal(10, 3, 40))
    ub = -np.abs(rng.normal(11, 3, 35))
    ab, ba = compare(injected(ua), injected(ub)), compare(injected(ub), injected(ua))
    assert ab.z == pytest.approx(-ba.z)
    mirror = {A_BETTER: B_BETTER, B_BETTER: A_BETTER, INCONCLUSIVE: INCONCLUSIVE}
    assert ba.verdict == mirror[ab.verdict]
    scaled = compare(injected(scale * ua + shift), injected(scale * ub + shift))
    assert scaled.z == pytest.approx(ab.z, rel=1e-9, abs=1e-12) and scaled.verdict == ab.verdict


def test_growth_schedule():
    assert growth_schedule(150, 600) == [150, 300, 600]
    assert growth_schedule(100, 250, 2) == [100, 200, 250]
    assert growth_schedule(50, 50) == [50]
    with pytest.raises(InputError):
        growth_schedule(600, 150)


def test_growth_identical_designs_reach_max_and_reuse():
    r = compare_with_growth(PROPOSED, PROPOSED, FLAT_PRIOR, 0.05, 40, 160, 2.0, 100,
                            RngStream(1, "cmp"), SETUP)
    assert r.verdict == INCONCLUSIVE and r.looks == 3 and r.planned_looks == 3
    assert r.T1_used == (160, 160) and r.alpha_per_look == pytest.approx(0.05 / 3)
    direct = estimate_U(PROPOSED, FLAT_PRIOR, 160, 100, RngStream(1, "cmp"), SETUP)
    assert r.estimate_a.samples == direct.samples
    assert r.estimate_b.samples != direct.samples  # the second copy uses its own stream


def test_inconclusive_rate_falls_with_T1():
    # 5 against 4 flat measurements: true gap 6 * (v4 - v5), about 6.7
    rates = []
    for T1 in (30, 90, 270):
        inc = 0
        for r in range(20):
            a = estimate_U(PROPOSED, FLAT_PRIOR, T1, 100, RngStream(r, "a"), SETUP)
            b = estimate_U(Design((0, 15, 30, 45)), FLAT_PRIOR, T1, 100, RngStream(r, "b"), SETUP)
            inc += compare(a, b).verdict == INCONCLUSIVE
        rates.append(inc / 20)
    assert rates[0] >= rates[1] >= rates[2]
    assert rates[0] > rates[2]


@pytest.mark.slow
def test_proposed_beats_early_only_with_growth():
    r = compare_with_growth(PROPOSED, EARLY_ONLY, DesignPrior(), 0.05, 150, 600, 2.0, 100,
                            RngStream(2, "cmp"))
    assert r.verdict == A_BETTER
