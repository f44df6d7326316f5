import json
import math

import numpy as np
import pytest

from ogtt_design import utility
from ogtt_design.design import EARLY_ONLY, PROPOSED, Design
from ogtt_design.distributions import DesignPrior, NoiseModel, simulate_data
from ogtt_design.errors import ContractViolation, EstimationError, InputError, IntegrationError
from ogtt_design.glucose_model import DIABETIC, HEALTHY, ModelConstants, PatientParams
from ogtt_design.inference import run_mcmc
from ogtt_design.seeding import RngStream
from ogtt_design.utility import (FLAT_BASE, DesignUtilityEstimate, UtilitySample, UtilitySetup,
                                 estimate_U, estimate_u, extend_estimate, flat_g0_expected_utility,
                                 flat_g0_problem, integrated_squared_error, load_samples,
                                 quadrature_grid, save_samples, simulate_replicate)

from oracles import conjugate_posterior

FLAT_K = ModelConstants(v0=0.0)
SETUP, FLAT_PRIOR = flat_g0_problem()


def flat(g0):
    return PatientParams(0.0, 0.0, 0.5, g0)


def test_simpson_weights_integrate_cubic_exactly():
    t, w = quadrature_grid()
    assert t.size == 181 and w.sum() == pytest.approx(3.0)
    assert w @ t ** 3 == pytest.approx(3.0 ** 4 / 4, rel=1e-13)
    with pytest.raises(InputError):
        quadrature_grid(3.0, 0.7)


def test_ise_trivial_cases():
    assert integrated_squared_error(HEALTHY, HEALTHY) == 0.0
    assert integrated_squared_error(flat(80), flat(86.5), FLAT_K) == pytest.approx(3 * 6.5 ** 2, rel=1e-12)


def test_ise_matches_oracles(frozen):
    v = integrated_squared_error(HEALTHY, DIABETIC)
    assert v == pytest.approx(frozen["ise"]["healthy_vs_diabetic_simpson"], rel=1e-4)
    assert v == pytest.approx(frozen["ise"]["healthy_vs_diabetic_quad"], rel=1e-4)


def test_ise_rejects_unsupported_params():
    with pytest.raises(InputError):
        integrated_squared_error(HEALTHY, PatientParams(1, 1, 0.1, 80))


def test_estimate_u_trivial_cases():
    assert estimate_u(HEALTHY, np.tile(HEALTHY.as_array(), (7, 1))) == 0.0
    d = 4.0
    two = np.array([flat(90).as_array(), flat(90 + d).as_array()])
    assert estimate_u(flat(90), two, FLAT_K) == pytest.approx(-3 * d * d / 2, rel=1e-12)
    with pytest.raises(InputError):
        estimate_u(HEALTHY, np.empty((0, 4)))


def test_estimate_u_conjugate_expectation():
    rng = np.random.default_rng(11)
    truth = flat(84.0)
    y = simulate_data(truth, PROPOSED, NoiseModel(), FLAT_K, rng)
    m, v = conjugate_posterior(y)
    post = run_mcmc(SETUP.problem(PROPOSED.times, y), truth, raw_iterations=30_000, rng=rng)
    ise = utility.posterior_ise(truth, post.draws, FLAT_K)
    expected = -3 * (v + (m - truth.g0) ** 2)
    se = ise.std(ddof=1) / math.sqrt(len(ise))
    assert abs(estimate_u(truth, post, FLAT_K) - expected) < 3 * se


def test_degenerate_prior_noiseless_limit():
    setup = UtilitySetup(noise=NoiseModel(1e-7))
    est = estimate_U(PROPOSED, DesignPrior((HEALTHY,)), 4, 20, RngStream(1), setup)
    assert est.mean > -1e-6


def test_estimate_structure_and_replay():
    est = estimate_U(PROPOSED, FLAT_PRIOR, 40, 100, RngStream(3), SETUP)
    assert est.T1 == 40 and len(est.values) == 40
    u = est.values
    assert est.mean == pytest.approx(u.mean())
    assert est.variance_of_mean == pytest.approx(u.var(ddof=1) / 40)
    assert np.all(u <= 0)
    s = est.samples[17]
    again = simulate_replicate(PROPOSED, FLAT_PRIOR, 100, SETUP, s.seed, s.index, s.attempt)
    assert again == s
    assert RngStream(3).seed(PROPOSED.key(), 17, 0) == s.seed


def test_extend_contract():
    est = estimate_U(PROPOSED, FLAT_PRIOR, 30, 100, RngStream(4), SETUP)
    assert extend_estimate(est, 0) is est
    with pytest.raises(ContractViolation):
        extend_estimate(est, 10, design_prior=FLAT_PRIOR, T2=50)
    both = extend_estimate(est, 30, design_prior=FLAT_PRIOR)
    direct = estimate_U(PROPOSED, FLAT_PRIOR, 60, 100, RngStream(4), SETUP)
    assert both.samples == direct.samples
    assert both.mean == direct.mean and both.variance_of_mean == direct.variance_of_mean


def test_extension_shrinks_variance_on_average():
    before, after = [], []
    for r in range(50):
        est = estimate_U(EARLY_ONLY, FLAT_PRIOR, 30, 100, RngStream(100 + r), SETUP)
        before.append(est.variance_of_mean)
        after.append(extend_estimate(est, 60, design_prior=FLAT_PRIOR).variance_of_mean)
    assert np.mean(after) < np.mean(before)


def test_flat_problem_closed_form_agrees():
    est = estimate_U(PROPOSED, FLAT_PRIOR, 400, 100, RngStream(5), SETUP)
    z = (est.mean - flat_g0_expected_utility(5)) / est.std_error
    assert abs(z) < 3.5


def test_parallel_schedule_gives_identical_samples():
    a = estimate_U(PROPOSED, FLAT_PRIOR, 12, 100, RngStream(6), SETUP, workers=1)
    b = estimate_U(PROPOSED, FLAT_PRIOR, 12, 100, RngStream(6), SETUP, workers=2)
    assert a.samples == b.samples


def test_retry_then_exclude(monkeypatch):
    real = utility.simulate_replicate
    calls = []

    def flaky(design, prior, T2, setup, seed, index, attempt):
        calls.append((index, attempt))
        if index == 3 and attempt == 0:
            raise IntegrationError("boom", 1.0)
        if index == 5:
            raise IntegrationError("always", 1.0)
        return real(design, prior, T2, setup, seed, index, attempt)

    monkeypatch.setattr(utility, "simulate_replicate", flaky)
    with pytest.raises(EstimationError):
        estimate_U(PROPOSED, FLAT_PRIOR, 20, 100, RngStream(7), SETUP)
    est = estimate_U(PROPOSED, FLAT_PRIOR, 120, 100, RngStream(7), SETUP)
    assert est.excluded == (5,) and est.T1 == 119 and est.n_attempted == 120
    assert [s.attempt for s in est.samples if s.index == 3] == [1]
    assert (5, 1) in calls


def test_input_errors():
    with pytest.raises(InputError):
        estimate_U(PROPOSED, FLAT_PRIOR, 1, 100, RngStream(0), SETUP)
    with pytest.raises(ContractViolation):
        UtilitySample(1.0, HEALTHY, 0, 0)


def test_sample_store_round_trip_and_append_only(tmp_path):
    est = estimate_U(PROPOSED, FLAT_PRIOR, 10, 100, RngStream(8), SETUP)
    path = tmp_path / "s.jsonl"
    save_samples(est, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 10 and json.loads(lines[0])["params"]["g0"] == est.samples[0].generating_params.g0
    back = load_samples(path)
    assert back.samples == est.samples and back.T2 == 100 and back.setup == SETUP
    more = extend_estimate(back, 5, design_prior=FLAT_PRIOR)
    save_samples(more, path)
    assert path.read_text().splitlines()[:10] == lines
    assert load_samples(path).samples == more.samples
    other = estimate_U(PROPOSED, FLAT_PRIOR, 10, 100, RngStream(9), SETUP)
    with pytest.raises(ContractViolation):
        save_samples(other, path)
    with pytest.raises(InputError):
        load_samples(tmp_path / "missing.jsonl")


def test_injected_estimate_statistics():
    samples = [UtilitySample(-float(v), FLAT_BASE, 0, i) for i, v in enumerate([1, 2, 3, 4])]
    est = DesignUtilityEstimate(Design((0, 60)), samples, 100)
    assert est.mean == -2.5
    assert est.variance_of_mean == pytest.approx(np.var([1, 2, 3, 4], ddof=1) / 4)


@pytest.mark.slow
def test_full_size_estimate_completes():
    est = estimate_U(PROPOSED, DesignPrior(), 600, 100, RngStream(10))
    assert est.T1 == 600 and math.isfinite(est.mean) and 0 < est.std_error < math.inf
