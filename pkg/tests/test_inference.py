import math

import numpy as np
import pytest
from numba import njit

from ogtt_design.design import CONVENTIONAL, PROPOSED
from ogtt_design.distributions import InferencePrior, NoiseModel, simulate_data
from ogtt_design.errors import InputError, SamplerError
from ogtt_design.glucose_model import (DIABETIC, HEALTHY, OSCILLATING, ModelConstants, PatientParams,
                                       glucose_at_times)
from ogtt_design.inference import (PosteriorProblem, fit_data, log_likelihood, log_posterior,
                                   prior_mean_start, run_chain, run_mcmc, start_at_truth)
from ogtt_design.twalk import run_twalk
from ogtt_design.utility import FLAT_BASE, flat_g0_posterior_variance

from oracles import conjugate_posterior

K = ModelConstants()
FLAT_K = ModelConstants(v0=0.0)
PATIENT_MIN = np.array([0, 30, 60, 90, 120])
PATIENT_Y = np.array([81.0, 156.0, 141.0, 102.0, 89.0])


def flat_problem(y, sigma=5.0):
    t = np.linspace(0, 2, len(y))
    return PosteriorProblem(t, y, noise=NoiseModel(sigma), consts=FLAT_K, free=("g0",), base=FLAT_BASE)


def batch_se(x, n_batches=40):
    b = np.array_split(x, n_batches)
    return np.std([v.mean() for v in b], ddof=1) / math.sqrt(n_batches)


def test_log_likelihood_examples():
    y = glucose_at_times(HEALTHY, K, PROPOSED.times)
    pb = PosteriorProblem(PROPOSED.times, y)
    assert log_likelihood(HEALTHY, pb) == 0.0
    pb1 = PosteriorProblem([1.0], [glucose_at_times(HEALTHY, K, [1.0])[0] + 5])
    assert log_likelihood(HEALTHY, pb1) == pytest.approx(-0.5)


def test_log_posterior_support_and_flat_mode():
    pb = PosteriorProblem(PROPOSED.times, np.full(5, 80.0))
    assert log_posterior(PatientParams(1, 1, 0.1, 80), pb) == -math.inf
    flat = flat_problem(np.full(5, 97.0), sigma=1.0)
    grid = np.linspace(90, 104, 141)
    lp = [log_posterior(PatientParams(0, 0, 0.5, g), flat) for g in grid]
    # prior pull is 1/100 against 5 data precisions of 1: mode just below the data
    mode, _ = conjugate_posterior(np.full(5, 97.0), sigma=1.0)
    assert grid[int(np.argmax(lp))] == pytest.approx(mode, abs=0.1)


def test_log_posterior_matches_conjugate_shape():
    y = np.array([88.0, 92.0, 85.0, 90.0])
    pb = flat_problem(y)
    m, v = conjugate_posterior(y)
    g = np.array([70.0, 85.0, 100.0])
    lp = np.array([log_posterior(PatientParams(0, 0, 0.5, x), pb) for x in g])
    ref = -0.5 * (g - m) ** 2 / v
    np.testing.assert_allclose(lp - lp[1], ref - ref[1], rtol=1e-10)


def test_problem_validation():
    with pytest.raises(InputError):
        PosteriorProblem([0, 1], [80.0])
    with pytest.raises(InputError):
        PosteriorProblem([0, 4], [80.0, 80.0])
    with pytest.raises(InputError):
        PosteriorProblem([0], [80.0], noise=NoiseModel(0.0))
    with pytest.raises(InputError):
        PosteriorProblem([0], [80.0], free=("g0",))


def test_twalk_gaussian_moments():
    @njit
    def target(x, args):
        mu, prec = args
        d = x - mu
        return -0.5 * d @ prec @ d

    cov = np.array([[1.0, 0.6], [0.6, 2.0]])
    mu = np.array([1.0, -2.0])
    res = run_twalk(target, np.array([0.5, 0.5]), np.array([0.6, 0.4]), 200_000,
                    np.random.default_rng(0), (mu, np.linalg.inv(cov)))
    x = res.chain[2000:]
    for j in range(2):
        assert abs(x[:, j].mean() - mu[j]) < 3 * batch_se(x[:, j])
        assert abs(x[:, j].var() - cov[j, j]) < 3 * batch_se((x[:, j] - mu[j]) ** 2)
    c = (x[:, 0] - mu[0]) * (x[:, 1] - mu[1])
    assert abs(c.mean() - cov[0, 1]) < 3 * batch_se(c)


def test_prior_only_chain_matches_prior_means():
    pb = PosteriorProblem([], [])
    rng = np.random.default_rng(1)
    post = run_mcmc(pb, prior_mean_start(pb), raw_iterations=300_000, thinning_stride=10,
                    rng=rng, burn_in=5000)
    m = InferencePrior().mean().as_array()
    for j in range(4):
        x = post.draws[:, j]
        assert abs(x.mean() - m[j]) < 3 * batch_se(x), j


def test_conjugate_posterior_from_truth_no_burn_in():
    rng = np.random.default_rng(2)
    truth = PatientParams(0, 0, 0.5, 87.0)
    pb = flat_problem(87.0 + 5 * rng.standard_normal(5))
    m, v = conjugate_posterior(pb.data)
    post = run_mcmc(pb, start_at_truth(truth), raw_iterations=150_000, thinning_stride=15, rng=rng)
    g = post.draws[:, 3]
    assert post.burn_in == 0 and post.start_point == truth
    assert abs(g.mean() - m) < 3 * batch_se(g)
    assert abs(g.var() - v) < 3 * batch_se((g - m) ** 2)
    assert v == pytest.approx(flat_g0_posterior_variance(5))


def test_thinned_autocorrelation_small():
    rng = np.random.default_rng(3)
    pb = flat_problem(85.0 + 5 * rng.standard_normal(5))
    post = run_mcmc(pb, PatientParams(0, 0, 0.5, 85.0), raw_iterations=150_000, rng=rng)
    g = post.draws[:, 3] - post.draws[:, 3].mean()
    assert (g[1:] @ g[:-1]) / (g @ g) < 0.2


def test_default_chain_shape_and_determinism():
    y = simulate_data(HEALTHY, PROPOSED, NoiseModel(), K, np.random.default_rng(4))
    pb = PosteriorProblem(PROPOSED.times, y)
    a = run_mcmc(pb, HEALTHY, rng=np.random.default_rng(9))
    b = run_mcmc(pb, HEALTHY, rng=np.random.default_rng(9))
    assert a.draws.shape == (100, 4) and a.raw_chain_length == 1500 and a.thinning_stride == 15
    assert np.array_equal(a.draws, b.draws)
    assert all(p.in_support() for p in a.params())


@pytest.mark.parametrize("truth", [HEALTHY, DIABETIC, OSCILLATING])
def test_first_moves_from_truth_accept(truth):
    rng = np.random.default_rng(5)
    y = simulate_data(truth, PROPOSED, NoiseModel(), K, rng)
    res = run_chain(PosteriorProblem(PROPOSED.times, y), truth, 10, rng)
    assert res.accepted.sum() > 0


def test_all_rejected_chain_raises(monkeypatch):
    from ogtt_design import inference
    from ogtt_design.twalk import TWalkResult

    def stuck(problem, start, n, rng):
        z = np.tile(problem.pack(start), (n + 1, 1))
        return TWalkResult(z, np.zeros(n + 1), np.array([n, 0, 0, 0]), np.zeros(4, int), 0)

    monkeypatch.setattr(inference, "run_chain", stuck)
    pb = flat_problem(np.full(5, 80.0))
    with pytest.raises(SamplerError) as err:
        run_mcmc(pb, PatientParams(0, 0, 0.5, 80.0), raw_iterations=30, thinning_stride=15,
                 rng=np.random.default_rng(0))
    assert err.value.diagnostics["proposed"] == [30, 0, 0, 0]


def test_bad_chain_arguments():
    pb = flat_problem(np.full(3, 80.0))
    with pytest.raises(InputError):
        run_mcmc(pb, PatientParams(0, 0, 0.5, 80.0), raw_iterations=10, thinning_stride=15)
    with pytest.raises(SamplerError):
        run_mcmc(pb, PatientParams(0, 0, 0.5, 500.0), rng=np.random.default_rng(0))


def test_real_patient_fit_beats_diabetic_curve():
    pb = PosteriorProblem(PATIENT_MIN / 60, PATIENT_Y)
    post = fit_data(pb, np.random.default_rng(6))
    assert post.burn_in == 300 and len(post) == 100
    assert log_likelihood(post.mean(), pb) > log_likelihood(DIABETIC, pb)


@pytest.mark.xfail(strict=True, reason="with the placeholder model constants the best fit misses "
                   "the 30-minute peak and the 2-hour value by more than the noise allows")
def test_real_patient_predictive_band_envelopes_data():
    pb = PosteriorProblem(PATIENT_MIN / 60, PATIENT_Y)
    post = fit_data(pb, np.random.default_rng(6))
    curves = np.array([glucose_at_times(p, K, PATIENT_MIN / 60) for p in post.params()])
    pred = curves + 5 * np.random.default_rng(7).standard_normal(curves.shape)
    lo, hi = np.quantile(pred, [0.025, 0.975], axis=0)
    assert np.all((PATIENT_Y >= lo) & (PATIENT_Y <= hi))
