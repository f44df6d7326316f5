import json
import math

import numpy as np
import pytest

from ogtt_design.design import CONVENTIONAL, PROPOSED
from ogtt_design.distributions import (DesignPrior, InferencePrior, NoiseModel, PinnedPrior,
                                       log_prior_inference, sample_design_prior,
                                       sample_inference_prior, simulate_data)
from ogtt_design.errors import ConfigurationError, InputError
from ogtt_design.glucose_model import (DIABETIC, HEALTHY, OSCILLATING, ModelConstants,
                                       PatientParams, glucose_at_times)

K = ModelConstants()


def test_inference_prior_draws_respect_truncation():
    rng = np.random.default_rng(1)
    for _ in range(2000):
        p = sample_inference_prior(rng)
        assert p.theta2 > 0.16 and 30 <= p.g0 <= 400 and p.in_support()
    x = InferencePrior().sample_many(rng, 50_000)
    assert np.all(x[:, 2] > 0.16) and np.all((x[:, 3] >= 30) & (x[:, 3] <= 400))


def test_inference_prior_means(frozen):
    x = InferencePrior().sample_many(np.random.default_rng(2), 1_000_000)
    assert x[:, 0].mean() == pytest.approx(2.0, abs=0.01)
    se = x[:, 2].std() / 1000
    assert abs(x[:, 2].mean() - frozen["prior_means"]["theta2"]) < 4 * se
    m = InferencePrior().mean()
    assert m.theta2 == pytest.approx(frozen["prior_means"]["theta2"], rel=1e-10)
    assert m.g0 == pytest.approx(frozen["prior_means"]["g0"], rel=1e-10)


def test_log_prior_support_and_ratio():
    assert log_prior_inference(PatientParams(1, 1, 0.1, 80)) == -math.inf
    assert log_prior_inference(PatientParams(1, 1, 0.5, 500)) == -math.inf
    assert log_prior_inference(PatientParams(-1, 1, 0.5, 80)) == -math.inf
    assert math.isfinite(log_prior_inference(PatientParams(1, 1, 0.5, 80)))
    a = log_prior_inference(PatientParams(2, 1, 0.5, 80))
    b = log_prior_inference(PatientParams(1, 1, 0.5, 80))
    assert a - b == pytest.approx(math.log(2) - 1, abs=1e-12)


def test_log_prior_normalised_untruncated_terms():
    from scipy import stats
    p = PatientParams(1.7, 0.4, 0.55, 91.0)
    ref = (stats.gamma.logpdf(1.7, 2) + stats.gamma.logpdf(0.4, 2)
           + stats.gamma.logpdf(0.55, 10, scale=0.05) + stats.norm.logpdf(91, 80, 10))
    assert log_prior_inference(p) == pytest.approx(ref, rel=1e-12)


def test_design_prior_draws():
    rng = np.random.default_rng(3)
    one = DesignPrior((HEALTHY,))
    assert all(one.sample(rng) == HEALTHY for _ in range(100))
    dp = DesignPrior()
    assert dp.weights.sum() == pytest.approx(1.0)
    draws = [sample_design_prior(rng, dp) for _ in range(300_000)]
    atoms = [HEALTHY, DIABETIC, OSCILLATING]
    freq = np.array([sum(d == a for d in draws) for a in atoms]) / len(draws)
    assert set(draws) == set(atoms)
    np.testing.assert_allclose(freq, 1 / 3, atol=0.005)


def test_design_prior_errors_and_json(tmp_path):
    with pytest.raises(ConfigurationError):
        DesignPrior(())
    with pytest.raises(ConfigurationError):
        DesignPrior((PatientParams(1, 1, 0.1, 80),))
    with pytest.raises(ConfigurationError):
        DesignPrior.from_json([{"theta0": 1}])
    path = tmp_path / "prior.json"
    DesignPrior().save(path)
    assert DesignPrior.load(path) == DesignPrior()
    assert json.loads(path.read_text())[0]["theta0"] == 2.15


def test_pinned_prior_moves_only_free_block():
    base = PatientParams(0.0, 0.0, 0.5, 80.0)
    pp = PinnedPrior(InferencePrior(), base)
    rng = np.random.default_rng(4)
    draws = np.array([pp.sample(rng).as_array() for _ in range(500)])
    assert np.all(draws[:, :3] == base.as_array()[:3])
    assert draws[:, 3].std() == pytest.approx(10, rel=0.15)


def test_simulate_noiseless_and_noise_variance():
    rng = np.random.default_rng(5)
    y = simulate_data(HEALTHY, PROPOSED, NoiseModel(0.0), K, rng)
    assert np.array_equal(y, glucose_at_times(HEALTHY, K, PROPOSED.times))
    ys = np.array([simulate_data(HEALTHY, CONVENTIONAL, NoiseModel(), K, rng) for _ in range(20000)])
    var = ys.var(axis=0, ddof=1)
    # sd of a sample variance of normals: 25 * sqrt(2 / (n - 1))
    assert np.all(np.abs(var - 25) < 4 * 25 * math.sqrt(2 / 19999))


def test_predictive_draws_follow_atom_curves():
    rng = np.random.default_rng(6)
    dp = DesignPrior()
    curves = {a: glucose_at_times(a, K, PROPOSED.times) for a in dp.atoms}
    for _ in range(200):
        theta = dp.sample(rng)
        y = simulate_data(theta, PROPOSED, NoiseModel(), K, rng)
        assert np.all(np.abs(y - curves[theta]) < 5 * 5)


def test_noise_model_validation():
    with pytest.raises(InputError):
        NoiseModel(-1)
    with pytest.raises(InputError):
        NoiseModel(math.nan)
