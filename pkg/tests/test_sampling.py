"""Tests for the importance-sampling machinery.

Closed forms, numerical quadrature, and direct Monte-Carlo sampling from
the target distributions serve as the oracles.
"""

import math

import numpy as np
import pytest

from episampler import sampling, streams
from episampler.sampling import DifficultyModel, SamplingScheme


def _ready_model(mu=0.0, var=1.0, lam=0.9):
    return DifficultyModel(mu=mu, var=var, lam=lam, warmup_remaining=0)


def _trapezoid_mass(f, lo, hi, points=200_001):
    xs = np.linspace(lo, hi, points)
    ys = np.array([f(x) for x in xs])
    return float(np.trapezoid(ys, xs))


class TestNormalPdf:
    def test_standard_normal_at_zero(self):
        assert sampling.normal_pdf(0.0, 0.0, 1.0) == pytest.approx(1.0 / math.sqrt(2 * math.pi), abs=1e-12)
        assert sampling.normal_pdf(0.0, 0.0, 1.0) == pytest.approx(0.398942, abs=1e-6)

    def test_symmetry(self):
        for t in (0.3, 1.7, 2.2):
            left = sampling.normal_pdf(1.0 - t, 1.0, 2.5)
            right = sampling.normal_pdf(1.0 + t, 1.0, 2.5)
            assert right == pytest.approx(left, rel=1e-12)

    def test_integrates_to_one(self):
        mu, var = 0.7, 1.3
        sigma = math.sqrt(var)
        mass = _trapezoid_mass(lambda x: sampling.normal_pdf(x, mu, var), mu - 5 * sigma, mu + 5 * sigma)
        assert mass == pytest.approx(1.0, abs=1e-6)

    def test_nonpositive_variance_rejected(self):
        with pytest.raises(sampling.SamplerError):
            sampling.normal_pdf(0.0, 0.0, 0.0)


class TestTargetDensity:
    def test_uniform_density_at_mu(self):
        model = _ready_model(mu=2.0, var=4.0)
        expected = 1.0 / (2 * sampling.TRUNCATION_SIGMAS * 2.0)
        assert sampling.target_density(2.0, SamplingScheme("uniform"), model) == pytest.approx(expected, rel=1e-12)

    def test_easy_zero_above_mu(self):
        model = _ready_model(mu=1.0, var=1.0)
        assert sampling.target_density(1.5, SamplingScheme("easy"), model) == 0.0
        assert sampling.target_density(0.5, SamplingScheme("easy"), model) > 0.0

    def test_hard_zero_below_mu(self):
        model = _ready_model(mu=1.0, var=1.0)
        assert sampling.target_density(0.5, SamplingScheme("hard"), model) == 0.0

    def test_curriculum_midpoint_normalizer(self):
        model = _ready_model(mu=0.0, var=1.0)
        scheme = SamplingScheme("curriculum", progress=0.5)
        z = 2 * (0.5 * (1 + math.erf(sampling.TRUNCATION_SIGMAS / math.sqrt(2)))) - 1
        assert z == pytest.approx(0.99012, abs=5e-6)
        got = sampling.target_density(0.3, scheme, model)
        assert got == pytest.approx(sampling.normal_pdf(0.3, 0.0, 1.0) / z, rel=1e-12)

    @pytest.mark.parametrize(
        "kind, progress",
        [
            ("easy", None),
            ("hard", None),
            ("uniform", None),
            ("curriculum", 0.0),
            ("curriculum", 0.3),
            ("curriculum", 1.0),
        ],
    )
    def test_densities_integrate_to_one(self, kind, progress):
        model = _ready_model(mu=1.3, var=0.49)
        scheme = SamplingScheme(kind, progress=progress)
        lo, hi = model.support_bounds()
        if kind == "easy":
            lo, hi = lo, model.mu
        elif kind == "hard":
            lo, hi = model.mu, hi
        mass = _trapezoid_mass(lambda x: sampling.target_density(x, scheme, model), lo, hi)
        assert mass == pytest.approx(1.0, abs=1e-6)

    def test_baseline_is_the_proposal(self):
        model = _ready_model(mu=0.4, var=2.0)
        got = sampling.target_density(1.0, SamplingScheme("baseline"), model)
        assert got == sampling.normal_pdf(1.0, 0.4, 2.0)


class TestImportanceWeight:
    def test_uniform_weight_at_mu_closed_form(self):
        for sigma in (0.3, 1.0, 4.0):
            model = _ready_model(mu=1.0, var=sigma**2)
            w, underflow = sampling.importance_weight(1.0, SamplingScheme("uniform"), model)
            assert not underflow
            assert w == pytest.approx(math.sqrt(2 * math.pi) / 5.16, abs=1e-9)
            assert w == pytest.approx(0.48578, abs=1e-5)

    def test_baseline_weight_is_one(self):
        model = _ready_model(mu=0.0, var=1.0)
        for omega in (-3.0, 0.0, 5.0):
            assert sampling.importance_weight(omega, SamplingScheme("baseline"), model) == (1.0, False)

    def test_hard_weight_zero_below_mu(self):
        model = _ready_model(mu=1.0, var=1.0)
        w, _ = sampling.importance_weight(0.0, SamplingScheme("hard"), model)
        assert w == 0.0

    def test_warmup_weight_is_one(self):
        model = DifficultyModel(warmup_remaining=5)
        w, _ = sampling.importance_weight(3.0, SamplingScheme("uniform"), model)
        assert w == 1.0

    def test_proposal_underflow_flagged_not_nan(self):
        # Far outside the support the proposal underflows to 0.0; the clamp
        # turns the would-be 0/0 into a clean zero weight plus a flag.
        model = _ready_model(mu=0.0, var=sampling.VARIANCE_FLOOR)
        w, underflow = sampling.importance_weight(1.0, SamplingScheme("uniform"), model)
        assert underflow
        assert w == 0.0 and math.isfinite(w)


class TestEffectiveSampleSize:
    def test_constant_weights_give_batch_size(self):
        assert sampling.effective_sample_size([1.0, 1.0, 1.0, 1.0]) == 4.0

    def test_single_effective_sample(self):
        assert sampling.effective_sample_size([1.0, 0.0, 0.0, 0.0]) == 1.0

    def test_hand_value(self):
        assert sampling.effective_sample_size([2.0, 1.0]) == pytest.approx(1.8, abs=1e-15)

    def test_all_zero_rejected(self):
        with pytest.raises(sampling.SamplerError):
            sampling.effective_sample_size([0.0, 0.0])

    def test_rescaling_invariance(self):
        rng = streams.stream(0, streams.STATS)
        for _ in range(1000):
            w = rng.uniform(0.01, 5.0, size=rng.integers(2, 20))
            c = float(rng.uniform(1e-3, 1e3))
            a = sampling.effective_sample_size(w)
            b = sampling.effective_sample_size(c * w)
            assert abs(a - b) <= 1e-12 * max(1.0, abs(a))

    def test_bounds_and_equality_condition(self):
        rng = streams.stream(1, streams.STATS)
        for _ in range(1000):
            w = rng.uniform(0.0, 3.0, size=rng.integers(1, 16))
            if w.sum() == 0:
                continue
            ess = sampling.effective_sample_size(w)
            assert 1.0 - 1e-12 <= ess <= len(w) + 1e-12
            if ess >= len(w) - 1e-12:
                positive = w[w > 0]
                assert np.allclose(positive, positive[0], rtol=1e-9)


class TestOnlineModel:
    def test_hand_ema_step(self):
        model = _ready_model(mu=1.0, var=1.0)
        sampling.update_online(model, 2.0)
        assert model.mu == pytest.approx(1.1, abs=1e-15)
        assert model.var == pytest.approx(0.9 * 1.0 + 0.1 * (2.0 - 1.1) ** 2, abs=1e-15)
        assert model.var == pytest.approx(0.981, abs=1e-12)

    def test_constant_stream_reaches_fixed_point(self):
        model = _ready_model(mu=0.0, var=1.0)
        for _ in range(2000):
            sampling.update_online(model, 2.5)
        assert model.mu == pytest.approx(2.5, abs=1e-9)
        assert model.var == sampling.VARIANCE_FLOOR

    def test_lambda_one_freezes_model(self):
        model = _ready_model(mu=1.0, var=2.0, lam=1.0)
        for omega in (0.0, 5.0, -3.0):
            sampling.update_online(model, omega)
        assert model.mu == 1.0 and model.var == 2.0

    def test_warmup_buffers_then_seeds(self):
        model = DifficultyModel(warmup_remaining=4)
        for omega in (0.0, 2.0, 4.0):
            sampling.update_online(model, omega)
            assert not model.ready
        sampling.update_online(model, 6.0)
        assert model.ready
        values = np.array([0.0, 2.0, 4.0, 6.0])
        assert model.mu == pytest.approx(values.mean())
        assert model.var == pytest.approx(values.var(ddof=1))
        assert model.warmup_buffer == []


class TestOfflineEstimate:
    def test_hand_mean_and_unbiased_variance(self):
        model = sampling.estimate_offline([0.0, 2.0])
        assert model.mu == 1.0
        assert model.var == 2.0
        assert model.ready

    def test_constant_list_floors_variance(self):
        model = sampling.estimate_offline([1.5, 1.5, 1.5])
        assert model.var == sampling.VARIANCE_FLOOR

    def test_fewer_than_two_rejected(self):
        with pytest.raises(sampling.SamplerError):
            sampling.estimate_offline([1.0])

    def test_monte_carlo_recovery(self):
        rng = streams.stream(123, streams.STATS)
        draws = rng.normal(3.0, 2.0, size=1000)
        model = sampling.estimate_offline(draws)
        assert abs(model.mu - 3.0) < 0.2
        assert abs(model.var - 4.0) < 0.6


class TestImportanceSamplingSelfConsistency:
    def test_uniform_target_moments(self):
        # Weighting proposal draws toward the UNIFORM target must
        # reproduce the uniform distribution's mean and variance; direct
        # sampling from U[mu +- 2.58 sigma] is the oracle.
        mu, sigma = 1.7, 0.6
        model = _ready_model(mu=mu, var=sigma**2)
        scheme = SamplingScheme("uniform")
        rng = streams.stream(7, streams.STATS)
        xs = rng.normal(mu, sigma, size=100_000)
        ws = np.array([sampling.importance_weight(x, scheme, model)[0] for x in xs])
        weighted_mean = float((ws * xs).sum() / ws.sum())
        assert abs(weighted_mean - mu) < 0.01 * sigma
        m2 = float((ws * (xs - mu) ** 2).sum() / ws.sum())
        expected_m2 = (2 * sampling.TRUNCATION_SIGMAS * sigma) ** 2 / 12.0
        assert abs(m2 - expected_m2) / expected_m2 < 0.02

    def test_curriculum_weighted_median_sweeps_upward(self):
        mu, sigma = 0.5, 1.2
        model = _ready_model(mu=mu, var=sigma**2)
        rng = streams.stream(8, streams.STATS)
        xs = np.sort(rng.normal(mu, sigma, size=50_000))
        medians = []
        for progress in (0.0, 0.25, 0.5, 0.75, 1.0):
            scheme = SamplingScheme("curriculum", progress=progress)
            ws = np.array([sampling.importance_weight(x, scheme, model)[0] for x in xs])
            cdf = np.cumsum(ws) / ws.sum()
            medians.append(float(xs[np.searchsorted(cdf, 0.5)]))
        assert all(a < b for a, b in zip(medians, medians[1:]))
        assert medians[0] < mu < medians[-1]
