import warnings

import numpy as np
import pytest
from scipy import stats

from core.calibrate import (
    AdaptiveMetropolis,
    CalibrationSettings,
    Chain,
    ReplicationOutcome,
    ThetaPrior,
    build_prior,
    calibrate,
    coverage_experiment,
    emit_loss_profile,
    estimate_anchor,
    l2_loss,
    population_minimizer,
    run_projection_sampler,
    summarize_chain,
)
from core.errors import ConfigurationError, ContractViolationError, ExperimentError, IntervalWarning
from core.models import ComputerModel, Design, NoiseModel, build_constraint_set, sample_field_data
from core.numerics import Box, gauss_legendre_rule
from core.priors import BasisExpansionPrior, GaussianProcessPrior, MaternKernel
from core.reference_models import (
    MODEL1_THETA_STAR,
    bivariate,
    bivariate_truth,
    model1,
    model1_truth,
)

# Mean of N(0, 10^2) truncated to [0, 10]
TRUNCATED_PRIOR_MEAN = 4.599


@pytest.fixture
def small_problem(m1):
    design = Design(np.linspace(0.05, 0.95, 20), Box.unit(1))
    field = sample_field_data(model1_truth, NoiseModel.isotropic(0.2), design, seed=9)
    rule = gauss_legendre_rule(8)
    cs = build_constraint_set(m1, [3.5], rule, design)
    return field, cs


class TestThetaPrior:
    def test_support(self):
        prior = ThetaPrior(Box([0.0], [10.0]))
        assert prior.logpdf([11.0]) == -np.inf
        assert np.isfinite(prior.logpdf([3.0]))
        assert prior.logpdf([1.0]) > prior.logpdf([9.0])

    def test_samples_stay_in_domain(self):
        samples = ThetaPrior(Box([0.0, 0.0], [0.25, 0.5])).sample(500, seed=1)
        assert samples.shape == (500, 2)
        assert np.all((samples >= 0) & (samples <= [0.25, 0.5]))

    def test_truncated_mean(self):
        samples = ThetaPrior(Box([0.0], [10.0])).sample(20_000, seed=2)
        assert samples.mean() == pytest.approx(TRUNCATED_PRIOR_MEAN, abs=0.05)

    def test_gamma_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            ThetaPrior(Box([0.0], [1.0]), gamma=0.0)


class TestLoss:
    def test_population_loss_is_quadratic_in_theta(self, m1, rule):
        base = l2_loss(model1_truth, m1, [MODEL1_THETA_STAR], rule)
        for h in (0.1, -0.3, 1.0):
            shifted = l2_loss(model1_truth, m1, [MODEL1_THETA_STAR + h], rule)
            assert shifted - base == pytest.approx(h ** 2 / 3.0, rel=1e-8)

    def test_empirical_loss(self, m1, model1_data):
        t = np.array([3.0])
        expected = np.mean((model1_data.values - 3.0 * model1_data.design.points) ** 2)
        assert l2_loss(model1_data, m1, t) == pytest.approx(expected)

    def test_model1_population_minimizer(self, m1):
        theta = population_minimizer(model1_truth, m1, gauss_legendre_rule(64))
        assert theta[0] == pytest.approx(MODEL1_THETA_STAR, abs=1e-4)
        assert theta[0] == pytest.approx(3.56, abs=0.01)

    def test_bivariate_population_minimizer(self, biv):
        theta = population_minimizer(bivariate_truth, biv, gauss_legendre_rule(64))
        assert theta[0] == pytest.approx(3.56, abs=0.1)

    def test_anchor_matches_least_squares(self, m1, model1_data):
        x = model1_data.design.points[:, 0]
        y = model1_data.values[:, 0]
        anchor = estimate_anchor(model1_data, m1, seed=0)
        assert anchor[0] == pytest.approx(np.sum(x * y) / np.sum(x * x), abs=1e-4)

    def test_loss_profile_columns(self, biv):
        grid = np.linspace(2.0, 5.0, 7)
        frame = emit_loss_profile(bivariate_truth, biv, gauss_legendre_rule(32), grid)
        assert list(frame.columns) == ["theta_1", "loss_1", "loss_2", "loss"]
        assert len(frame) == 7
        np.testing.assert_allclose(frame["loss"], frame["loss_1"] + frame["loss_2"])


class TestAdaptiveMetropolis:
    @staticmethod
    def log_normal(t):
        return float(-0.5 * np.sum(t ** 2))

    def test_initial_proposal(self):
        am = AdaptiveMetropolis([0.5], Box([-10.0], [10.0]))
        np.testing.assert_allclose(am.proposal_cov, [[0.04]])
        assert not am.frozen

    def test_adapts_then_freezes(self):
        domain = Box([-10.0], [10.0])
        am = AdaptiveMetropolis([0.0], domain, adapt_start=100)
        rng = np.random.default_rng(0)
        current = self.log_normal(am.x)
        for _ in range(3000):
            current, _ = am.step(self.log_normal, current, rng)
        assert am.proposal_cov[0, 0] > 0.04
        assert 0.6 < am.empirical_cov[0, 0] < 1.4

        am.freeze()
        frozen = am.proposal_cov.copy()
        accepted_before = am.accepted
        draws = []
        for _ in range(4000):
            current, _ = am.step(self.log_normal, current, rng)
            draws.append(am.x[0])
        np.testing.assert_array_equal(am.proposal_cov, frozen)
        rate = (am.accepted - accepted_before) / 4000
        assert 0.15 < rate < 0.6
        assert abs(np.mean(draws)) < 0.2

    def test_frozen_proposal_samples_gaussian_target(self):
        # N(1, 0.5^2) target, fixed N(0, 1) random-walk proposal
        am = AdaptiveMetropolis([1.0], Box([-10.0], [10.0]), initial_cov=np.array([[1.0]]))
        am.freeze()
        rng = np.random.default_rng(17)

        def log_target(t):
            return float(-0.5 * np.sum((t - 1.0) ** 2) / 0.25)

        current = log_target(am.x)
        draws = []
        for i in range(40_000):
            current, _ = am.step(log_target, current, rng)
            if i % 10 == 0:
                draws.append(am.x[0])
        np.testing.assert_array_equal(am.proposal_cov, [[1.0]])
        assert stats.kstest(draws, stats.norm(loc=1.0, scale=0.5).cdf).statistic <= 0.05
        # 1-d Gaussian acceptance under min(1, ratio): (2 / pi) arctan(2 sigma / s)
        assert am.accepted / am.iteration == pytest.approx(2.0 / np.pi * np.arctan(1.0), abs=0.03)

    def test_stays_inside_domain(self):
        domain = Box([0.0], [1.0])
        am = AdaptiveMetropolis([0.99], domain, initial_cov=np.array([[0.25]]))
        rng = np.random.default_rng(1)
        current = 0.0
        for _ in range(200):
            current, _ = am.step(lambda t: 0.0, current, rng)
            assert domain.contains(am.x)


class TestProjectionSampler:
    def test_model1_posterior(self, m1):
        design = Design(np.linspace(0.01, 0.99, 50), Box.unit(1))
        field = sample_field_data(model1_truth, NoiseModel.isotropic(0.2), design, seed=21)
        settings = CalibrationSettings(iters=1500, burnin=500, quadrature_points=16)
        result = calibrate(field, m1, settings, noise=NoiseModel.isotropic(0.2), seed=5)
        assert len(result.chain) == 1000
        assert abs(result.summary.mean[0] - MODEL1_THETA_STAR) < 0.2
        assert result.summary.sd[0] < 0.2
        assert np.all(result.chain.max_constraint_residual < 1e-6)
        assert result.sampler_seconds > 0

    def test_prior_only_recovers_truncated_normal(self, m1, model1_data, small_rule):
        cs = build_constraint_set(m1, [3.5], small_rule, model1_data.design)
        prior = GaussianProcessPrior(MaternKernel(sigma2=0.04))
        theta_prior = ThetaPrior(m1.theta_domain)
        chain = run_projection_sampler(
            model1_data, m1, prior, theta_prior, cs, iters=2000 + 5000 * 8, burnin=2000,
            seed=3, noise=NoiseModel.isotropic(0.2), likelihood=False, thin=8,
        )
        assert len(chain) == 5000
        assert chain.theta.mean() == pytest.approx(TRUNCATED_PRIOR_MEAN, abs=0.3)
        assert stats.kstest(chain.theta[:, 0], theta_prior.cdf).statistic <= 0.05

    def test_thinning_and_diagnostics(self, m1, small_problem):
        field, cs = small_problem
        chain = run_projection_sampler(
            field, m1, GaussianProcessPrior(MaternKernel(sigma2=0.04)), ThetaPrior(m1.theta_domain), cs,
            iters=300, burnin=100, seed=1, noise=NoiseModel.isotropic(0.2), thin=4,
            diagnostics=True, keep_bias=True,
        )
        assert len(chain) == 50
        np.testing.assert_array_equal(chain.iterations[:3], [100, 104, 108])
        assert chain.lambdas.shape == (50, 1)
        assert len(chain.biases) == 50
        assert all(b.provenance == "projected" for b in chain.biases)
        frame = chain.to_frame()
        assert {"lambda_1", "gram_condition", "max_constraint_residual"} <= set(frame.columns)
        restored = Chain.from_frame(frame)
        np.testing.assert_array_equal(restored.theta, chain.theta)

    @pytest.mark.parametrize("projection", ["finite_dim", "moment"])
    def test_finite_dimensional_projections(self, m1, small_problem, projection):
        field, cs = small_problem
        chain = run_projection_sampler(
            field, m1, GaussianProcessPrior(MaternKernel(sigma2=0.04)), ThetaPrior(m1.theta_domain), cs,
            iters=200, burnin=50, seed=2, noise=NoiseModel.isotropic(0.2), projection=projection,
        )
        assert len(chain) == 150
        assert np.all(np.isfinite(chain.theta))
        assert np.all(chain.max_constraint_residual < 1e-6)

    def test_basis_prior_with_moment_projection(self, m1, small_problem):
        field, cs = small_problem
        chain = run_projection_sampler(
            field, m1, BasisExpansionPrior(n_basis=6), ThetaPrior(m1.theta_domain), cs,
            iters=150, burnin=50, seed=4, noise=NoiseModel.isotropic(0.2), projection="moment",
        )
        assert len(chain) == 100

    @pytest.mark.parametrize("kwargs", [
        {"iters": 100, "burnin": 100},
        {"thin": 0},
        {"projection": "exact"},
    ])
    def test_invalid_arguments(self, m1, small_problem, kwargs):
        field, cs = small_problem
        args = {"iters": 200, "burnin": 50}
        args.update(kwargs)
        with pytest.raises(ConfigurationError):
            run_projection_sampler(field, m1, GaussianProcessPrior(MaternKernel()),
                                   ThetaPrior(m1.theta_domain), cs, **args)

    def test_finite_dim_needs_gaussian_prior(self, m1, small_problem):
        field, cs = small_problem
        with pytest.raises(ConfigurationError):
            run_projection_sampler(field, m1, BasisExpansionPrior(), ThetaPrior(m1.theta_domain), cs,
                                   iters=200, burnin=50, projection="finite_dim")

    def test_calibrate_rejects_wrong_analytic_gradient(self, model1_data):
        m = ComputerModel(lambda x, t: t[0] ** 2 * x, Box([0.0], [10.0]),
                          gradient=lambda x, t: (t[0] * x)[None])
        with pytest.raises(ContractViolationError):
            calibrate(model1_data, m, CalibrationSettings(iters=200, burnin=50),
                      noise=NoiseModel.isotropic(0.2), seed=0)


class TestSettings:
    @pytest.mark.parametrize("kwargs", [
        {"prior": "spline"},
        {"projection": "oblique"},
        {"prior": "basis", "projection": "finite_dim"},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            CalibrationSettings(**kwargs)

    def test_kernel_variance_defaults_to_noise(self):
        prior = build_prior(CalibrationSettings(), 1, NoiseModel.isotropic(0.2), Box.unit(1))
        assert prior.kernel.sigma2 == pytest.approx(0.04)

    def test_ogp_needs_constraints(self):
        with pytest.raises(ConfigurationError):
            build_prior(CalibrationSettings(prior="ogp"), 1, NoiseModel.isotropic(0.2), Box.unit(1))


class TestSummaries:
    def test_normal_draws(self):
        draws = np.random.default_rng(0).normal(1.0, 2.0, size=(5000, 2))
        summary = summarize_chain(draws)
        np.testing.assert_allclose(summary.mean, 1.0, atol=0.1)
        np.testing.assert_allclose(summary.sd, 2.0, atol=0.1)
        np.testing.assert_allclose(summary.credible_intervals[:, 0], 1.0 - 1.96 * 2.0, atol=0.25)
        assert summary.acceptance_rate is None
        assert summary.n_draws == 5000
        assert summary.covers([1.0, 9.0]).tolist() == [True, False]

    def test_too_few_draws(self):
        with pytest.raises(ConfigurationError):
            summarize_chain(np.zeros(99))

    def test_invalid_level(self):
        with pytest.raises(ConfigurationError):
            summarize_chain(np.random.default_rng(0).random(200), level=1.0)

    def test_mean_outside_interval_warns(self):
        draws = np.concatenate([np.zeros(98), [1e6, 1e6]])
        with pytest.warns(IntervalWarning):
            summary = summarize_chain(draws)
        assert summary.credible_intervals[0, 1] == 0.0


def _replicate_ok(index, seed_seq):
    value = float(np.random.default_rng(seed_seq).random())
    return ReplicationOutcome(index=index, covered=np.array([index % 2 == 0]), extra={"value": value})


def _replicate_some_fail(index, seed_seq):
    if index == 3:
        raise RuntimeError("simulator crashed")
    return _replicate_ok(index, seed_seq)


def _replicate_many_fail(index, seed_seq):
    if index < 3:
        raise RuntimeError("simulator crashed")
    return _replicate_ok(index, seed_seq)


def _replicate_warns(index, seed_seq):
    warnings.warn("mean outside interval", IntervalWarning)
    return _replicate_ok(index, seed_seq)


class TestCoverageExperiment:
    def test_coverage_and_streams(self):
        table = coverage_experiment(_replicate_ok, 20, seed=11)
        assert table.coverage.tolist() == [0.5]
        values = [o.extra["value"] for o in table.outcomes]
        assert len(set(values)) == 20
        again = coverage_experiment(_replicate_ok, 20, seed=11)
        assert [o.extra["value"] for o in again.outcomes] == values

    def test_failures_below_threshold_are_recorded(self):
        table = coverage_experiment(_replicate_some_fail, 20, seed=0)
        assert table.failures == 1
        assert "simulator crashed" in table.outcomes[3].error
        assert len(table.succeeded) == 19

    def test_too_many_failures(self):
        with pytest.raises(ExperimentError, match="3 of 20"):
            coverage_experiment(_replicate_many_fail, 20, seed=0)

    def test_warnings_are_captured(self):
        table = coverage_experiment(_replicate_warns, 3, seed=0)
        assert all(o.warnings == ["IntervalWarning"] for o in table.outcomes)

    def test_needs_two_replications(self):
        with pytest.raises(ConfigurationError):
            coverage_experiment(_replicate_ok, 1)
