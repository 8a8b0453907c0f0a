import numpy as np
import pytest

from core.errors import ConfigurationError, DimensionError, RankDeficiencyWarning
from core.models import ComputerModel, Design, NoiseModel, build_constraint_set
from core.numerics import Box, GridFunction, gauss_legendre_rule
from core.priors import BiasDraw, GaussianProcessPrior, MaternKernel
from core.projection import (
    WhitenedProjector,
    constraint_matrix,
    finite_dim_project_gaussian,
    functional_project,
    moment_project_nongaussian,
    whitened_project_sample,
)
from core.reference_models import bivariate, model1, model2


def _random_draw(rng, design, rule, q):
    return BiasDraw(rng.standard_normal((design.n, q)),
                    GridFunction(rng.standard_normal((rule.n_nodes, q)), rule))


def _random_instance(rng, dim, p):
    a = rng.standard_normal((dim, dim))
    cov = a @ a.T + 0.1 * np.eye(dim)
    return rng.standard_normal(dim), cov, rng.standard_normal((dim, p))


class TestFunctionalProjection:
    def test_constant_bias_on_model1(self, rule, design):
        cs = build_constraint_set(model1(), [3.5], rule, design)
        b = BiasDraw(np.ones((design.n, 1)), GridFunction(np.ones(rule.n_nodes), rule))
        projected, report = functional_project(b, cs)
        np.testing.assert_allclose(projected.grid_values.values[:, 0], 1.0 - 1.5 * rule.nodes[:, 0],
                                   atol=1e-12)
        np.testing.assert_allclose(projected.design_values[:, 0], 1.0 - 1.5 * design.points[:, 0],
                                   atol=1e-12)
        assert report.lambda_[0] == pytest.approx(1.5, rel=1e-12)
        assert projected.provenance == "projected"

    @pytest.mark.parametrize("factory,anchor", [
        (model1, [3.5]),
        (model2, [0.2, 0.3]),
        (bivariate, [3.5]),
    ])
    def test_constraint_residuals_vanish(self, factory, anchor, rule, design, rng):
        m = factory()
        cs = build_constraint_set(m, anchor, rule, design)
        for _ in range(1000 // 3 + 1):
            b = _random_draw(rng, design, rule, m.q)
            projected, report = functional_project(b, cs)
            assert report.relative_residual <= 1e-8
            scale = b.grid_values.norm() * np.array([g.norm() for g in cs.gradients])
            assert np.all(np.abs(cs.functionals(projected.grid_values)) <= 1e-8 * scale)

    def test_idempotent_and_linear(self, rule, design, rng):
        cs = build_constraint_set(model2(), [0.2, 0.3], rule, design)
        b1 = _random_draw(rng, design, rule, 1)
        b2 = _random_draw(rng, design, rule, 1)
        p1, _ = functional_project(b1, cs)
        twice, _ = functional_project(p1, cs)
        np.testing.assert_allclose(twice.grid_values.values, p1.grid_values.values, atol=1e-10)
        np.testing.assert_allclose(twice.design_values, p1.design_values, atol=1e-10)

        p2, _ = functional_project(b2, cs)
        combo = BiasDraw(2.5 * b1.design_values + b2.design_values,
                         2.5 * b1.grid_values + b2.grid_values)
        p_combo, _ = functional_project(combo, cs)
        np.testing.assert_allclose(p_combo.grid_values.values,
                                   2.5 * p1.grid_values.values + p2.grid_values.values, atol=1e-10)

    def test_orthogonal_draw_unchanged(self, rule, design):
        cs = build_constraint_set(model1(), [3.5], rule, design)
        b = BiasDraw(1.0 - 1.5 * design.points, GridFunction(1.0 - 1.5 * rule.nodes, rule))
        projected, report = functional_project(b, cs)
        np.testing.assert_allclose(projected.grid_values.values, b.grid_values.values, atol=1e-12)
        assert abs(report.lambda_[0]) < 1e-12

    def test_projection_is_closest_feasible_function(self, rule, design, rng):
        cs = build_constraint_set(model2(), [0.2, 0.3], rule, design)
        b = _random_draw(rng, design, rule, 1)
        projected, report = functional_project(b, cs)
        removed = b.grid_values - projected.grid_values
        span = np.tensordot(report.lambda_, cs.grid_values(), axes=1)
        np.testing.assert_allclose(removed.values, span, atol=1e-10)

        distance = removed.norm()
        for _ in range(100):
            direction, _ = functional_project(_random_draw(rng, design, rule, 1), cs)
            h = projected.grid_values + rng.uniform(0.01, 2.0) * direction.grid_values
            assert distance <= (b.grid_values - h).norm() + 1e-12

    def test_only_constrained_outcome_is_centred(self, rule, design):
        # f(x, t) = (t, 0) so g = (1, 0)
        def evaluate(x, t):
            return np.column_stack([np.full(x.shape[0], t[0]), np.zeros(x.shape[0])])

        def gradient(x, t):
            return np.column_stack([np.ones(x.shape[0]), np.zeros(x.shape[0])])[None]

        m = ComputerModel(evaluate, Box([0.0], [1.0]), q=2, gradient=gradient)
        cs = build_constraint_set(m, [0.5], rule, design)
        c1, c2 = 0.7, -1.3
        b = BiasDraw(np.tile([c1, c2], (design.n, 1)),
                     GridFunction(np.tile([c1, c2], (rule.n_nodes, 1)), rule))
        projected, report = functional_project(b, cs)
        np.testing.assert_allclose(projected.grid_values.values[:, 0], 0.0, atol=1e-12)
        np.testing.assert_allclose(projected.grid_values.values[:, 1], c2, atol=1e-12)
        np.testing.assert_allclose(projected.design_values, np.tile([0.0, c2], (design.n, 1)),
                                   atol=1e-12)
        assert report.lambda_[0] == pytest.approx(c1, rel=1e-12)

    def test_rule_mismatch(self, rule, small_rule, design, rng):
        cs = build_constraint_set(model1(), [3.5], rule, design)
        with pytest.raises(DimensionError):
            functional_project(_random_draw(rng, design, small_rule, 1), cs)


class TestWhitenedProjection:
    def test_image_satisfies_constraints(self, rng):
        _, cov, A = _random_instance(rng, 8, 3)
        projector = WhitenedProjector(cov, A, jitter=0.0)
        x = rng.standard_normal(8)
        y = projector.project(x)
        assert np.max(np.abs(A.T @ y)) <= 1e-10 * np.linalg.norm(A) * np.linalg.norm(x)
        np.testing.assert_allclose(projector.project(y), y, atol=1e-10)
        np.testing.assert_allclose(x - y, cov @ A @ projector.multipliers(x), atol=1e-9)

    def test_constrained_gaussian_matches_conditioning(self, rng):
        mu, cov, A = _random_instance(rng, 6, 2)
        mean_star, cov_star = finite_dim_project_gaussian(mu, cov, A)
        gain = cov @ A @ np.linalg.solve(A.T @ cov @ A, A.T)
        np.testing.assert_allclose(mean_star, mu - gain @ mu, atol=1e-10)
        np.testing.assert_allclose(cov_star, cov - gain @ cov, atol=1e-10)
        np.testing.assert_allclose(A.T @ cov_star, 0.0, atol=1e-10)

    def test_projected_samples_have_constrained_moments(self):
        rng = np.random.default_rng(123)
        draws = 100_000
        for _ in range(10):
            mu, cov, A = _random_instance(rng, 6, 2)
            mean_star, cov_star = finite_dim_project_gaussian(mu, cov, A)
            L = np.linalg.cholesky(cov)
            samples = mu[:, None] + L @ rng.standard_normal((6, draws))
            projected = WhitenedProjector(cov, A, jitter=0.0).project(samples)
            se = np.sqrt(np.clip(np.diag(cov_star), 0.0, None) / draws) + 1e-12
            assert np.all(np.abs(projected.mean(axis=1) - mean_star) <= 4 * se)
            np.testing.assert_allclose(np.cov(projected), cov_star,
                                       atol=0.05 * np.max(np.abs(cov_star)))

    def test_whitened_sample_helper(self, rng):
        _, cov, A = _random_instance(rng, 5, 1)
        x = rng.standard_normal(5)
        np.testing.assert_allclose(whitened_project_sample(x, cov, A),
                                   WhitenedProjector(cov, A, jitter=0.0).project(x))

    def test_rank_deficient_constraints(self, rng):
        _, cov, A = _random_instance(rng, 5, 1)
        A2 = np.hstack([A, 2.0 * A])
        with pytest.warns(RankDeficiencyWarning):
            projector = WhitenedProjector(cov, A2, jitter=0.0)
        assert projector.rank_deficient
        y = projector.project(rng.standard_normal(5))
        assert np.max(np.abs(A2.T @ y)) < 1e-9

    def test_quadrature_weighting_reproduces_functionals(self, rule, design, rng):
        cs = build_constraint_set(bivariate(), [3.5], rule, design)
        A = constraint_matrix(cs, design.n, "quadrature")
        assert A.shape == (2 * (design.n + rule.n_nodes), 1)
        b = _random_draw(rng, design, rule, 2)
        np.testing.assert_allclose(A.T @ b.stacked(), cs.functionals(b.grid_values), rtol=1e-12)

    def test_design_weighting(self, rule, design):
        cs = build_constraint_set(model1(), [3.5], rule, design)
        A = constraint_matrix(cs, design.n, "design")
        np.testing.assert_allclose(A[: design.n, 0], design.points[:, 0])
        assert np.all(A[design.n:] == 0)

    def test_unknown_weighting(self, rule, design):
        cs = build_constraint_set(model1(), [3.5], rule, design)
        with pytest.raises(ConfigurationError):
            constraint_matrix(cs, design.n, "uniform")


class TestMomentProjection:
    def _setup(self):
        rule = gauss_legendre_rule(8)
        design = Design(np.linspace(0.05, 0.95, 5), Box.unit(1))
        cs = build_constraint_set(model1(), [3.5], rule, design)
        prior = GaussianProcessPrior(MaternKernel(sigma2=0.04))
        residuals = 0.1 * np.sin(6.0 * design.points)
        return rule, design, cs, prior, residuals

    def test_projected_draw_satisfies_constraints(self):
        rule, design, cs, prior, residuals = self._setup()
        result = moment_project_nongaussian(prior, residuals, NoiseModel.isotropic(0.2), design, cs,
                                            M=400, seed=1)
        assert result.report.relative_residual <= 1e-8
        assert result.draw.n == design.n
        assert result.sample_cov.shape == (13, 13)
        A = constraint_matrix(cs, design.n)
        assert abs(float(A[:, 0] @ result.draw.stacked())) <= 1e-8 * np.linalg.norm(A) * 10

    def test_requires_enough_samples(self):
        rule, design, cs, prior, residuals = self._setup()
        with pytest.raises(ConfigurationError):
            moment_project_nongaussian(prior, residuals, NoiseModel.isotropic(0.2), design, cs, M=100)
