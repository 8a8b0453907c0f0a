import json

import numpy as np
import pandas as pd
import pytest

from core.emulator import RunTable
from core.errors import ConfigurationError
from core.experiment import (
    ExperimentConfig,
    benchmark_theta_star,
    emit_density_data,
    generate_benchmark,
    run_experiment,
    write_density_files,
)
from core.models import Design, NoiseModel, sample_field_data
from core.reference_models import MODEL1_THETA_STAR, model1, model1_truth

ROOT_CONFIG = {
    "model": "model1",
    "n": 30,
    "iters": 300,
    "burnin": 100,
    "replications": 2,
    "quadrature_points": 8,
    "seed": 13,
}


def small_config(tmp_path, **overrides) -> ExperimentConfig:
    values = {**ROOT_CONFIG, "output_dir": str(tmp_path / "out"), **overrides}
    return ExperimentConfig(**values)


class TestConfig:
    def test_from_file(self, tmp_path):
        path = tmp_path / "exp.env"
        path.write_text(
            "# comment\n"
            "MODEL=model2\n"
            "prior=ogp\n"
            "N=40\n"
            "SIGMA=0.1\n"
            "DIAGNOSTICS=true\n"
            "THETA_LOWER=0,0\n"
            "THETA_UPPER=0.25,0.5\n"
            "KERNEL_SIGMA2=\n"
        )
        config = ExperimentConfig.from_file(path, output_dir="elsewhere")
        assert config.model == "model2"
        assert config.prior == "ogp"
        assert config.n == 40
        assert config.sigma == pytest.approx(0.1)
        assert config.diagnostics is True
        assert config.theta_upper == [0.25, 0.5]
        assert config.kernel_sigma2 is None
        assert config.output_dir == "elsewhere"

    def test_bundled_configs_parse(self):
        from pathlib import Path

        configs = sorted((Path(__file__).parent.parent / "config").glob("*.env"))
        assert configs
        for path in configs:
            ExperimentConfig.from_file(path)

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "exp.env"
        path.write_text("MODEL=model1\nITERATIONS=10\n")
        with pytest.raises(ConfigurationError, match="ITERATIONS"):
            ExperimentConfig.from_file(path)

    def test_bad_value(self, tmp_path):
        path = tmp_path / "exp.env"
        path.write_text("N=many\n")
        with pytest.raises(ConfigurationError, match="N="):
            ExperimentConfig.from_file(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="not found"):
            ExperimentConfig.from_file(tmp_path / "absent.env")

    @pytest.mark.parametrize("overrides", [
        {"model": "model9"},
        {"prior": "spline"},
        {"projection": "oblique"},
        {"constraint_points": "everywhere"},
        {"iters": 100, "burnin": 100},
        {"n": 0},
        {"sigma": -0.2},
        {"holdout_fraction": 0.9},
        {"prior": "basis", "projection": "finite_dim"},
        {"model": "custom-runtable"},
        {"outcomes": [1]},
        {"model": "bivariate", "outcomes": [0]},
        {"theta_lower": [0.0]},
    ])
    def test_validation(self, overrides):
        with pytest.raises(ConfigurationError):
            ExperimentConfig(**overrides)

    def test_digest_ignores_output_settings(self, tmp_path):
        a = small_config(tmp_path)
        b = small_config(tmp_path, output_dir="other", workers=4, diagnostics=True)
        c = small_config(tmp_path, seed=14)
        assert a.digest() == b.digest()
        assert a.digest() != c.digest()

    def test_to_settings(self, tmp_path):
        settings = small_config(tmp_path, constraint_points="design", prior="basis",
                                projection="moment").to_settings()
        assert settings.weighting == "design"
        assert settings.prior == "basis"
        assert settings.iters == 300


class TestBenchmarks:
    def test_model1(self):
        bench = generate_benchmark("model1", n=50, seed=1)
        assert bench.observations.n == 50
        assert bench.observations.q == 1
        np.testing.assert_allclose(bench.theta_star, [MODEL1_THETA_STAR])
        again = generate_benchmark("model1", n=50, seed=1)
        np.testing.assert_array_equal(bench.observations.values, again.observations.values)

    def test_model3_carries_run_grid(self):
        bench = generate_benchmark("model3", n=20, seed=2)
        assert bench.run_table.n_rows == 49 * 20
        assert bench.run_table.p == 2
        np.testing.assert_allclose(bench.theta_star, [0.2, 0.3])

    def test_bivariate_noise(self):
        bench = generate_benchmark("bivariate", n=30, sigma=0.2, seed=3)
        assert bench.observations.q == 2
        np.testing.assert_allclose(bench.noise.sigma_F, [[0.04, 0.012], [0.012, 0.04]])
        assert benchmark_theta_star("bivariate")[0] == pytest.approx(3.56, abs=0.1)

    def test_unknown_model(self):
        with pytest.raises(ConfigurationError):
            generate_benchmark("custom-runtable")


class TestDensity:
    def test_per_coordinate_tables(self):
        draws = np.random.default_rng(0).normal(size=(500, 2))
        tables = emit_density_data(draws, grid_size=64)
        assert list(tables) == ["theta_1", "theta_2"]
        assert all(len(t) == 64 for t in tables.values())

    def test_empty_chain(self):
        with pytest.raises(ConfigurationError):
            emit_density_data(np.empty((0, 1)))

    def test_write_files(self, tmp_path):
        paths = write_density_files(np.linspace(0, 1, 200), tmp_path, prefix="density")
        assert [p.name for p in paths] == ["density_theta_1.csv"]
        assert list(pd.read_csv(paths[0]).columns) == ["value", "density"]


class TestRunExperiment:
    def test_outputs_and_aggregates(self, tmp_path):
        config = small_config(tmp_path)
        record = run_experiment(config)
        out = tmp_path / "out"
        for name in ("summary.json", "table.csv", "replications.csv", "chain_0.csv", "chain_1.csv",
                     "density_theta_1.csv"):
            assert (out / name).exists(), name

        rows = pd.read_csv(out / "replications.csv")
        agg = record.aggregate()
        assert agg["replications"] == 2
        assert agg["mean"][0] == pytest.approx(rows["mean_1"].mean(), rel=1e-12)
        assert agg["sd"][0] == pytest.approx(rows["sd_1"].mean(), rel=1e-12)
        assert agg["coverage"][0] == pytest.approx(rows["covered_1"].mean())

        chain = pd.read_csv(out / "chain_0.csv")
        assert list(chain.columns) == ["iter", "theta_1", "loglik", "accept", "max_constraint_residual"]
        assert len(chain) == 200

        table = pd.read_csv(out / "table.csv")
        assert table.loc[0, "method"] == "gp-functional"

    def test_summary_is_reproducible(self, tmp_path):
        first = run_experiment(small_config(tmp_path / "a"))
        second = run_experiment(small_config(tmp_path / "b", workers=1))
        a = (tmp_path / "a" / "out" / "summary.json").read_bytes()
        b = (tmp_path / "b" / "out" / "summary.json").read_bytes()
        assert a == b
        assert json.loads(a)["config_digest"] == first.config_digest == second.config_digest

    def test_diagnostics_columns(self, tmp_path):
        run_experiment(small_config(tmp_path, diagnostics=True, replications=2))
        chain = pd.read_csv(tmp_path / "out" / "chain_0.csv")
        assert {"lambda_1", "gram_condition"} <= set(chain.columns)

    def test_bivariate_comparison(self, tmp_path):
        config = small_config(tmp_path, model="bivariate")
        record = run_experiment(config, compare_outcomes=True)
        agg = record.aggregate()
        assert 0.0 <= agg["joint_tighter_fraction"] <= 1.0
        assert 0.0 <= agg["joint_mass_mean"] <= 1.0
        out = tmp_path / "out"
        for label in ("uni1", "uni2", "joint"):
            assert (out / f"density_{label}_theta_1.csv").exists()
        rows = pd.read_csv(out / "replications.csv")
        assert {"sd_uni1", "sd_uni2", "sd_joint", "joint_mass"} <= set(rows.columns)

    def test_comparison_needs_bivariate_model(self, tmp_path):
        with pytest.raises(ConfigurationError):
            run_experiment(small_config(tmp_path), compare_outcomes=True)

    def test_custom_runtable(self, tmp_path):
        m = model1()
        runs = RunTable.from_model(m, np.linspace(2.0, 5.0, 8)[:, None], np.linspace(0.0, 1.0, 10))
        runs.to_csv(tmp_path / "runs.csv")
        design = Design.uniform(30, seed=5)
        sample_field_data(model1_truth, NoiseModel.isotropic(0.2), design, seed=6) \
            .to_frame().to_csv(tmp_path / "field.csv", index=False)

        config = small_config(tmp_path, model="custom-runtable", runtable=str(tmp_path / "runs.csv"),
                              field_data=str(tmp_path / "field.csv"), replications=1)
        record = run_experiment(config)
        assert record.theta_star is None
        assert record.failures == 0
        assert 2.0 <= record.aggregate()["mean"][0] <= 5.0
        assert "coverage" not in record.aggregate()
        assert np.isnan(record.table_frame().loc[0, "coverage"])
        assert (tmp_path / "out" / "density_theta_1.csv").exists()
