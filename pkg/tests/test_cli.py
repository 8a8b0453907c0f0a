from pathlib import Path

import numpy as np
import pandas as pd
import pytest

import orthocal
from core.calibrate import Chain
from core.errors import ConfigurationError

CONFIG_DIR = Path(__file__).parent.parent / "config"


def write_chain(path: Path, p: int):
    rng = np.random.default_rng(0)
    chain = Chain(
        iterations=np.arange(300),
        theta=rng.normal(3.5, 0.1, size=(300, p)),
        loglik=np.zeros(300),
        accepted=np.ones(300, dtype=bool),
        max_constraint_residual=np.zeros(300),
        acceptance_rate=1.0,
    )
    chain.to_frame().to_csv(path, index=False)


class TestDensityCommand:
    def test_single_parameter(self, tmp_path):
        write_chain(tmp_path / "chain.csv", 1)
        out = tmp_path / "density.csv"
        code = orthocal.main(["density", "--chain", str(tmp_path / "chain.csv"), "--out", str(out),
                              "--grid-size", "50"])
        assert code == orthocal.EXIT_OK
        assert len(pd.read_csv(out)) == 50

    def test_one_file_per_coordinate(self, tmp_path):
        write_chain(tmp_path / "chain.csv", 2)
        out = tmp_path / "density.csv"
        orthocal.main(["density", "--chain", str(tmp_path / "chain.csv"), "--out", str(out)])
        assert (tmp_path / "density_theta_1.csv").exists()
        assert (tmp_path / "density_theta_2.csv").exists()
        assert not out.exists()


class TestLossCommand:
    def test_model1_profile(self, tmp_path):
        out = tmp_path / "loss.csv"
        code = orthocal.main(["loss", "--model", "model1", "--points", "21",
                              "--quadrature-points", "16", "--out", str(out)])
        assert code == orthocal.EXIT_OK
        frame = pd.read_csv(out)
        assert len(frame) == 21
        assert frame.loc[frame["loss"].idxmin(), "theta_1"] == pytest.approx(3.5)

    def test_two_parameter_grid(self, tmp_path):
        out = tmp_path / "loss.csv"
        orthocal.main(["loss", "--model", "model2", "--points", "5", "--out", str(out)])
        frame = pd.read_csv(out)
        assert len(frame) == 25
        assert {"theta_1", "theta_2", "loss_1", "loss"} <= set(frame.columns)


class TestRunCommand:
    def test_smoke_config(self, tmp_path):
        code = orthocal.main(["run", "--config", str(CONFIG_DIR / "smoke.env"), "--out", str(tmp_path)])
        assert code == orthocal.EXIT_OK
        assert (tmp_path / "summary.json").exists()
        assert (tmp_path / "table.csv").exists()

    def test_unknown_key_exits_with_config_code(self, tmp_path):
        path = tmp_path / "bad.env"
        path.write_text("MODEL=model1\nSAMPLES=10\n")
        assert orthocal.main(["run", "--config", str(path)]) == orthocal.EXIT_CONFIG

    def test_invalid_combination_exits_with_config_code(self, tmp_path):
        path = tmp_path / "bad.env"
        path.write_text("MODEL=model1\nPRIOR=basis\nPROJECTION=finite_dim\n")
        assert orthocal.main(["run", "--config", str(path)]) == orthocal.EXIT_CONFIG

    def test_bench(self, tmp_path):
        code = orthocal.main(["bench", "--model", "model1", "--reps", "2", "--n", "20", "--iters", "200",
                              "--burnin", "50", "--seed", "3", "--out", str(tmp_path)])
        assert code == orthocal.EXIT_OK
        assert (tmp_path / "chain_1.csv").exists()


class TestWorkerCap:
    def test_no_cap(self, monkeypatch):
        monkeypatch.delenv("ORTHOCAL_THREADS", raising=False)
        assert orthocal._cap_workers(8) == 8

    def test_cap(self, monkeypatch):
        monkeypatch.setenv("ORTHOCAL_THREADS", "2")
        assert orthocal._cap_workers(8) == 2
        assert orthocal._cap_workers(1) == 1

    def test_invalid_cap(self, monkeypatch):
        monkeypatch.setenv("ORTHOCAL_THREADS", "many")
        with pytest.raises(ConfigurationError):
            orthocal._cap_workers(4)
