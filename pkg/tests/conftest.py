import numpy as np
import pytest

from beamcast.config import ExperimentConfig, load_config
from beamcast.experiment import generate


def small_config(laps: int = 2, epochs: int = 50) -> ExperimentConfig:
    """LoS preset on a short lap: 100 snapshots per lap."""
    cfg = load_config("los")
    cfg.trajectory.waypoints = [(11.2, 5.6, 11.5), (14.0, 5.6, 11.5), (14.0, 7.0, 11.5), (11.2, 7.0, 11.5)]
    cfg.trajectory.num_laps = laps
    cfg.model.epochs = epochs
    cfg.model.learning_rate = 3e-3
    cfg.horizons_ms = [0, 40]
    return cfg


@pytest.fixture(scope="session")
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_dataset(small_cfg):
    return generate(small_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def run_pipeline(cfg: ExperimentConfig, out) -> dict:
    """generate, train and evaluate through the command-line entry point."""
    from beamcast.cli import main
    from beamcast.config import save_config

    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "config.json"
    save_config(cfg, cfg_path)
    common = ["--config", str(cfg_path), "--out", str(out)]
    codes = [main(["generate", *common, "--export-q15", str(out / "raw.q15")]),
             main(["train", *common]),
             main(["evaluate", *common])]
    assert codes == [0, 0, 0]
    return {"out": out, "config": cfg_path}


@pytest.fixture(scope="session")
def cli_run(small_cfg, tmp_path_factory):
    return run_pipeline(small_cfg, tmp_path_factory.mktemp("run1"))


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for num in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[num])
