from pathlib import Path

import pytest

from restraj.dataset import build_dataset, load_grid
from restraj.dynamics import pendulum

CONFIGS = Path(__file__).resolve().parents[1] / "src" / "restraj" / "configs"


@pytest.fixture(scope="session")
def configs() -> Path:
    return CONFIGS


@pytest.fixture(scope="session")
def pendulum_dataset():
    """The 8-trajectory pendulum residual dataset (about half a second to build)."""
    return build_dataset(pendulum(), load_grid(CONFIGS / "grid_pendulum.json"))


@pytest.fixture(scope="session")
def small_nn(pendulum_dataset):
    """A briefly trained ensemble; enough for structural checks, not accuracy."""
    from restraj.nn import MlpConfig, train_dataset

    return train_dataset(pendulum_dataset, MlpConfig(hidden=16, epochs=30))


@pytest.fixture(scope="session")
def small_gp(pendulum_dataset):
    from restraj.gp import GpConfig, fit

    ds = pendulum_dataset
    rows = ds.rows("train")
    return fit(ds.inputs(rows), ds.r[rows], GpConfig(epochs=10))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
