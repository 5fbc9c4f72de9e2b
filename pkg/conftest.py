import os
from pathlib import Path

import numpy as np
import pytest

from data_model import TITAN_GRID, Dataset, build_dataset
from schemas import SimConfig
from simulation import SimulationResult, simulate

TITAN_CSV_ENV = "SPATIALRISK_TITAN_CSV"


@pytest.fixture(scope="session")
def small_sim() -> SimulationResult:
    """200 units on a 4x4 grid with the default truth (gradient and posterior tests)."""
    print("\nSimulating small dataset (N=200, d=4)")
    return simulate(SimConfig(n_units=200, grid_side=4, seed=11))


@pytest.fixture(scope="session")
def small_data(small_sim: SimulationResult) -> Dataset:
    return small_sim.dataset


@pytest.fixture(scope="session")
def medium_sim() -> SimulationResult:
    """2,000 units on a 4x4 grid (residual, oracle and MCEM tests)."""
    print("\nSimulating medium dataset (N=2000, d=4)")
    return simulate(SimConfig(n_units=2000, grid_side=4, seed=23))


@pytest.fixture(scope="session")
def titan_like_data() -> Dataset:
    """Random records on the 8x25 cabinet grid with cage/slot/node dummy coding."""
    rng = np.random.default_rng(5)
    n = 300
    event = rng.integers(0, 3, size=n)
    return build_dataset(
        unit_id=[f"n{j}" for j in range(n)],
        row=rng.integers(0, TITAN_GRID.n_rows, size=n),
        col=rng.integers(0, TITAN_GRID.n_cols, size=n),
        cage=rng.integers(0, 3, size=n),
        slot=rng.integers(0, 8, size=n),
        node=rng.integers(0, 4, size=n),
        time=rng.uniform(0.2, 6.0, size=n),
        event=event,
    )


@pytest.fixture(scope="function")
def out_dir(tmp_path: Path) -> Path:
    """Fresh output directory per test."""
    path = tmp_path / "out"
    path.mkdir()
    yield path


@pytest.fixture(scope="session")
def titan_csv() -> Path:
    """Path to the public GPU failure dataset; tests using it are skipped when unset."""
    value = os.environ.get(TITAN_CSV_ENV)
    if not value or not Path(value).is_file():
        pytest.skip(f"{TITAN_CSV_ENV} not set to an existing file")
    return Path(value)
