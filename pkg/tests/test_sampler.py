from typing import List, Optional, Tuple

import numpy as np
import pytest

from errors import DataValidationError, InitializationError
from posterior import SpatialPriorTarget
from sampler import (
    PosteriorDraws,
    initialize,
    read_draws,
    run_chains,
    sample,
    summarize,
    warmup_windows,
    write_draws,
)
from schemas import CorrelationKind, Family, ModelConfig, PriorConfig, SamplerConfig


class GaussianTarget:
    """Multivariate normal log density with a known answer."""

    def __init__(self, mean: np.ndarray, cov: np.ndarray):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        self.precision = np.linalg.inv(self.cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def names(self) -> List[str]:
        return [f"x{i}" for i in range(self.dim)]

    def log_density_and_grad(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        r = x - self.mean
        g = -self.precision @ r
        return 0.5 * float(r @ g), g

    def log_density(self, x: np.ndarray) -> float:
        return self.log_density_and_grad(x)[0]

    def constrain(self, x: np.ndarray) -> np.ndarray:
        return np.array(x, dtype=float)

    def first_nonfinite_term(self, x: np.ndarray) -> Optional[str]:
        return None


class HopelessTarget(GaussianTarget):
    def log_density_and_grad(self, x):
        return -np.inf, np.zeros_like(x)

    def first_nonfinite_term(self, x):
        return "log_likelihood"


def _draws(values: np.ndarray, names=("a",)) -> PosteriorDraws:
    values = np.asarray(values, dtype=float)
    return PosteriorDraws(names=list(names), values=values, lp=np.zeros(values.shape[:2]))


# --- Warmup schedule --- #


def test_warmup_windows_double_and_stretch_last():
    init_end, ends = warmup_windows(1000)

    assert init_end == 150
    assert ends == [175, 225, 325, 900]


def test_warmup_windows_short_warmup():
    init_end, ends = warmup_windows(100)

    assert init_end == 15
    assert ends[-1] == 90


# --- NUTS on analytic targets --- #


def test_standard_normal_moments():
    """4 x 2,000 draws reproduce the mean and covariance of a 2-D standard normal."""
    # 1. Arrange
    target = GaussianTarget(np.zeros(2), np.eye(2))
    config = SamplerConfig(chains=4, warmup_iters=1000, sampling_iters=2000, seed=42)

    # 2. Act
    draws = sample(target, config)

    # 3. Assert
    flat = draws.flat()
    assert flat.shape == (8000, 2)
    np.testing.assert_allclose(flat.mean(axis=0), 0.0, atol=0.05)
    np.testing.assert_allclose(np.cov(flat.T), np.eye(2), atol=0.1)
    assert draws.report.divergence_rate < 0.01


def test_correlated_normal_recovered():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(5, 5))
    cov = A @ A.T / 5 + 0.5 * np.eye(5)
    sd = np.sqrt(np.diag(cov))
    mean = np.arange(5, dtype=float)
    target = GaussianTarget(mean, cov)

    draws = sample(target, SamplerConfig(chains=4, warmup_iters=1000, sampling_iters=2000, seed=7))

    flat = draws.flat()
    np.testing.assert_allclose((flat.mean(axis=0) - mean) / sd, 0.0, atol=0.08)
    np.testing.assert_allclose(np.corrcoef(flat.T), cov / np.outer(sd, sd), atol=0.1)
    summary = summarize(draws)
    assert (summary["rhat"] < 1.01).all()


def test_same_seed_gives_identical_draws():
    target = GaussianTarget(np.zeros(3), np.eye(3))
    config = SamplerConfig(chains=2, warmup_iters=150, sampling_iters=100, seed=3)

    first = sample(target, config)
    second = sample(target, config)

    np.testing.assert_array_equal(first.values, second.values)
    np.testing.assert_array_equal(first.lp, second.lp)


def test_worker_count_does_not_change_draws():
    target = GaussianTarget(np.zeros(2), np.eye(2))
    config = SamplerConfig(chains=2, warmup_iters=100, sampling_iters=50, seed=9)

    serial = sample(target, config, threads=1)
    parallel = sample(target, config, threads=2)

    np.testing.assert_array_equal(serial.values, parallel.values)


def test_chains_use_distinct_streams():
    target = GaussianTarget(np.zeros(2), np.eye(2))
    draws = sample(target, SamplerConfig(chains=2, warmup_iters=100, sampling_iters=50, seed=1))

    assert not np.array_equal(draws.values[0], draws.values[1])


def test_prior_only_range_mass():
    """Sampling the (nu, kappa) prior alone recovers P(nu <= 0.5) of IG(5, 1)."""
    target = SpatialPriorTarget(PriorConfig(), CorrelationKind.PEXP)
    config = SamplerConfig(chains=4, warmup_iters=1000, sampling_iters=2000, seed=11)

    draws = sample(target, config)

    nu = draws.param("nu").ravel()
    kappa = draws.param("kappa").ravel()
    assert np.mean(nu <= 0.5) == pytest.approx(0.947, abs=0.02)
    assert kappa.min() > 0 and kappa.max() <= 2


# --- Initialization --- #


def test_initialize_returns_finite_start():
    target = GaussianTarget(np.zeros(4), np.eye(4))

    x = initialize(target, np.random.default_rng(0), radius=2.0)

    assert np.all(np.abs(x) <= 2.0)


def test_initialization_error_names_term():
    target = HopelessTarget(np.zeros(2), np.eye(2))

    with pytest.raises(InitializationError) as excinfo:
        initialize(target, 0, attempts=5)

    assert excinfo.value.term == "log_likelihood"
    assert excinfo.value.attempts == 5
    assert excinfo.value.exit_code == 4


# --- Summaries --- #


def test_summary_of_constant_draws():
    draws = _draws(np.full((2, 50, 1), 3.5))

    row = summarize(draws).iloc[0]

    assert row["sd"] == 0.0
    assert row["q025"] == row["q975"] == 3.5
    assert np.isnan(row["rhat"])


def test_summary_quantile_rule():
    draws = _draws(np.arange(1, 1001, dtype=float).reshape(1, 1000, 1))

    row = summarize(draws).iloc[0]

    assert row["q025"] == pytest.approx(25.975)
    assert row["q975"] == pytest.approx(975.025)
    assert row["mean"] == pytest.approx(500.5)


def test_draws_file_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    draws = _draws(rng.normal(size=(3, 20, 2)), names=("mu1", "w1[r0c0]"))

    again = read_draws(write_draws(draws, tmp_path / "draws.csv"))

    assert again.names == ["mu1", "w1[r0c0]"]
    assert again.scalar_names == ["mu1"]
    np.testing.assert_array_equal(again.values, draws.values)


def test_draws_file_keeps_every_bit_of_lp(tmp_path):
    rng = np.random.default_rng(3)
    values = rng.normal(size=(2, 30, 1)) * 10.0 ** rng.integers(-6, 6, size=(2, 30, 1))
    draws = PosteriorDraws(names=["a"], values=values, lp=-1000.0 * rng.uniform(size=(2, 30)))

    again = read_draws(write_draws(draws, tmp_path / "draws.csv"))

    assert again.values.tobytes() == draws.values.tobytes()
    assert again.lp.tobytes() == draws.lp.tobytes()


def test_read_draws_rejects_other_csv(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("a,b\n1,2\n", encoding="utf-8")

    with pytest.raises(DataValidationError):
        read_draws(path)


# --- Full model --- #


def test_run_chains_on_simulated_data(small_data):
    """Short fit: draw layout, positive scales and stored pointwise log likelihood."""
    # 1. Arrange
    model = ModelConfig(family=Family.WEIBULL, correlation=CorrelationKind.PEXP, mixture=False)
    config = SamplerConfig(chains=2, warmup_iters=150, sampling_iters=40, max_tree_depth=6, seed=5)

    # 2. Act
    draws = run_chains(small_data, model, config)

    # 3. Assert
    assert draws.values.shape[:2] == (2, 40)
    assert draws.log_lik.shape == (2, 40, small_data.n_units)
    assert "xi2" in draws.scalar_names
    assert (draws.param("xi1") > 0).all()
    assert (draws.param("nu") > 0).all()
    effects = draws.values[:, :, len(draws.scalar_names):]
    np.testing.assert_allclose(effects.reshape(-1, 2, small_data.n_locations).sum(axis=2), 0.0, atol=1e-10)
    assert np.all(np.isfinite(draws.lp))

    summary = summarize(draws)
    assert (summary.set_index("param").loc[["xi1", "xi2", "sigma1", "nu"], "q025"] > 0).all()
