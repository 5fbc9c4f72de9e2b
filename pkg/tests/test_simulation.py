import json

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from errors import ConfigError
from schemas import GridSpec, SamplerConfig, SimConfig, SimTruth
from simulation import (
    binary_covariates,
    censoring_times,
    conditional_cdf,
    draw_effects,
    event_probabilities,
    recovery_metrics,
    replicate_seed,
    run_recovery_study,
    simulate,
    write_truth,
)

NO_EFFECTS = SimTruth(sigma1_sq=0.0, sigma2_sq=0.0)


def _estimates_at(truth: dict, replicates: int = 3) -> pd.DataFrame:
    rows = [
        {"replicate": r, "param": name, "mean": value, "sd": 0.1, "q025": value - 0.5, "q975": value + 0.5}
        for r in range(replicates)
        for name, value in truth.items()
    ]
    return pd.DataFrame(rows)


# --- Pieces --- #


def test_censoring_times_span_study_window():
    times = censoring_times(SimConfig(), 20_000, np.random.default_rng(0))

    assert times.min() >= 365 / 365.25 - 1e-12
    assert times.max() <= 2557 / 365.25 + 1e-12
    assert times.mean() == pytest.approx((365 + 2557) / 2 / 365.25, rel=0.02)


def test_binary_covariates_are_fair_coins():
    X = binary_covariates(10_000, np.random.default_rng(1))

    assert X.shape == (10_000, 2)
    assert set(np.unique(X)) == {0.0, 1.0}
    np.testing.assert_allclose(X.mean(axis=0), 0.5, atol=0.02)


def test_zero_variance_effects_are_zero():
    W, cells = draw_effects(NO_EFFECTS, GridSpec(n_rows=3, n_cols=3), np.random.default_rng(2))

    assert W.shape == (9, 2)
    assert cells.shape == (9, 2)
    np.testing.assert_array_equal(W, 0.0)


def test_effect_variances_match_truth():
    truth = SimTruth(sigma1_sq=0.04, sigma2_sq=0.01, rho12=0.5)
    rng = np.random.default_rng(3)

    W = np.stack([draw_effects(truth, GridSpec(n_rows=2, n_cols=2), rng)[0] for _ in range(4000)])

    np.testing.assert_allclose(W[:, 0, :].var(axis=0), [0.04, 0.01], rtol=0.1)
    assert np.corrcoef(W[:, 0, 0], W[:, 0, 1])[0, 1] == pytest.approx(0.5, abs=0.05)


# --- Generator --- #


def test_same_seed_gives_identical_dataset():
    config = SimConfig(n_units=400, grid_side=3, seed=4)

    first = simulate(config)
    second = simulate(config)

    assert first.dataset.equals(second.dataset)
    np.testing.assert_array_equal(first.effects, second.effects)


def test_different_seeds_differ():
    first = simulate(SimConfig(n_units=400, grid_side=3, seed=4))
    second = simulate(SimConfig(n_units=400, grid_side=3, seed=5))

    assert not first.dataset.equals(second.dataset)


def test_simulated_records_are_consistent():
    result = simulate(SimConfig(n_units=500, grid_side=3, seed=6))
    data = result.dataset

    assert data.covariate_names == ("x1", "x2")
    np.testing.assert_allclose(data.time, np.minimum(result.latent.min(axis=1), result.censor))
    np.testing.assert_array_equal(data.event == 1, (result.latent[:, 0] <= data.time) & (data.event != 0))
    assert (data.event[data.time == result.censor] == 0).all()


def test_mode1_fraction_matches_marginal_oracle():
    """Event fractions agree with the quadrature oracle within three standard errors."""
    # 1. Arrange
    config = SimConfig(n_units=5000, grid_side=5, seed=7, truth=NO_EFFECTS)

    # 2. Act
    data = simulate(config).dataset
    oracle = event_probabilities(config)

    # 3. Assert
    for key in ("mode1", "mode2"):
        p = oracle[key]
        observed = data.event_counts()[key] / data.n_units
        assert abs(observed - p) < 3 * np.sqrt(p * (1 - p) / data.n_units)
    assert oracle["mode1"] + oracle["mode2"] < 1.0


def test_latent_times_follow_conditional_law():
    truth = SimTruth()
    result = simulate(SimConfig(n_units=3000, grid_side=4, seed=8))

    for mode in (1, 2):
        u = conditional_cdf(result, truth, mode)(result.latent[:, mode - 1])
        assert stats.kstest(u, "uniform").pvalue > 1e-3


def test_unreachable_thresholds_raise_config_error():
    config = SimConfig(n_units=5, grid_side=5, seed=1, max_regenerations=3)

    with pytest.raises(ConfigError, match="3 attempts"):
        simulate(config)


def test_write_truth_records_effects(tmp_path):
    config = SimConfig(n_units=300, grid_side=3, seed=9)
    result = simulate(config)

    path = write_truth(result, config, tmp_path / "sim" / "truth.json")

    record = json.loads(path.read_text(encoding="utf-8"))
    assert record["seed"] == 9
    assert record["scalar_params"]["sigma1"] == pytest.approx(0.02**0.5)
    assert len(record["effects"]) == 9
    assert record["effects"][0]["w1"] == pytest.approx(result.effects[0, 0])


# --- Recovery study --- #


def test_recovery_metrics_at_truth():
    truth = SimTruth().scalar_params()

    metrics = recovery_metrics(_estimates_at(truth), truth).set_index("param")

    assert metrics.loc["mu1", "rrmse"] == 0.0
    assert metrics.loc["xi1", "rel_bias"] == 0.0
    assert metrics.loc["nu", "coverage"] == 1.0
    assert metrics.loc["nu", "ci_length"] == pytest.approx(1.0)
    assert metrics.loc["mu1", "replicates"] == 3
    assert np.isnan(metrics.loc["rho12", "rrmse"])


def test_recovery_metrics_bias_sign():
    truth = {"mu1": 2.0}
    estimates = _estimates_at({"mu1": 2.2})

    row = recovery_metrics(estimates, truth).iloc[0]

    assert row["rel_bias"] == pytest.approx(0.1)
    assert row["rrmse"] == pytest.approx(0.1)
    assert row["coverage"] == 1.0


def test_replicate_seed_is_stable_and_distinct():
    seeds = {replicate_seed(1, cell, rep) for cell in range(3) for rep in range(10)}

    assert len(seeds) == 30
    assert replicate_seed(1, 2, 3) == replicate_seed(1, 2, 3)
    assert 0 <= replicate_seed(1, 0, 0) < 2**63


@pytest.mark.slow
def test_recovery_study_smoke():
    sampler = SamplerConfig(chains=2, warmup_iters=300, sampling_iters=200, max_tree_depth=7)

    estimates, metrics = run_recovery_study([1000], [3], replicates=2, sampler_config=sampler)

    assert set(metrics["param"]) >= {"mu1", "xi1", "nu"}
    assert (metrics["replicates"] <= 2).all()
    assert set(estimates["n_units"]) == {1000}
