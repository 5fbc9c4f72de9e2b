from unittest.mock import patch

import numpy as np
import pytest
from scipy import stats

from data_model import build_dataset
from distributions import ThetaT
from errors import NonPositiveDefiniteError
from posterior import (
    PosteriorModel,
    SpatialField,
    SpatialPriorTarget,
    ThetaW,
    grad_log_posterior,
    log_likelihood,
    log_posterior,
    log_prior,
    model_for,
    reconstruct_effects,
)
from schemas import CorrelationKind, Family, GridSpec, ModelConfig, PriorConfig

THETA_T = ThetaT(
    mu1=1.70, mu2=1.55, beta1=[0.67, 0.27], beta2=[0.57, 0.23], xi1=0.19, xi21=0.14, xi22=0.6, lam=0.7, eta=0.5
)
THETA_W = ThetaW(sigma1=0.14, sigma2=0.10, rho12=0.3, nu=0.25, kappa=1.52)

MODELS = [
    ModelConfig(family=Family.WEIBULL, correlation=CorrelationKind.PEXP, mixture=True),
    ModelConfig(family=Family.LOGNORMAL, correlation=CorrelationKind.EXP, mixture=True),
    ModelConfig(family=Family.WEIBULL, correlation=CorrelationKind.GAU, mixture=False),
    ModelConfig(family=Family.LOGNORMAL, correlation=CorrelationKind.INDEP, mixture=True),
    ModelConfig(family=Family.WEIBULL, correlation=CorrelationKind.NONE, mixture=False),
]


def _start(model: PosteriorModel, rng: np.random.Generator) -> np.ndarray:
    effects = 0.1 * rng.normal(size=(model.layout.n, 2)) if model.layout.n else None
    return model.unconstrain(THETA_T, THETA_W, effects)


def _numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


# --- Effects reconstruction --- #


def test_zero_free_coordinates_give_zero_effects():
    field = reconstruct_effects(np.zeros(6), 4)
    np.testing.assert_array_equal(field.values, np.zeros(8))


def test_last_effect_restores_zero_sum():
    field = reconstruct_effects(np.array([1.0, -1.0, 0.5, 0.25]), 3)

    assert field.mode(1)[2] == 0.0
    assert field.mode(2)[2] == pytest.approx(-0.75)


def test_reconstructed_effects_sum_to_zero():
    rng = np.random.default_rng(0)
    for n in (2, 5, 16):
        field = reconstruct_effects(rng.normal(size=2 * (n - 1)), n)
        assert abs(field.matrix.sum(axis=0)).max() < 1e-12


def test_spatial_field_matrix_is_mode_major():
    W = np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]])

    field = SpatialField.from_matrix(W)

    np.testing.assert_array_equal(field.values, [1, 2, 3, 10, 20, 30])
    np.testing.assert_array_equal(field.matrix, W)


# --- Priors --- #


def test_default_range_prior_mass_below_half():
    prior = PriorConfig()
    assert stats.invgamma.cdf(0.5, prior.a, scale=prior.b) == pytest.approx(0.947, abs=5e-4)


def test_log_prior_outside_support():
    prior = PriorConfig()
    assert log_prior(THETA_T.with_(lam=1.5), THETA_W, prior) == -np.inf
    assert log_prior(THETA_T.with_(xi1=0.0), THETA_W, prior) == -np.inf
    assert log_prior(THETA_T, ThetaW(0.1, 0.1, 0.99, 0.3, 1.0), prior) == -np.inf
    assert log_prior(THETA_T, ThetaW(0.1, 0.1, 0.0, 0.3, 2.5), prior) == -np.inf
    assert np.isfinite(log_prior(THETA_T, THETA_W, prior))


def test_log_prior_without_effects_ignores_spatial_block():
    prior = PriorConfig()
    value = log_prior(THETA_T, None, prior, CorrelationKind.NONE, mixture=True)
    assert value == pytest.approx(-np.log(0.19) - np.log(0.14) - np.log(0.6))


def test_spatial_prior_target_density():
    target = SpatialPriorTarget(PriorConfig(), CorrelationKind.PEXP)
    x = np.array([np.log(0.4), 0.3])

    lp, g = target.log_density_and_grad(x)
    numeric = _numeric_grad(target.log_density, x)

    assert target.dim == 2
    assert np.isfinite(lp)
    np.testing.assert_allclose(g, numeric, rtol=1e-6, atol=1e-8)


def test_spatial_prior_target_requires_spatial_family():
    with pytest.raises(ValueError):
        SpatialPriorTarget(PriorConfig(), CorrelationKind.INDEP)


# --- Likelihood --- #


def test_intercept_shift_is_absorbed_by_effects(small_data):
    """mu + c with effects - c leaves the likelihood unchanged."""
    # 1. Arrange
    rng = np.random.default_rng(1)
    W = 0.1 * rng.normal(size=(small_data.n_locations, 2))
    field = SpatialField.from_matrix(W)
    shifted = SpatialField.from_matrix(W - np.array([0.3, -0.2]))

    # 2. Act
    base = log_likelihood(THETA_T, field, small_data, Family.WEIBULL)
    moved = log_likelihood(THETA_T.with_(mu1=THETA_T.mu1 + 0.3, mu2=THETA_T.mu2 - 0.2), shifted, small_data, Family.WEIBULL)

    # 3. Assert
    assert moved == pytest.approx(base, rel=1e-12)


def test_likelihood_at_truth_is_finite(small_data):
    value = log_likelihood(THETA_T, SpatialField.zeros(small_data.n_locations), small_data, Family.LOGNORMAL)
    assert np.isfinite(value)


def test_pointwise_log_lik_sums_to_likelihood(small_data):
    model = PosteriorModel(small_data, MODELS[0])
    x = _start(model, np.random.default_rng(2))
    unpacked = model.unpack(x)

    pointwise = model.pointwise_log_lik(model.constrain(x))

    assert pointwise.shape == (small_data.n_units,)
    assert pointwise.sum() == pytest.approx(
        log_likelihood(unpacked.theta_t, unpacked.effects, small_data, model.family), rel=1e-10
    )


def test_empty_dataset_has_zero_likelihood():
    data = build_dataset([], [], [], [], [], [], [], [], grid=GridSpec(n_rows=2, n_cols=2))
    assert log_likelihood(THETA_T, SpatialField.zeros(0), data, Family.WEIBULL) == 0.0


def test_all_censored_data_has_finite_density():
    rng = np.random.default_rng(3)
    n = 30
    data = build_dataset(
        unit_id=range(n), row=rng.integers(0, 2, n), col=rng.integers(0, 2, n),
        cage=np.zeros(n), slot=np.zeros(n), node=np.zeros(n),
        time=rng.uniform(1, 3, n), event=np.zeros(n),
        grid=GridSpec(n_rows=2, n_cols=2), design_matrix=np.zeros((n, 1)),
    )
    model = PosteriorModel(data, MODELS[0])
    x = model.unconstrain(THETA_T.with_(beta1=[0.0], beta2=[0.0]), THETA_W)

    assert np.isfinite(model.log_density(x))


# --- Transforms --- #


@pytest.mark.parametrize("config", MODELS, ids=lambda m: f"{m.family.value}-{m.correlation.value}-{m.mixture}")
def test_unconstrain_then_unpack(small_data, config):
    model = PosteriorModel(small_data, config)
    W = 0.1 * np.random.default_rng(4).normal(size=(model.layout.n, 2)) if model.layout.n else None

    unpacked = model.unpack(model.unconstrain(THETA_T, THETA_W, W))

    assert unpacked.theta_t.xi1 == pytest.approx(THETA_T.xi1)
    np.testing.assert_allclose(unpacked.theta_t.beta1, THETA_T.beta1)
    if config.mixture:
        assert unpacked.theta_t.lam == pytest.approx(THETA_T.lam)
    if W is not None:
        centred = W - W.mean(axis=0)
        np.testing.assert_allclose(unpacked.effects.matrix, centred, atol=1e-12)
        assert unpacked.theta_t.mu1 == pytest.approx(THETA_T.mu1 + W[:, 0].mean())
        assert unpacked.theta_w.sigma2 == pytest.approx(THETA_W.sigma2)
    if config.correlation is CorrelationKind.PEXP:
        assert unpacked.theta_w.kappa == pytest.approx(THETA_W.kappa)
        assert unpacked.theta_w.rho12 == pytest.approx(THETA_W.rho12)


@pytest.mark.parametrize("config", MODELS, ids=lambda m: f"{m.family.value}-{m.correlation.value}-{m.mixture}")
def test_constrained_row_matches_names(small_data, config):
    model = PosteriorModel(small_data, config)
    x = _start(model, np.random.default_rng(5))

    values = model.constrain(x)
    rebuilt = model.from_constrained(values)

    assert values.shape == (len(model.names),)
    expected = model.unpack(x)
    assert rebuilt.theta_t.xi1 == pytest.approx(expected.theta_t.xi1)
    assert rebuilt.theta_t.lam == pytest.approx(expected.theta_t.lam)
    np.testing.assert_allclose(rebuilt.theta_t.beta2, expected.theta_t.beta2)
    np.testing.assert_allclose(rebuilt.effects.values, expected.effects.values)


def test_layout_names(small_data):
    model = PosteriorModel(small_data, MODELS[0])
    names = model.layout.scalar_names

    assert names[:4] == ["beta1[x1]", "beta1[x2]", "beta2[x1]", "beta2[x2]"]
    assert names[-3:] == ["rho12", "nu", "kappa"]
    assert len(model.layout.effect_names) == 2 * small_data.n_locations
    assert model.dim == 4 + 2 + 2 + 3 + 5 + 2 * (small_data.n_locations - 1)


def test_single_component_mode_two_uses_xi2_name(small_data):
    model = PosteriorModel(small_data, MODELS[2])
    assert "xi2" in model.names
    assert "lambda" not in model.names


# --- Gradient --- #


@pytest.mark.parametrize("config", MODELS, ids=lambda m: f"{m.family.value}-{m.correlation.value}-{m.mixture}")
def test_gradient_matches_finite_differences(small_data, config):
    """Analytic gradient against central differences at 20 random states."""
    model = PosteriorModel(small_data, config)
    rng = np.random.default_rng(6)
    base = _start(model, rng)

    for _ in range(20):
        # 1. Arrange
        x = base + 0.05 * rng.normal(size=model.dim)

        # 2. Act
        lp, g = model.log_density_and_grad(x)
        numeric = _numeric_grad(model.log_density, x)

        # 3. Assert
        assert np.isfinite(lp)
        scale = max(1.0, float(np.abs(numeric).max()))
        np.testing.assert_allclose(g, numeric, rtol=1e-5, atol=1e-5 * scale)


def test_functional_api_agrees_with_model(small_data):
    config = MODELS[0]
    model = PosteriorModel(small_data, config)
    x = _start(model, np.random.default_rng(7))

    assert log_posterior(x, small_data, config) == pytest.approx(model.log_density(x))
    np.testing.assert_allclose(grad_log_posterior(x, small_data, config), model.log_density_and_grad(x)[1])


def test_functional_api_uses_the_dataset_it_is_given():
    """Short-lived datasets created one after another never share a cached model."""
    config = ModelConfig(family=Family.WEIBULL, correlation=CorrelationKind.NONE, mixture=False)
    for k in range(30):
        time = np.full(4, 1.0 + k)
        data = build_dataset(
            unit_id=range(4),
            row=np.zeros(4), col=np.arange(4),
            cage=np.zeros(4), slot=np.zeros(4), node=np.zeros(4),
            time=time,
            event=[1, 2, 0, 1],
            grid=GridSpec(n_rows=1, n_cols=4),
            design_matrix=np.zeros((4, 1)),
        )
        model = model_for(data, config)
        assert model.data is data
        np.testing.assert_array_equal(model.data.time, time)
        del data, model


# --- Non-finite handling --- #


def test_infinite_mixture_logit_is_rejected(small_data):
    model = PosteriorModel(small_data, MODELS[0])
    x = _start(model, np.random.default_rng(8))
    x[model.layout.slices["lambda"]] = np.inf

    lp, g = model.log_density_and_grad(x)

    assert lp == -np.inf
    assert not g.any()
    assert model.first_nonfinite_term(x) == "state"


def test_non_positive_definite_omega_is_counted(small_data):
    model = PosteriorModel(small_data, MODELS[0])
    x = _start(model, np.random.default_rng(9))

    with patch("posterior.cholesky_jittered", side_effect=NonPositiveDefiniteError(-0.2)):
        lp = model.log_density(x)
        term = model.first_nonfinite_term(x)

    assert lp == -np.inf
    assert model.non_pd_count == 1
    assert term.startswith("effects_prior")


def test_first_nonfinite_term_is_none_at_valid_state(small_data):
    model = PosteriorModel(small_data, MODELS[1])
    assert model.first_nonfinite_term(_start(model, np.random.default_rng(10))) is None
