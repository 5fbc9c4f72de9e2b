import numpy as np
import pytest

from data_model import TITAN_GRID
from errors import DataValidationError, NonPositiveDefiniteError
from schemas import CorrelationKind, GridSpec
from spatial import (
    CorrelationFamily,
    build_sigma_w,
    cholesky_jittered,
    correlation,
    correlation_derivatives,
    correlation_matrix,
    distance,
    distance_matrix,
    interleave_permutation,
    kron_logdet,
    kron_quad_form,
    min_eigenvalue,
    min_eigenvalue_map,
    sigma_f,
)


# --- Distance --- #


def test_distance_wraps_last_column_to_first():
    """Columns 0 and 24 are neighbours on the cylinder."""
    # 1. Arrange
    a, b = (0, 0), (0, 24)

    # 2. Act
    d = distance(a, b, TITAN_GRID)

    # 3. Assert
    assert d == pytest.approx(1 / 12)


def test_distance_opposite_corner():
    assert distance((0, 0), (7, 12), TITAN_GRID) == pytest.approx(np.sqrt(2))


def test_distance_is_symmetric_and_zero_on_diagonal():
    rng = np.random.default_rng(0)
    locations = np.column_stack([rng.integers(0, 8, 40), rng.integers(0, 25, 40)])

    D = distance_matrix(locations, TITAN_GRID)

    np.testing.assert_allclose(D, D.T)
    np.testing.assert_allclose(np.diag(D), 0.0)
    assert D[3, 7] == pytest.approx(distance(tuple(locations[3]), tuple(locations[7]), TITAN_GRID))


def test_distance_rejects_coordinate_outside_grid():
    with pytest.raises(DataValidationError):
        distance((8, 0), (0, 0), TITAN_GRID)


def test_small_grid_scales():
    grid = GridSpec(n_rows=4, n_cols=4)
    # row span 3, half-circumference 2
    assert distance((0, 0), (3, 0), grid) == pytest.approx(1.0)
    assert distance((0, 0), (0, 2), grid) == pytest.approx(1.0)
    assert distance((0, 0), (0, 3), grid) == pytest.approx(0.5)


# --- Correlation families --- #


def test_exponential_correlation_at_range():
    family = CorrelationFamily(CorrelationKind.EXP, nu=0.3)
    assert correlation(family, 0.3) == pytest.approx(np.exp(-1))


def test_powered_exponential_far_apart_is_small():
    family = CorrelationFamily(CorrelationKind.PEXP, nu=0.40, kappa=1.46)
    assert correlation(family, np.sqrt(2)) == pytest.approx(0.002, abs=5e-4)


def test_correlation_is_one_at_zero_distance():
    for kind, kappa in ((CorrelationKind.EXP, 1.0), (CorrelationKind.GAU, 2.0), (CorrelationKind.PEXP, 0.7)):
        assert correlation(CorrelationFamily(kind, nu=0.5, kappa=kappa), 0.0) == pytest.approx(1.0)


def test_fixed_kappa_families_ignore_supplied_kappa():
    assert CorrelationFamily(CorrelationKind.EXP, nu=1.0, kappa=0.3).kappa == 1.0
    assert CorrelationFamily(CorrelationKind.GAU, nu=1.0, kappa=0.3).kappa == 2.0


@pytest.mark.parametrize(
    "kind,nu,kappa",
    [
        (CorrelationKind.PEXP, 0.0, 1.0),
        (CorrelationKind.PEXP, -1.0, 1.0),
        (CorrelationKind.PEXP, 1.0, 0.0),
        (CorrelationKind.PEXP, 1.0, 2.5),
        (CorrelationKind.NONE, 1.0, 1.0),
    ],
)
def test_correlation_family_rejects_invalid_parameters(kind, nu, kappa):
    with pytest.raises(ValueError):
        CorrelationFamily(kind, nu=nu, kappa=kappa)


def test_correlation_matrix_without_family_is_identity():
    D = distance_matrix(np.array([[0, 0], [1, 1], [2, 2]]), TITAN_GRID)
    np.testing.assert_array_equal(correlation_matrix(D, None), np.eye(3))


def test_correlation_derivatives_match_finite_differences():
    rng = np.random.default_rng(1)
    locations = np.column_stack([rng.integers(0, 8, 6), rng.integers(0, 25, 6)])
    D = distance_matrix(locations, TITAN_GRID)
    nu, kappa, h = 0.4, 1.3, 1e-6

    omega, d_nu, d_kappa = correlation_derivatives(D, nu, kappa)

    def om(n, k):
        return np.exp(-np.power(D / n, k))

    np.testing.assert_allclose(omega, om(nu, kappa))
    np.testing.assert_allclose(d_nu, (om(nu + h, kappa) - om(nu - h, kappa)) / (2 * h), atol=1e-7)
    np.testing.assert_allclose(d_kappa, (om(nu, kappa + h) - om(nu, kappa - h)) / (2 * h), atol=1e-7)


# --- Kronecker covariance --- #


def test_kronecker_identities_match_dense_algebra():
    """Log determinant and quadratic form agree with the dense product on random configurations."""
    rng = np.random.default_rng(2)
    for _ in range(30):
        # 1. Arrange
        n = int(rng.integers(2, 12))
        locations = np.unique(
            np.column_stack([rng.integers(0, 8, n), rng.integers(0, 25, n)]), axis=0
        )
        family = CorrelationFamily(
            CorrelationKind.PEXP, nu=float(rng.uniform(0.05, 0.4)), kappa=float(rng.uniform(0.3, 1.5))
        )
        structure = build_sigma_w(
            locations, family, sigma1=rng.uniform(0.1, 2), sigma2=rng.uniform(0.1, 2),
            rho12=rng.uniform(-0.9, 0.9),
        )
        w = rng.normal(size=2 * structure.n)
        dense = np.kron(structure.sigma_f, structure.omega)

        # 2. Act
        logdet = structure.logdet()
        quad = structure.quad_form(w)

        # 3. Assert
        sign, dense_logdet = np.linalg.slogdet(dense)
        assert sign > 0
        assert logdet == pytest.approx(dense_logdet, rel=1e-8, abs=1e-8)
        assert quad == pytest.approx(float(w @ np.linalg.solve(dense, w)), rel=1e-8)


def test_location_major_ordering_gives_same_quadratic_form():
    rng = np.random.default_rng(3)
    locations = np.array([[0, 0], [0, 1], [2, 3], [5, 10]])
    family = CorrelationFamily(CorrelationKind.EXP, nu=0.5)
    structure = build_sigma_w(locations, family, 0.5, 0.8, 0.3)
    v = rng.normal(size=8)
    perm = interleave_permutation(4)

    u = v[perm]
    location_major = np.kron(structure.omega, structure.sigma_f)

    assert float(u @ np.linalg.solve(location_major, u)) == pytest.approx(structure.quad_form(v), rel=1e-10)


def test_mvn_logpdf_matches_scipy():
    from scipy import stats

    locations = np.array([[0, 0], [1, 4], [3, 20]])
    structure = build_sigma_w(locations, CorrelationFamily(CorrelationKind.GAU, nu=0.7), 0.3, 0.4, -0.2)
    w = np.linspace(-0.5, 0.5, 6)

    expected = stats.multivariate_normal(mean=np.zeros(6), cov=structure.sigma_w).logpdf(w)

    assert structure.mvn_logpdf(w) == pytest.approx(expected, rel=1e-10)


def test_build_sigma_w_rejects_bad_cross_mode_parameters():
    locations = np.array([[0, 0], [1, 1]])
    family = CorrelationFamily(CorrelationKind.EXP, nu=0.5)
    with pytest.raises(ValueError):
        build_sigma_w(locations, family, 0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        build_sigma_w(locations, family, 1.0, 1.0, 0.96)


def test_kron_helpers_agree_with_structure_methods():
    locations = np.array([[0, 0], [4, 4]])
    structure = build_sigma_w(locations, None, 1.0, 2.0, 0.5)
    v = np.array([0.1, -0.2, 0.3, 0.4])

    assert kron_logdet(structure.chol_f, structure.chol_omega) == pytest.approx(structure.logdet())
    assert kron_quad_form(structure.chol_f, structure.chol_omega, v) == pytest.approx(structure.quad_form(v))
    np.testing.assert_allclose(structure.sigma_f, sigma_f(1.0, 2.0, 0.5))


# --- Positive definiteness --- #


def test_cholesky_jitter_recovers_semidefinite_matrix():
    """A rank-deficient but PSD matrix factorises once the jitter is added."""
    ones = np.ones((3, 3))

    chol = cholesky_jittered(ones)

    np.testing.assert_allclose(chol @ chol.T, ones, atol=1e-8)


def test_cholesky_reports_smallest_eigenvalue():
    matrix = np.array([[1.0, 2.0], [2.0, 1.0]])

    with pytest.raises(NonPositiveDefiniteError) as excinfo:
        cholesky_jittered(matrix)

    assert excinfo.value.min_eigenvalue == pytest.approx(-1.0)
    assert excinfo.value.exit_code == 4


def test_min_eigenvalue_is_positive_for_exponential_family():
    locations = np.array([[r, c] for r in range(8) for c in range(25)])
    D = distance_matrix(locations, TITAN_GRID)

    assert min_eigenvalue(D, 0.5, 1.0) > 0


def test_min_eigenvalue_map_covers_grid():
    locations = np.array([[r, c] for r in range(4) for c in range(4)])

    frame = min_eigenvalue_map([0.1, 0.5, 1.0], [0.5, 1.0, 2.0], locations, GridSpec(n_rows=4, n_cols=4))

    assert list(frame.columns) == ["nu", "kappa", "min_eig"]
    assert len(frame) == 9
    assert (frame["min_eig"] <= 1.0 + 1e-12).all()


def test_min_eigenvalue_map_rejects_empty_grid():
    with pytest.raises(ValueError):
        min_eigenvalue_map([], [1.0], np.array([[0, 0]]))


def test_full_cabinet_grid_is_positive_definite_at_typical_estimates():
    """sigma=(0.13, 0.11), rho=0.92, nu=0.40, kappa=1.46 on all 200 locations."""
    locations = np.array([[r, c] for r in range(8) for c in range(25)])
    family = CorrelationFamily(CorrelationKind.PEXP, nu=0.40, kappa=1.46)

    structure = build_sigma_w(locations, family, 0.13, 0.11, 0.92)

    assert structure.n == 200
    np.testing.assert_allclose(np.diag(structure.omega), 1.0)


def test_gaussian_kernel_with_long_range_is_near_singular():
    locations = np.array([[r, c] for r in range(8) for c in range(25)])
    frame = min_eigenvalue_map([3.0], [2.0], locations)

    assert frame["min_eig"].iloc[0] < 1e-6


def test_single_location_has_unit_eigenvalue():
    frame = min_eigenvalue_map([0.1, 2.0], [0.5, 2.0], np.array([[3, 3]]))
    np.testing.assert_allclose(frame["min_eig"], 1.0)


def test_fixed_kappa_families_equal_powered_exponential():
    locations = np.array([[r, c] for r in range(3) for c in range(0, 25, 5)])
    D = distance_matrix(locations, TITAN_GRID)

    for kind, kappa in ((CorrelationKind.GAU, 2.0), (CorrelationKind.EXP, 1.0)):
        fixed = correlation_matrix(D, CorrelationFamily(kind, nu=0.6))
        powered = correlation_matrix(D, CorrelationFamily(CorrelationKind.PEXP, nu=0.6, kappa=kappa))
        np.testing.assert_array_equal(fixed, powered)


def test_correlation_decreases_with_distance():
    grid = np.linspace(0, np.sqrt(2), 50)
    for family in (
        CorrelationFamily(CorrelationKind.PEXP, nu=0.3, kappa=0.5),
        CorrelationFamily(CorrelationKind.EXP, nu=0.3),
        CorrelationFamily(CorrelationKind.GAU, nu=0.3),
    ):
        assert np.all(np.diff(correlation(family, grid)) <= 0)
