"""Cylinder distances, power-exponential correlation and the Kronecker covariance.

Effects are stacked mode-major, ``w = (w_1', w_2')'``, so the stacked covariance
is ``Sigma_f (x) Omega``. The MCEM code works location-major and converts with
``interleave_permutation``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog
from scipy import linalg

from data_model import TITAN_GRID
from errors import DataValidationError, NonPositiveDefiniteError
from schemas import CorrelationKind, GridSpec

logger = structlog.get_logger(__name__)

JITTER = 1e-10
RHO_BOUND = 0.95


# --- Distance --- #


def _check_coords(rows: np.ndarray, cols: np.ndarray, grid: GridSpec) -> None:
    if np.any((rows < 0) | (rows >= grid.n_rows) | (cols < 0) | (cols >= grid.n_cols)):
        raise DataValidationError(
            f"coordinate outside {grid.n_rows}x{grid.n_cols} grid"
        )


def distance(a: Tuple[int, int], b: Tuple[int, int], grid: GridSpec = TITAN_GRID) -> float:
    """Normalised cylinder distance; the last column is adjacent to column 0."""
    rows = np.array([a[0], b[0]])
    cols = np.array([a[1], b[1]])
    _check_coords(rows, cols, grid)
    dc = abs(int(cols[0]) - int(cols[1]))
    dc = min(dc, grid.n_cols - dc)
    dr = (int(rows[0]) - int(rows[1])) / grid.row_scale
    return float(np.hypot(dr, dc / grid.col_scale))


def distance_matrix(locations: np.ndarray, grid: GridSpec = TITAN_GRID) -> np.ndarray:
    locations = np.asarray(locations, dtype=np.int64).reshape(-1, 2)
    rows, cols = locations[:, 0], locations[:, 1]
    _check_coords(rows, cols, grid)
    dr = (rows[:, None] - rows[None, :]) / grid.row_scale
    dc = np.abs(cols[:, None] - cols[None, :])
    dc = np.minimum(dc, grid.n_cols - dc) / grid.col_scale
    return np.hypot(dr, dc)


# --- Correlation families --- #


@dataclass(frozen=True)
class CorrelationFamily:
    kind: CorrelationKind
    nu: float
    kappa: float = 1.0

    def __post_init__(self) -> None:
        kind = CorrelationKind(self.kind)
        if not kind.spatial:
            raise ValueError(f"{kind.value} is not a spatial correlation family")
        object.__setattr__(self, "kind", kind)
        if kind is CorrelationKind.EXP:
            object.__setattr__(self, "kappa", 1.0)
        elif kind is CorrelationKind.GAU:
            object.__setattr__(self, "kappa", 2.0)
        if not self.nu > 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if not 0 < self.kappa <= 2:
            raise ValueError(f"kappa must lie in (0, 2], got {self.kappa}")


def correlation(family: CorrelationFamily, d):
    """exp(-(d/nu)^kappa), elementwise for array input."""
    d = np.asarray(d, dtype=float)
    out = np.exp(-np.power(d / family.nu, family.kappa))
    return float(out) if out.ndim == 0 else out


def correlation_matrix(distances: np.ndarray, family: Optional[CorrelationFamily]) -> np.ndarray:
    """Omega for a family; ``None`` gives the identity (independent effects)."""
    if family is None:
        return np.eye(distances.shape[0])
    return np.exp(-np.power(distances / family.nu, family.kappa))


def correlation_derivatives(
    distances: np.ndarray, nu: float, kappa: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Omega together with dOmega/dnu and dOmega/dkappa."""
    scaled = distances / nu
    s = np.power(scaled, kappa)
    omega = np.exp(-s)
    d_nu = omega * kappa * s / nu
    with np.errstate(divide="ignore", invalid="ignore"):
        log_scaled = np.where(scaled > 0, np.log(np.where(scaled > 0, scaled, 1.0)), 0.0)
    d_kappa = -omega * s * log_scaled
    return omega, d_nu, d_kappa


def sigma_f(sigma1: float, sigma2: float, rho12: float) -> np.ndarray:
    off = rho12 * sigma1 * sigma2
    return np.array([[sigma1**2, off], [off, sigma2**2]])


# --- Factorisation --- #


def cholesky_jittered(matrix: np.ndarray, what: str = "correlation matrix") -> np.ndarray:
    """Lower Cholesky factor; retries once with 1e-10 on the diagonal."""
    try:
        return linalg.cholesky(matrix, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    try:
        return linalg.cholesky(matrix + JITTER * np.eye(matrix.shape[0]), lower=True, check_finite=False)
    except linalg.LinAlgError:
        min_eig = float(linalg.eigvalsh(matrix)[0]) if np.all(np.isfinite(matrix)) else float("nan")
        raise NonPositiveDefiniteError(min_eig, what=what) from None


def _logdet_from_chol(chol: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def kron_logdet(chol_f: np.ndarray, chol_omega: np.ndarray) -> float:
    n = chol_omega.shape[0]
    return n * _logdet_from_chol(chol_f) + 2.0 * _logdet_from_chol(chol_omega)


def kron_solve(chol_f: np.ndarray, chol_omega: np.ndarray, v: np.ndarray) -> np.ndarray:
    """(Sigma_f (x) Omega)^{-1} v for a mode-major vector, without forming the product."""
    n = chol_omega.shape[0]
    W = np.asarray(v, dtype=float).reshape(2, n).T
    X = linalg.cho_solve((chol_omega, True), W, check_finite=False)
    X = linalg.cho_solve((chol_f, True), X.T, check_finite=False)
    return X.reshape(-1)


def kron_quad_form(chol_f: np.ndarray, chol_omega: np.ndarray, v: np.ndarray) -> float:
    return float(np.dot(v, kron_solve(chol_f, chol_omega, v)))


def interleave_permutation(n: int) -> np.ndarray:
    """Index map with ``u_location_major = v_mode_major[perm]``."""
    perm = np.empty(2 * n, dtype=np.int64)
    perm[0::2] = np.arange(n)
    perm[1::2] = n + np.arange(n)
    return perm


# --- Assembled structure --- #


@dataclass(frozen=True)
class SpatialStructure:
    locations: np.ndarray
    distance_matrix: np.ndarray
    omega: np.ndarray
    sigma_f: np.ndarray
    chol_f: np.ndarray
    chol_omega: np.ndarray

    @property
    def n(self) -> int:
        return int(self.omega.shape[0])

    @cached_property
    def sigma_w(self) -> np.ndarray:
        """Dense Sigma_f (x) Omega; for reporting and tests only."""
        return np.kron(self.sigma_f, self.omega)

    def logdet(self) -> float:
        return kron_logdet(self.chol_f, self.chol_omega)

    def solve(self, v: np.ndarray) -> np.ndarray:
        return kron_solve(self.chol_f, self.chol_omega, v)

    def quad_form(self, v: np.ndarray) -> float:
        return kron_quad_form(self.chol_f, self.chol_omega, v)

    def mvn_logpdf(self, w: np.ndarray) -> float:
        w = np.asarray(w, dtype=float).reshape(-1)
        return -0.5 * (w.size * np.log(2 * np.pi) + self.logdet() + self.quad_form(w))


def build_sigma_w(
    locations: np.ndarray,
    family: Optional[CorrelationFamily],
    sigma1: float,
    sigma2: float,
    rho12: float,
    grid: GridSpec = TITAN_GRID,
    distances: Optional[np.ndarray] = None,
) -> SpatialStructure:
    """Assemble Omega, Sigma_f and their Cholesky factors.

    Raises
    ------
    ValueError                 • nonpositive sigma or |rho12| > 0.95
    NonPositiveDefiniteError   • Omega not factorisable after jitter
    """
    if not (sigma1 > 0 and sigma2 > 0):
        raise ValueError("sigma1 and sigma2 must be positive")
    if abs(rho12) > RHO_BOUND:
        raise ValueError(f"|rho12| must not exceed {RHO_BOUND}")
    locations = np.asarray(locations, dtype=np.int64).reshape(-1, 2)
    if distances is None:
        distances = distance_matrix(locations, grid)
    omega = correlation_matrix(distances, family)
    sf = sigma_f(sigma1, sigma2, rho12)
    return SpatialStructure(
        locations=locations,
        distance_matrix=distances,
        omega=omega,
        sigma_f=sf,
        chol_f=cholesky_jittered(sf, what="cross-mode covariance"),
        chol_omega=cholesky_jittered(omega),
    )


def min_eigenvalue(distances: np.ndarray, nu: float, kappa: float) -> float:
    omega = np.exp(-np.power(distances / nu, kappa))
    return float(linalg.eigvalsh(omega, subset_by_index=[0, 0])[0])


def min_eigenvalue_map(
    nu_grid: Sequence[float],
    kappa_grid: Sequence[float],
    locations: np.ndarray,
    grid: GridSpec = TITAN_GRID,
) -> pd.DataFrame:
    """Smallest eigenvalue of Omega over a (nu, kappa) grid, one row per pair."""
    nu_grid = np.asarray(nu_grid, dtype=float)
    kappa_grid = np.asarray(kappa_grid, dtype=float)
    if nu_grid.size == 0 or kappa_grid.size == 0:
        raise ValueError("nu_grid and kappa_grid must be nonempty")
    distances = distance_matrix(locations, grid)
    rows = [
        (nu, kappa, min_eigenvalue(distances, nu, kappa))
        for nu in nu_grid
        for kappa in kappa_grid
    ]
    frame = pd.DataFrame(rows, columns=["nu", "kappa", "min_eig"])
    logger.info(
        "Computed eigenvalue map",
        points=len(frame),
        non_pd=int((frame["min_eig"] <= 0).sum()),
        locations=int(distances.shape[0]),
    )
    return frame
