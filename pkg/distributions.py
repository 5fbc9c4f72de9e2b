"""Log-location-scale densities, the mode-2 mixture and the regression location.

Everything is evaluated on the log scale. For the smallest-extreme-value (Weibull)
family the survival is ``-exp(z)`` and for the normal (lognormal) family it is
``log_ndtr(-z)``, both accurate deep in the tails where censored units live.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple, Union

import numpy as np
from scipy import special

from errors import DomainError
from schemas import Family

ArrayLike = Union[float, np.ndarray]

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class ThetaT:
    """Event-time parameters. ``lam == 1`` turns mode 2 into a single distribution."""

    mu1: float
    mu2: float
    beta1: np.ndarray
    beta2: np.ndarray
    xi1: float
    xi21: float
    xi22: float = 1.0
    lam: float = 1.0
    eta: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta1", np.asarray(self.beta1, dtype=float))
        object.__setattr__(self, "beta2", np.asarray(self.beta2, dtype=float))

    def in_support(self) -> bool:
        return min(self.xi1, self.xi21, self.xi22) > 0 and 0.0 <= self.lam <= 1.0 and self.eta > 0

    def with_(self, **changes) -> "ThetaT":
        return replace(self, **changes)


# --- Standardised families --- #


def std_log_pdf(z: ArrayLike, family: Family) -> ArrayLike:
    if family is Family.WEIBULL:
        with np.errstate(over="ignore"):
            return z - np.exp(z)
    return -0.5 * np.square(z) - _HALF_LOG_2PI


def std_log_sf(z: ArrayLike, family: Family) -> ArrayLike:
    if family is Family.WEIBULL:
        with np.errstate(over="ignore"):
            return -np.exp(z)
    return special.log_ndtr(-np.asarray(z, dtype=float))


def std_dlog_pdf(z: ArrayLike, family: Family) -> ArrayLike:
    if family is Family.WEIBULL:
        with np.errstate(over="ignore"):
            return 1.0 - np.exp(z)
    return -np.asarray(z, dtype=float)


def std_dlog_sf(z: ArrayLike, family: Family) -> ArrayLike:
    if family is Family.WEIBULL:
        with np.errstate(over="ignore"):
            return -np.exp(z)
    z = np.asarray(z, dtype=float)
    return -np.exp(-0.5 * np.square(z) - _HALF_LOG_2PI - special.log_ndtr(-z))


def _check_domain(t: ArrayLike, *scales: ArrayLike) -> None:
    if np.any(np.asarray(t) <= 0):
        raise DomainError("time must be positive")
    for s in scales:
        if np.any(np.asarray(s) <= 0):
            raise DomainError("scale must be positive")


def _scalar(x: np.ndarray) -> ArrayLike:
    return float(x) if np.ndim(x) == 0 else x


# --- Mode 1 --- #


def log_pdf_mode1(t: ArrayLike, mu_ij1: ArrayLike, xi1: ArrayLike, family: Family) -> ArrayLike:
    family = Family(family)
    _check_domain(t, xi1)
    y = np.log(t)
    z = (y - mu_ij1) / xi1
    return _scalar(std_log_pdf(z, family) - np.log(xi1) - y)


def log_survival_mode1(t: ArrayLike, mu_ij1: ArrayLike, xi1: ArrayLike, family: Family) -> ArrayLike:
    family = Family(family)
    _check_domain(t, xi1)
    z = (np.log(t) - mu_ij1) / xi1
    return _scalar(std_log_sf(z, family))


# --- Mode 2 mixture --- #


def _log_weights(lam: ArrayLike) -> Tuple[ArrayLike, ArrayLike]:
    with np.errstate(divide="ignore"):
        return np.log(lam), np.log1p(-np.asarray(lam, dtype=float))


def log_pdf_mode2(
    t: ArrayLike,
    mu_ij21: ArrayLike,
    mu_ij22: ArrayLike,
    xi21: ArrayLike,
    xi22: ArrayLike,
    lam: ArrayLike,
    family: Family,
) -> ArrayLike:
    """log(lam * f_21 + (1 - lam) * f_22) by log-sum-exp."""
    log_lam, log1m_lam = _log_weights(lam)
    a = log_pdf_mode1(t, mu_ij21, xi21, family)
    b = log_pdf_mode1(t, mu_ij22, xi22, family)
    return _scalar(np.logaddexp(log_lam + a, log1m_lam + b))


def log_survival_mode2(
    t: ArrayLike,
    mu_ij21: ArrayLike,
    mu_ij22: ArrayLike,
    xi21: ArrayLike,
    xi22: ArrayLike,
    lam: ArrayLike,
    family: Family,
) -> ArrayLike:
    log_lam, log1m_lam = _log_weights(lam)
    a = log_survival_mode1(t, mu_ij21, xi21, family)
    b = log_survival_mode1(t, mu_ij22, xi22, family)
    return _scalar(np.logaddexp(log_lam + a, log1m_lam + b))


def cdf_mode1(t: ArrayLike, mu_ij1: ArrayLike, xi1: ArrayLike, family: Family) -> ArrayLike:
    return _scalar(-np.expm1(log_survival_mode1(t, mu_ij1, xi1, family)))


def cdf_mode2(t, mu_ij21, mu_ij22, xi21, xi22, lam, family) -> ArrayLike:
    return _scalar(-np.expm1(log_survival_mode2(t, mu_ij21, mu_ij22, xi21, xi22, lam, family)))


# --- Location structure --- #


def location_params(
    theta: ThetaT, x: np.ndarray, w_ik: ArrayLike, mode: int
) -> Tuple[ArrayLike, Optional[ArrayLike]]:
    """(mu_ij1, None) for mode 1, (mu_ij21, mu_ij22) for mode 2; rows of ``x`` are units."""
    x = np.asarray(x, dtype=float)
    if mode == 1:
        return _scalar(theta.mu1 + x @ theta.beta1 + w_ik), None
    if mode == 2:
        mu_a = theta.mu2 + x @ theta.beta2 + w_ik
        return _scalar(mu_a), _scalar(mu_a + theta.eta)
    raise ValueError(f"mode must be 1 or 2, got {mode}")


# --- Vectorised likelihood terms with derivatives --- #


def _component_terms(y, mu, xi, delta, family: Family):
    """Per-unit delta*log f + (1-delta)*log S and its derivatives in mu and log xi."""
    z = (y - mu) / xi
    failed = delta > 0
    value = np.where(failed, std_log_pdf(z, family) - np.log(xi) - y, std_log_sf(z, family))
    dz = np.where(failed, std_dlog_pdf(z, family), std_dlog_sf(z, family))
    return value, -dz / xi, -z * dz - delta


def mode1_terms(y, mu, xi1, delta1, family: Family):
    """Mode-1 contributions and derivatives (d/dmu, d/dlog xi1); ``y`` is log time."""
    return _component_terms(y, mu, xi1, delta1, family)


@dataclass
class Mode2Terms:
    value: np.ndarray
    d_mu: np.ndarray
    d_log_xi21: np.ndarray
    d_log_xi22: np.ndarray
    d_log_eta: np.ndarray
    d_logit_lam: np.ndarray


def mode2_terms(y, mu_a, xi21, xi22, eta, lam, delta2, family: Family) -> Mode2Terms:
    """Mode-2 mixture contributions; ``mu_a`` is the first-component location."""
    log_lam, log1m_lam = _log_weights(lam)
    va, dmu_a, dlx_a = _component_terms(y, mu_a, xi21, delta2, family)
    if lam >= 1.0:
        zero = np.zeros_like(va)
        return Mode2Terms(va, dmu_a, dlx_a, zero, zero, zero)
    vb, dmu_b, dlx_b = _component_terms(y, mu_a + eta, xi22, delta2, family)
    la = log_lam + va
    lb = log1m_lam + vb
    value = np.logaddexp(la, lb)
    with np.errstate(invalid="ignore"):
        ra = np.exp(la - value)
    ra = np.where(np.isfinite(ra), ra, 0.5)
    rb = 1.0 - ra
    return Mode2Terms(
        value=value,
        d_mu=ra * dmu_a + rb * dmu_b,
        d_log_xi21=ra * dlx_a,
        d_log_xi22=rb * dlx_b,
        d_log_eta=rb * dmu_b * eta,
        d_logit_lam=ra - lam,
    )


# --- Sampling --- #


def sample_standard(family: Family, size, rng: np.random.Generator) -> np.ndarray:
    """Draws of the standardised log-time error."""
    if Family(family) is Family.WEIBULL:
        return np.log(rng.standard_exponential(size))
    return rng.standard_normal(size)


def sample_mode1(mu, xi, family: Family, rng: np.random.Generator) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    return np.exp(mu + xi * sample_standard(family, mu.shape, rng))


def sample_mode2(mu_a, xi21, xi22, eta, lam, family: Family, rng: np.random.Generator) -> np.ndarray:
    mu_a = np.asarray(mu_a, dtype=float)
    first = rng.uniform(size=mu_a.shape) < lam
    z = sample_standard(family, mu_a.shape, rng)
    log_t = np.where(first, mu_a + xi21 * z, mu_a + eta + xi22 * z)
    return np.exp(log_t)
