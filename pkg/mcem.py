"""Monte Carlo EM for the spatial competing-risks model.

The E-step draws location effects with a Metropolis-within-Gibbs sampler and
the M-step maximises the Monte Carlo Q function in two blocks: event-time
parameters given the effects, and the effects' Gaussian law (mean, cross-mode
covariance and spatial correlation). Effects are carried with their means
(mu1, mu2) included and stacked location-major: (u_11, u_12, u_21, u_22, ...).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog
from scipy import interpolate, linalg, optimize, special, stats

from data_model import Dataset
from distributions import ThetaT, mode1_terms, mode2_terms
from errors import McemError, NonPositiveDefiniteError
from posterior import PosteriorModel, ThetaW
from schemas import CorrelationKind, Family, McemConfig, ModelConfig
from spatial import (
    RHO_BOUND,
    CorrelationFamily,
    cholesky_jittered,
    correlation_matrix,
    distance_matrix,
    min_eigenvalue_map,
    sigma_f,
)

logger = structlog.get_logger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)
_NU_MIN = 1e-2
_KAPPA_MIN = 0.05
_SIGMA_MIN = 1e-4
_ADAPT_EVERY = 50


# --------------------------------------------------------------------------- #
# Plain AFT fit (starting values)
# --------------------------------------------------------------------------- #


@dataclass
class AftFit:
    theta_t: ThetaT
    log_lik: float
    converged: bool


def fit_aft(data: Dataset, model: ModelConfig) -> AftFit:
    """Maximum-likelihood competing-risks AFT fit without location effects."""
    plain = PosteriorModel(data, ModelConfig(family=model.family, correlation=CorrelationKind.NONE, mixture=model.mixture))
    y = data.log_time
    d1, d2 = data.delta1 > 0, data.delta2 > 0
    spread = max(float(np.std(y)), 0.1)
    mu1 = float(y[d1].mean()) if d1.any() else float(y.max()) + 1.0
    mu2 = float(y[d2].mean()) if d2.any() else float(y.max()) + 1.0
    start = ThetaT(
        mu1=mu1,
        mu2=mu2,
        beta1=np.zeros(data.p),
        beta2=np.zeros(data.p),
        xi1=spread,
        xi21=spread,
        xi22=spread,
        lam=0.5 if model.mixture else 1.0,
        eta=1.0,
    )
    x0 = plain.unconstrain(start)

    def objective(x):
        ll, g, _ = plain._likelihood_and_grad(plain.unpack(x))
        if not np.isfinite(ll):
            return 1e300, np.zeros_like(x)
        return -ll, -g

    res = optimize.minimize(objective, x0, jac=True, method="L-BFGS-B", options={"maxiter": 2000})
    theta = plain.unpack(res.x).theta_t
    logger.info("AFT fit", log_lik=-float(res.fun), converged=bool(res.success), iterations=int(res.nit))
    return AftFit(theta_t=theta, log_lik=-float(res.fun), converged=bool(res.success))


# --------------------------------------------------------------------------- #
# Positive-definiteness guard
# --------------------------------------------------------------------------- #


class EigenvalueGuard:
    """Interpolated smallest eigenvalue of Omega over (nu, kappa)."""

    def __init__(self, data: Dataset, correlation: CorrelationKind, config: McemConfig):
        self.correlation = CorrelationKind(correlation)
        self.nu_grid = np.linspace(_NU_MIN, config.nu_max, config.nu_grid_size)
        if self.correlation is CorrelationKind.PEXP:
            self.kappa_grid = np.linspace(_KAPPA_MIN, 2.0, config.kappa_grid_size)
        else:
            self.kappa_grid = np.array([2.0 if self.correlation is CorrelationKind.GAU else 1.0])
        frame = min_eigenvalue_map(self.nu_grid, self.kappa_grid, data.locations, data.grid)
        values = frame["min_eig"].to_numpy().reshape(self.nu_grid.size, self.kappa_grid.size)
        self.values = values
        if self.kappa_grid.size > 1:
            self._interp = interpolate.RegularGridInterpolator(
                (self.nu_grid, self.kappa_grid), values, bounds_error=False, fill_value=None
            )
        else:
            self._interp = None

    def __call__(self, nu: float, kappa: float) -> float:
        if self._interp is None:
            return float(np.interp(nu, self.nu_grid, self.values[:, 0]))
        return float(self._interp([[nu, kappa]])[0])


# --------------------------------------------------------------------------- #
# E-step
# --------------------------------------------------------------------------- #


@dataclass
class EStepResult:
    draws: np.ndarray  # (retained, n, 2)
    acceptance: float
    state: np.ndarray
    proposal_sd: np.ndarray


def _precision(omega: np.ndarray, sf: np.ndarray) -> np.ndarray:
    """Omega^-1 (x) Sigma_f^-1 for location-major stacking."""
    n = omega.shape[0]
    chol_o = cholesky_jittered(omega)
    chol_f = cholesky_jittered(sf, what="cross-mode covariance")
    omega_inv = linalg.cho_solve((chol_o, True), np.eye(n), check_finite=False)
    sf_inv = linalg.cho_solve((chol_f, True), np.eye(2), check_finite=False)
    return np.kron(omega_inv, sf_inv)


class _LocationLikelihood:
    """Log likelihood of the units at one location as a function of one effect."""

    def __init__(self, data: Dataset, family: Family):
        self.data = data
        self.family = Family(family)
        order = np.argsort(data.loc_index, kind="stable")
        bounds = np.searchsorted(data.loc_index[order], np.arange(data.n_locations + 1))
        self.groups = [order[bounds[i] : bounds[i + 1]] for i in range(data.n_locations)]

    def set_theta(self, theta: ThetaT) -> None:
        X = self.data.design_matrix
        self.theta = theta
        self.base = (X @ theta.beta1, X @ theta.beta2)

    def __call__(self, loc: int, mode: int, u: float) -> float:
        g = self.groups[loc]
        if g.size == 0:
            return 0.0
        t = self.theta
        y = self.data.log_time[g]
        if mode == 0:
            v, _, _ = mode1_terms(y, self.base[0][g] + u, t.xi1, self.data.delta1[g], self.family)
            return float(np.sum(v))
        terms = mode2_terms(y, self.base[1][g] + u, t.xi21, t.xi22, t.eta, t.lam, self.data.delta2[g], self.family)
        return float(np.sum(terms.value))


def e_step(
    lik: _LocationLikelihood,
    theta_t: ThetaT,
    mu: np.ndarray,
    omega: np.ndarray,
    sf: np.ndarray,
    state: np.ndarray,
    proposal_sd: np.ndarray,
    n_keep: int,
    n_burnin: int,
    target_acceptance: float,
    rng: np.random.Generator,
) -> EStepResult:
    """Single-site random-walk Metropolis over the stacked effects.

    q = B (u - mean) is updated on acceptance so the Gaussian part of each
    ratio needs no solve. Proposal scales adapt toward the target acceptance during
    burn-in only.
    """
    try:
        B = _precision(omega, sf)
    except NonPositiveDefiniteError as exc:
        raise McemError(f"effects covariance is not positive definite: {exc}") from exc
    lik.set_theta(theta_t)
    n = omega.shape[0]
    dim = 2 * n
    u = state.copy()
    sd = proposal_sd.copy()
    mean = np.tile(mu, n)
    q = B @ (u - mean)
    b_diag = np.diag(B).copy()
    current = np.array([lik(idx // 2, idx % 2, u[idx]) for idx in range(dim)])

    draws = np.empty((n_keep, n, 2))
    window_accepted = np.zeros(dim)
    kept_accepts = 0
    for sweep in range(n_burnin + n_keep):
        steps = rng.standard_normal(dim) * sd
        log_u = np.log(rng.uniform(size=dim))
        for idx in range(dim):
            y = steps[idx]
            proposal = u[idx] + y
            ll_new = lik(idx // 2, idx % 2, proposal)
            log_a = ll_new - current[idx] - y * q[idx] - 0.5 * y * y * b_diag[idx]
            if log_u[idx] < log_a:
                u[idx] = proposal
                q += y * B[:, idx]
                current[idx] = ll_new
                window_accepted[idx] += 1
                if sweep >= n_burnin:
                    kept_accepts += 1
        if sweep < n_burnin and (sweep + 1) % _ADAPT_EVERY == 0:
            rate = window_accepted / _ADAPT_EVERY
            sd *= np.exp(2.0 * (rate - target_acceptance))
            window_accepted[:] = 0
        if sweep >= n_burnin:
            draws[sweep - n_burnin] = u.reshape(n, 2)
    acceptance = kept_accepts / max(1, n_keep * dim)
    return EStepResult(draws=draws, acceptance=acceptance, state=u, proposal_sd=sd)


# --------------------------------------------------------------------------- #
# M-step
# --------------------------------------------------------------------------- #


class _LikelihoodBlock:
    """Monte Carlo average of the log likelihood over retained effects draws.

    Coordinates: beta1, beta2, log xi1, log xi21 and, for the mixture,
    log xi22, log eta, logit lambda.
    """

    def __init__(self, data: Dataset, family: Family, mixture: bool):
        self.data = data
        self.family = Family(family)
        self.mixture = mixture
        self.p = data.p

    def pack(self, theta: ThetaT) -> np.ndarray:
        parts = [theta.beta1, theta.beta2, [np.log(theta.xi1), np.log(theta.xi21)]]
        if self.mixture:
            parts.append([np.log(theta.xi22), np.log(theta.eta), special.logit(theta.lam)])
        return np.concatenate([np.asarray(x, dtype=float) for x in parts])

    def unpack(self, x: np.ndarray, mu: np.ndarray) -> ThetaT:
        p = self.p
        extra = {}
        if self.mixture:
            extra = dict(xi22=float(np.exp(x[2 * p + 2])), eta=float(np.exp(x[2 * p + 3])), lam=float(special.expit(x[2 * p + 4])))
        return ThetaT(
            mu1=float(mu[0]),
            mu2=float(mu[1]),
            beta1=x[:p],
            beta2=x[p : 2 * p],
            xi1=float(np.exp(x[2 * p])),
            xi21=float(np.exp(x[2 * p + 1])),
            **extra,
        )

    def objective(self, x: np.ndarray, draws: np.ndarray) -> Tuple[float, np.ndarray]:
        data, p = self.data, self.p
        theta = self.unpack(x, np.zeros(2))
        X = data.design_matrix
        o1 = draws[:, data.loc_index, 0]
        o2 = draws[:, data.loc_index, 1]
        y = data.log_time[None, :]
        v1, dmu1, dlxi1 = mode1_terms(y, X @ theta.beta1 + o1, theta.xi1, data.delta1[None, :], self.family)
        t2 = mode2_terms(
            y, X @ theta.beta2 + o2, theta.xi21, theta.xi22, theta.eta, theta.lam, data.delta2[None, :], self.family
        )
        m = draws.shape[0]
        value = float(np.sum(v1) + np.sum(t2.value)) / m
        g = np.zeros_like(x)
        g[:p] = X.T @ dmu1.sum(axis=0) / m
        g[p : 2 * p] = X.T @ t2.d_mu.sum(axis=0) / m
        g[2 * p] = np.sum(dlxi1) / m
        g[2 * p + 1] = np.sum(t2.d_log_xi21) / m
        if self.mixture:
            g[2 * p + 2] = np.sum(t2.d_log_xi22) / m
            g[2 * p + 3] = np.sum(t2.d_log_eta) / m
            g[2 * p + 4] = np.sum(t2.d_logit_lam) / m
        if not np.isfinite(value) or not np.all(np.isfinite(g)):
            return 1e300, np.zeros_like(x)
        return -value, -g

    def draw_log_lik(self, x: np.ndarray, draws: np.ndarray) -> np.ndarray:
        """Total log likelihood of the data under each effects draw, shape (m,)."""
        data = self.data
        theta = self.unpack(x, np.zeros(2))
        X = data.design_matrix
        y = data.log_time[None, :]
        v1, _, _ = mode1_terms(
            y, X @ theta.beta1 + draws[:, data.loc_index, 0], theta.xi1, data.delta1[None, :], self.family
        )
        t2 = mode2_terms(
            y,
            X @ theta.beta2 + draws[:, data.loc_index, 1],
            theta.xi21,
            theta.xi22,
            theta.eta,
            theta.lam,
            data.delta2[None, :],
            self.family,
        )
        shape = (draws.shape[0], data.n_units)
        return np.broadcast_to(v1, shape).sum(axis=1) + np.broadcast_to(t2.value, shape).sum(axis=1)

    def effect_terms(self, x: np.ndarray, u: np.ndarray) -> Tuple[float, np.ndarray]:
        """Log likelihood and its gradient in the location-major effects vector ``u``."""
        data = self.data
        n = data.n_locations
        theta = self.unpack(x, np.zeros(2))
        X = data.design_matrix
        o1 = u[0::2][data.loc_index]
        o2 = u[1::2][data.loc_index]
        v1, d1, _ = mode1_terms(data.log_time, X @ theta.beta1 + o1, theta.xi1, data.delta1, self.family)
        t2 = mode2_terms(
            data.log_time, X @ theta.beta2 + o2, theta.xi21, theta.xi22, theta.eta, theta.lam, data.delta2, self.family
        )
        grad = np.empty(2 * n)
        grad[0::2] = np.bincount(data.loc_index, weights=d1, minlength=n)
        grad[1::2] = np.bincount(data.loc_index, weights=t2.d_mu, minlength=n)
        return float(np.sum(v1) + np.sum(t2.value)), grad


class _EffectsBlock:
    """Expected Gaussian log density of the effects; the mean is profiled by GLS.

    Coordinates: log sigma1, log sigma2 and, for spatial models, rho12, log nu
    and (power exponential only) kappa.
    """

    def __init__(self, data: Dataset, correlation: CorrelationKind, config: McemConfig, guard: Optional[EigenvalueGuard]):
        self.correlation = CorrelationKind(correlation)
        self.distances = distance_matrix(data.locations, data.grid)
        self.n = data.n_locations
        self.penalty = config.penalty
        self.nu_max = config.nu_max
        self.guard = guard

    def pack(self, w: ThetaW) -> np.ndarray:
        z = [np.log(w.sigma1), np.log(w.sigma2)]
        if self.correlation.spatial:
            z += [w.rho12, np.log(w.nu)]
        if self.correlation is CorrelationKind.PEXP:
            z += [w.kappa]
        return np.asarray(z, dtype=float)

    def unpack(self, z: np.ndarray) -> ThetaW:
        kappa = {CorrelationKind.GAU: 2.0, CorrelationKind.PEXP: float(z[4]) if z.size > 4 else 1.0}.get(
            self.correlation, 1.0
        )
        spatial = self.correlation.spatial
        return ThetaW(
            sigma1=float(np.exp(z[0])),
            sigma2=float(np.exp(z[1])),
            rho12=float(z[2]) if spatial else 0.0,
            nu=float(np.exp(z[3])) if spatial else 1.0,
            kappa=kappa,
        )

    def bounds(self) -> List[Tuple[float, float]]:
        b = [(np.log(_SIGMA_MIN), None), (np.log(_SIGMA_MIN), None)]
        if self.correlation.spatial:
            b += [(-RHO_BOUND, RHO_BOUND), (np.log(_NU_MIN), np.log(self.nu_max))]
        if self.correlation is CorrelationKind.PEXP:
            b += [(_KAPPA_MIN, 2.0)]
        return b

    def omega(self, w: ThetaW) -> np.ndarray:
        if not self.correlation.spatial:
            return np.eye(self.n)
        return correlation_matrix(self.distances, CorrelationFamily(self.correlation, w.nu, w.kappa))

    @staticmethod
    def gls_mean(chol_o: np.ndarray, mean_draw: np.ndarray) -> np.ndarray:
        """Per-mode 1' Omega^-1 u_bar / 1' Omega^-1 1."""
        ones = np.ones(chol_o.shape[0])
        oinv_one = linalg.cho_solve((chol_o, True), ones, check_finite=False)
        return (oinv_one @ mean_draw) / (oinv_one @ ones)

    def evaluate(self, z: np.ndarray, draws: np.ndarray) -> Tuple[float, np.ndarray]:
        """(expected log density, GLS mean); raises NonPositiveDefiniteError."""
        w = self.unpack(z)
        chol_o = cholesky_jittered(self.omega(w))
        mu = self.gls_mean(chol_o, draws.mean(axis=0))
        m, n = draws.shape[0], self.n
        D = draws - mu
        stacked = D.transpose(1, 0, 2).reshape(n, 2 * m)
        oinv_d = linalg.cho_solve((chol_o, True), stacked, check_finite=False).reshape(n, m, 2).transpose(1, 0, 2)
        S = np.einsum("mia,mib->ab", D, oinv_d) / m
        sf = sigma_f(w.sigma1, w.sigma2, w.rho12)
        chol_f = cholesky_jittered(sf, what="cross-mode covariance")
        sf_inv = linalg.cho_solve((chol_f, True), np.eye(2), check_finite=False)
        logdet_f = 2.0 * float(np.sum(np.log(np.diag(chol_f))))
        logdet_o = 2.0 * float(np.sum(np.log(np.diag(chol_o))))
        value = -n * _LOG_2PI - 0.5 * n * logdet_f - logdet_o - 0.5 * float(np.sum(sf_inv * S))
        return value, mu

    def objective(self, z: np.ndarray, draws: np.ndarray) -> float:
        w = self.unpack(z)
        extra = 0.0
        if self.guard is not None and self.correlation.spatial and self.guard(w.nu, w.kappa) <= 0:
            extra = self.penalty
        try:
            value, _ = self.evaluate(z, draws)
        except NonPositiveDefiniteError:
            return 2.0 * self.penalty
        return -value + extra if np.isfinite(value) else 2.0 * self.penalty


def _optimize_with_restarts(fun, x0, jac, bounds, restarts: int, rng: np.random.Generator, label: str):
    """Minimise ``fun``; perturbed restarts when a run fails to improve on ``x0``.

    Returns (x, value, failed).
    """
    f0 = fun(x0)[0] if jac else fun(x0)
    best_x, best_f = np.asarray(x0, dtype=float), float(f0)
    start = best_x
    for attempt in range(restarts):
        res = optimize.minimize(fun, start, jac=jac, method="L-BFGS-B", bounds=bounds, options={"maxiter": 500})
        if np.isfinite(res.fun) and res.fun <= best_f + 1e-10 * (1.0 + abs(best_f)):
            return res.x, float(res.fun), False
        logger.debug("M-step restart", block=label, attempt=attempt + 1, value=float(res.fun), best=best_f)
        start = best_x + 0.1 * rng.standard_normal(best_x.size)
        if bounds is not None:
            lo = np.array([b[0] if b[0] is not None else -np.inf for b in bounds])
            hi = np.array([b[1] if b[1] is not None else np.inf for b in bounds])
            start = np.clip(start, lo, hi)
    logger.warning("M-step failure", block=label, restarts=restarts)
    return best_x, best_f, True


@dataclass
class MStepResult:
    x: np.ndarray  # likelihood-block coordinates
    z: np.ndarray  # effects-block coordinates
    mu: np.ndarray
    theta_t: ThetaT
    theta_w: ThetaW
    objective: float
    failed: bool


def m_step(
    draws: np.ndarray,
    lik_block: _LikelihoodBlock,
    eff_block: _EffectsBlock,
    x: np.ndarray,
    z: np.ndarray,
    config: McemConfig,
    rng: np.random.Generator,
) -> MStepResult:
    """Maximise the Monte Carlo Q function over retained effects draws, one block at a time."""
    x_new, f_lik, failed_lik = _optimize_with_restarts(
        lambda v: lik_block.objective(v, draws), x, True, None, config.restarts, rng, "likelihood"
    )
    z_new, f_eff, failed_eff = _optimize_with_restarts(
        lambda v: eff_block.objective(v, draws), z, False, eff_block.bounds(), config.restarts, rng, "effects"
    )
    try:
        _, mu = eff_block.evaluate(z_new, draws)
    except NonPositiveDefiniteError as exc:
        raise McemError(f"M-step left the positive-definite region: {exc}") from exc
    return MStepResult(
        x=x_new,
        z=z_new,
        mu=mu,
        theta_t=lik_block.unpack(x_new, mu),
        theta_w=eff_block.unpack(z_new),
        objective=-(f_lik + f_eff),
        failed=failed_lik or failed_eff,
    )


# --------------------------------------------------------------------------- #
# Observed-data log likelihood
# --------------------------------------------------------------------------- #

_PROPOSAL_SCALE = 1.05
_OBJECTIVE_STREAM = 7
_OBJECTIVE_CHUNK = 256
_CURVATURE_STEP = 1e-5


def _laplace_proposal(
    lik_block: _LikelihoodBlock, x: np.ndarray, mean: np.ndarray, B: np.ndarray, start: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Mode and covariance of the Gaussian approximation to p(u | data, theta).

    The likelihood is separable over effect coordinates, so its Hessian is
    diagonal and one pair of gradient evaluations gives every curvature.
    """

    def target(u):
        value, grad = lik_block.effect_terms(x, u)
        r = u - mean
        Br = B @ r
        return value - 0.5 * r @ Br, grad - Br

    def precision(u):
        _, up = lik_block.effect_terms(x, u + _CURVATURE_STEP)
        _, down = lik_block.effect_terms(x, u - _CURVATURE_STEP)
        curvature = np.maximum(-(up - down) / (2.0 * _CURVATURE_STEP), 0.0)
        return B + np.diag(curvature)

    u = start.copy()
    f, g = target(u)
    for _ in range(50):
        chol = cholesky_jittered(precision(u), what="effects posterior precision")
        step = linalg.cho_solve((chol, True), g, check_finite=False)
        t = 1.0
        while t >= 1e-4:
            f_new, g_new = target(u + t * step)
            if np.isfinite(f_new) and f_new >= f - 1e-10:
                break
            t *= 0.5
        else:
            break
        u, f, g = u + t * step, f_new, g_new
        if np.max(np.abs(t * step)) < 1e-8:
            break
    chol = cholesky_jittered(precision(u), what="effects posterior precision")
    cov = linalg.cho_solve((chol, True), np.eye(u.size), check_finite=False)
    return u, 0.5 * (cov + cov.T)


def observed_log_likelihood(
    lik_block: _LikelihoodBlock,
    x: np.ndarray,
    mu: np.ndarray,
    omega: np.ndarray,
    sf: np.ndarray,
    e_draws: np.ndarray,
    n_samples: int,
    rng: np.random.Generator,
) -> Tuple[float, float]:
    """Importance-sampling estimate of log p(data | theta) and its standard error.

    The proposal is the Laplace approximation of the effects posterior, slightly
    widened; its Newton search starts at the mean of the E-step draws. Passing a
    freshly seeded ``rng`` at every iterate gives common random numbers across
    iterations.
    """
    n = omega.shape[0]
    dim = 2 * n
    mean = np.tile(mu, n)
    try:
        chol_o = cholesky_jittered(omega)
        chol_f = cholesky_jittered(sf, what="cross-mode covariance")
        B = _precision(omega, sf)
        centre, cov = _laplace_proposal(lik_block, x, mean, B, e_draws.reshape(-1, dim).mean(axis=0))
    except NonPositiveDefiniteError as exc:
        raise McemError(f"cannot evaluate the observed-data likelihood: {exc}") from exc

    proposal = stats.multivariate_normal(mean=centre, cov=_PROPOSAL_SCALE**2 * cov, allow_singular=True)
    u = np.atleast_2d(proposal.rvs(size=n_samples, random_state=rng))
    log_q = proposal.logpdf(u)
    # det(Omega (x) Sigma_f) = det(Omega)^2 det(Sigma_f)^n
    logdet = 4.0 * np.sum(np.log(np.diag(chol_o))) + 2.0 * n * np.sum(np.log(np.diag(chol_f)))
    r = u - mean
    log_prior = -0.5 * (dim * _LOG_2PI + logdet + np.sum((r @ B) * r, axis=1))
    log_lik = np.concatenate(
        [
            lik_block.draw_log_lik(x, u[s : s + _OBJECTIVE_CHUNK].reshape(-1, n, 2))
            for s in range(0, n_samples, _OBJECTIVE_CHUNK)
        ]
    )

    log_w = log_lik + log_prior - log_q
    log_w = np.where(np.isfinite(log_w), log_w, -np.inf)
    if not np.any(np.isfinite(log_w)):
        raise McemError("observed-data likelihood is not finite at the current estimate")
    value = float(special.logsumexp(log_w) - np.log(n_samples))
    w = np.exp(log_w - log_w.max())
    se = float(np.std(w, ddof=1) / (np.sqrt(n_samples) * np.mean(w)))
    return value, se


# --------------------------------------------------------------------------- #
# Driver
# --------------------------------------------------------------------------- #


def estimates(
    theta_t: ThetaT, theta_w: Optional[ThetaW], covariate_names: Sequence[str], mixture: bool = True
) -> Dict[str, float]:
    """Point estimates keyed like the sampler's scalar parameter names."""
    out: Dict[str, float] = {}
    for k, beta in (("beta1", theta_t.beta1), ("beta2", theta_t.beta2)):
        for name, value in zip(covariate_names, beta):
            out[f"{k}[{name}]"] = float(value)
    out.update(mu1=theta_t.mu1, mu2=theta_t.mu2, xi1=theta_t.xi1)
    if mixture:
        out.update(xi21=theta_t.xi21, xi22=theta_t.xi22, eta=theta_t.eta, **{"lambda": theta_t.lam})
    else:
        out["xi2"] = theta_t.xi21
    if theta_w is not None:
        out.update(sigma1=theta_w.sigma1, sigma2=theta_w.sigma2, rho12=theta_w.rho12, nu=theta_w.nu, kappa=theta_w.kappa)
    return out


@dataclass
class McemResult:
    theta_t: ThetaT
    theta_w: Optional[ThetaW]
    effects: np.ndarray  # (n, 2) posterior mean of the centred effects
    trajectory: pd.DataFrame  # iter, scalar parameters, observed-data objective
    converged: bool
    iterations: int
    covariate_names: Tuple[str, ...] = ()
    mixture: bool = True
    m_step_failures: List[int] = field(default_factory=list)
    progress: pd.DataFrame = field(default_factory=pd.DataFrame)  # per-iteration sampler and optimiser state

    def estimates(self) -> Dict[str, float]:
        return estimates(self.theta_t, self.theta_w, self.covariate_names, self.mixture)

    def to_frame(self) -> pd.DataFrame:
        est = self.estimates()
        return pd.DataFrame({"param": list(est), "estimate": list(est.values())})


def _schedule(config: McemConfig, iteration: int) -> int:
    return config.e_step_base + config.e_step_growth * iteration


def _thin(draws: np.ndarray, limit: int) -> np.ndarray:
    if draws.shape[0] <= limit:
        return draws
    idx = np.linspace(0, draws.shape[0] - 1, limit).round().astype(int)
    return draws[idx]


def run_mcem(data: Dataset, model: ModelConfig, config: Optional[McemConfig] = None) -> McemResult:
    """Maximum likelihood by Monte Carlo EM; the retained-draw count grows each iteration."""
    config = config or McemConfig()
    corr = CorrelationKind(model.correlation)
    family = Family(model.family)
    aft = fit_aft(data, model)
    if not corr.has_effects:
        row = {"iter": 0, **estimates(aft.theta_t, None, data.covariate_names, model.mixture), "objective": aft.log_lik}
        return McemResult(
            aft.theta_t,
            None,
            np.zeros((0, 2)),
            pd.DataFrame([row]),
            aft.converged,
            0,
            tuple(data.covariate_names),
            model.mixture,
        )

    rng = np.random.default_rng(config.seed)
    guard = EigenvalueGuard(data, corr, config) if corr.spatial else None
    lik_block = _LikelihoodBlock(data, family, model.mixture)
    eff_block = _EffectsBlock(data, corr, config, guard)
    loc_lik = _LocationLikelihood(data, family)

    n = data.n_locations
    mu = np.array([aft.theta_t.mu1, aft.theta_t.mu2])
    theta_t = aft.theta_t
    theta_w = ThetaW(
        sigma1=0.1,
        sigma2=0.1,
        rho12=0.0,
        nu=min(0.5, config.nu_max / 2.0) if corr.spatial else 1.0,
        kappa=2.0 if corr is CorrelationKind.GAU else 1.0,
    )
    x = lik_block.pack(theta_t)
    z = eff_block.pack(theta_w)
    state = np.tile(mu, n)
    proposal_sd = np.full(2 * n, config.proposal_sd)

    rows = []
    progress = []
    failures: List[int] = []
    converged = False
    iteration = 0
    for iteration in range(config.max_iters):
        with structlog.contextvars.bound_contextvars(iteration=iteration):
            n_keep = _schedule(config, iteration)
            omega = eff_block.omega(theta_w)
            sf = sigma_f(theta_w.sigma1, theta_w.sigma2, theta_w.rho12)
            es = e_step(
                loc_lik,
                theta_t,
                mu,
                omega,
                sf,
                state,
                proposal_sd,
                n_keep,
                config.e_step_burnin,
                config.target_acceptance,
                rng,
            )
            state, proposal_sd = es.state, es.proposal_sd
            draws = _thin(es.draws, config.max_m_step_draws)

            ms = m_step(draws, lik_block, eff_block, x, z, config, rng)
            if ms.failed:
                failures.append(iteration)

            old = np.concatenate([x, z, mu])
            new = np.concatenate([ms.x, ms.z, ms.mu])
            max_change = float(np.max(np.abs(new - old)))
            x, z, mu = ms.x, ms.z, ms.mu
            theta_t, theta_w = ms.theta_t, ms.theta_w

            objective, objective_se = observed_log_likelihood(
                lik_block,
                x,
                mu,
                eff_block.omega(theta_w),
                sigma_f(theta_w.sigma1, theta_w.sigma2, theta_w.rho12),
                es.draws,
                config.objective_draws,
                np.random.default_rng([config.seed, _OBJECTIVE_STREAM]),
            )
            rows.append(
                {
                    "iter": iteration + 1,
                    **estimates(theta_t, theta_w, data.covariate_names, model.mixture),
                    "objective": objective,
                }
            )
            progress.append(
                {
                    "iter": iteration + 1,
                    "retained": n_keep,
                    "acceptance": es.acceptance,
                    "q_value": ms.objective,
                    "objective_se": objective_se,
                    "max_change": max_change,
                }
            )
            logger.info(
                "MCEM iteration",
                retained=n_keep,
                acceptance=round(es.acceptance, 3),
                objective=objective,
                objective_se=objective_se,
                max_change=max_change,
            )
            if max_change < config.tolerance:
                converged = True
                break

    if not converged:
        logger.warning("MCEM did not converge", iterations=config.max_iters, tolerance=config.tolerance)
    effects = es.draws.mean(axis=0) - mu
    return McemResult(
        theta_t=theta_t,
        theta_w=theta_w,
        effects=effects,
        trajectory=pd.DataFrame(rows),
        converged=converged,
        iterations=iteration + 1,
        covariate_names=tuple(data.covariate_names),
        mixture=model.mixture,
        m_step_failures=failures,
        progress=pd.DataFrame(progress),
    )
