"""Joint log posterior on the unconstrained scale with analytic gradients.

Unconstrained coordinates, in order:

    beta1 (p), beta2 (p), mu1, mu2, log xi1, log xi21,
    [log xi22, log eta, logit lambda]           mode-2 mixture only
    [log sigma1, log sigma2]                    models with effects
    [logit((rho12/0.95 + 1)/2), log nu]         spatial models
    [logit(kappa/2)]                            power exponential only
    free1 (n-1), free2 (n-1)                    models with effects

The n-th effect of each mode is minus the sum of the free ones.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import structlog
from scipy import linalg, special, stats

from data_model import Dataset
from distributions import ThetaT, mode1_terms, mode2_terms
from errors import NonPositiveDefiniteError
from schemas import CorrelationKind, Family, ModelConfig, PriorConfig
from spatial import RHO_BOUND, cholesky_jittered, correlation_derivatives, distance_matrix, sigma_f

logger = structlog.get_logger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)


def _log_sigmoid(u):
    return -np.logaddexp(0.0, -u)


def _logit(p):
    return np.log(p) - np.log1p(-p)


# --- Parameter containers --- #


@dataclass(frozen=True)
class ThetaW:
    sigma1: float = 1.0
    sigma2: float = 1.0
    rho12: float = 0.0
    nu: float = 1.0
    kappa: float = 1.0


@dataclass(frozen=True)
class SpatialField:
    """Effects stacked mode-major: all mode-1 values, then all mode-2 values."""

    values: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0] // 2

    @property
    def matrix(self) -> np.ndarray:
        """n x 2 view, one column per mode."""
        return self.values.reshape(2, self.n).T

    def mode(self, k: int) -> np.ndarray:
        return self.values[(k - 1) * self.n : k * self.n]

    @classmethod
    def zeros(cls, n: int) -> "SpatialField":
        return cls(np.zeros(2 * n))

    @classmethod
    def from_matrix(cls, W: np.ndarray) -> "SpatialField":
        return cls(np.asarray(W, dtype=float).T.reshape(-1))


def reconstruct_effects(free: np.ndarray, n: int) -> SpatialField:
    """Full effects from 2(n-1) free coordinates with a hard sum-to-zero per mode."""
    free = np.asarray(free, dtype=float).reshape(2, max(n - 1, 0))
    W = np.empty((2, n))
    W[:, : n - 1] = free
    W[:, n - 1] = -free.sum(axis=1)
    return SpatialField(W.reshape(-1))


# --- Layout --- #


@dataclass(frozen=True)
class ParameterLayout:
    p: int
    n: int
    covariate_names: Tuple[str, ...]
    locations: Tuple[Tuple[int, int], ...]
    correlation: CorrelationKind
    mixture: bool
    slices: Dict[str, slice]
    dim: int

    @classmethod
    def build(cls, data: Dataset, model: ModelConfig) -> "ParameterLayout":
        corr = CorrelationKind(model.correlation)
        p = data.p
        n = data.n_locations if corr.has_effects else 0
        sizes: List[Tuple[str, int]] = [("beta1", p), ("beta2", p), ("mu1", 1), ("mu2", 1), ("xi1", 1), ("xi21", 1)]
        if model.mixture:
            sizes += [("xi22", 1), ("eta", 1), ("lambda", 1)]
        if corr.has_effects:
            sizes += [("sigma1", 1), ("sigma2", 1)]
        if corr.spatial:
            sizes += [("rho12", 1), ("nu", 1)]
        if corr is CorrelationKind.PEXP:
            sizes += [("kappa", 1)]
        if corr.has_effects:
            sizes += [("free1", max(n - 1, 0)), ("free2", max(n - 1, 0))]
        slices: Dict[str, slice] = {}
        offset = 0
        for name, size in sizes:
            slices[name] = slice(offset, offset + size)
            offset += size
        return cls(
            p=p,
            n=n,
            covariate_names=tuple(data.covariate_names),
            locations=tuple((int(r), int(c)) for r, c in data.locations),
            correlation=corr,
            mixture=model.mixture,
            slices=slices,
            dim=offset,
        )

    def has(self, name: str) -> bool:
        return name in self.slices

    @property
    def scalar_names(self) -> List[str]:
        names = [f"beta1[{c}]" for c in self.covariate_names]
        names += [f"beta2[{c}]" for c in self.covariate_names]
        names += ["mu1", "mu2", "xi1", "xi21" if self.mixture else "xi2"]
        for name in ("xi22", "eta", "lambda", "sigma1", "sigma2", "rho12", "nu", "kappa"):
            if self.has(name):
                names.append(name)
        return names

    @property
    def effect_names(self) -> List[str]:
        if not self.correlation.has_effects:
            return []
        return [f"w{k}[r{r}c{c}]" for k in (1, 2) for r, c in self.locations]

    @property
    def output_names(self) -> List[str]:
        return self.scalar_names + self.effect_names


# --- Stand-alone density pieces --- #


def log_likelihood(theta_t: ThetaT, w: SpatialField, data: Dataset, family: Family) -> float:
    """Competing-risks log likelihood given effects (Weibull or lognormal)."""
    if data.n_units == 0:
        return 0.0
    family = Family(family)
    W = w.matrix if w.values.size else np.zeros((data.n_locations, 2))
    X = data.design_matrix
    m1 = theta_t.mu1 + X @ theta_t.beta1 + W[data.loc_index, 0]
    m2 = theta_t.mu2 + X @ theta_t.beta2 + W[data.loc_index, 1]
    v1, _, _ = mode1_terms(data.log_time, m1, theta_t.xi1, data.delta1, family)
    t2 = mode2_terms(data.log_time, m2, theta_t.xi21, theta_t.xi22, theta_t.eta, theta_t.lam, data.delta2, family)
    return float(np.sum(v1) + np.sum(t2.value))


def log_prior(
    theta_t: ThetaT,
    theta_w: Optional[ThetaW],
    prior: PriorConfig,
    correlation: CorrelationKind = CorrelationKind.PEXP,
    mixture: bool = True,
) -> float:
    """Constrained-scale log prior; -inf outside the support."""
    correlation = CorrelationKind(correlation)
    if not theta_t.in_support():
        return -np.inf
    lp = -np.log(theta_t.xi1) - np.log(theta_t.xi21)
    if mixture:
        lp -= np.log(theta_t.xi22)
    if not correlation.has_effects:
        return float(lp)
    if theta_w is None or theta_w.sigma1 <= 0 or theta_w.sigma2 <= 0:
        return -np.inf
    lp -= np.log(theta_w.sigma1) + np.log(theta_w.sigma2)
    if not correlation.spatial:
        return float(lp)
    if abs(theta_w.rho12) > RHO_BOUND or theta_w.nu <= 0:
        return -np.inf
    lp += stats.invgamma.logpdf(theta_w.nu, prior.a, scale=prior.b)
    if correlation is CorrelationKind.PEXP:
        if not 0 < theta_w.kappa <= 2:
            return -np.inf
        lp += stats.beta.logpdf(theta_w.kappa / 2.0, prior.c, prior.d)
    return float(lp)


# --- Posterior model --- #


@dataclass(frozen=True)
class Unpacked:
    theta_t: ThetaT
    theta_w: Optional[ThetaW]
    effects: SpatialField


class PosteriorModel:
    """Log posterior of one dataset under one model configuration.

    Implements the sampler's target protocol: ``dim``, ``log_density``,
    ``log_density_and_grad``, ``constrain``, ``names`` and
    ``first_nonfinite_term``.
    """

    def __init__(self, data: Dataset, model: ModelConfig):
        self.data = data
        self.model = model
        self.family = Family(model.family)
        self.layout = ParameterLayout.build(data, model)
        self.prior = model.prior
        self.distances = (
            distance_matrix(data.locations, data.grid) if self.layout.correlation.spatial else None
        )
        self.non_pd_count = 0

    # --- protocol --- #

    @property
    def dim(self) -> int:
        return self.layout.dim

    @property
    def names(self) -> List[str]:
        return self.layout.output_names

    # --- transforms --- #

    def unpack(self, x: np.ndarray) -> Unpacked:
        s = self.layout.slices
        x = np.asarray(x, dtype=float)

        def one(name: str, default: float = 1.0) -> float:
            return float(x[s[name]][0]) if name in s else default

        mixture = self.layout.mixture
        theta_t = ThetaT(
            mu1=one("mu1"),
            mu2=one("mu2"),
            beta1=x[s["beta1"]],
            beta2=x[s["beta2"]],
            xi1=float(np.exp(one("xi1"))),
            xi21=float(np.exp(one("xi21"))),
            xi22=float(np.exp(one("xi22"))) if mixture else 1.0,
            eta=float(np.exp(one("eta"))) if mixture else 1.0,
            lam=float(special.expit(one("lambda"))) if mixture else 1.0,
        )
        corr = self.layout.correlation
        theta_w = None
        effects = SpatialField.zeros(self.layout.n)
        if corr.has_effects:
            kappa = 1.0
            if corr is CorrelationKind.PEXP:
                kappa = 2.0 * float(special.expit(one("kappa")))
            elif corr is CorrelationKind.GAU:
                kappa = 2.0
            theta_w = ThetaW(
                sigma1=float(np.exp(one("sigma1"))),
                sigma2=float(np.exp(one("sigma2"))),
                rho12=RHO_BOUND * (2.0 * float(special.expit(one("rho12", 0.0))) - 1.0) if corr.spatial else 0.0,
                nu=float(np.exp(one("nu", 0.0))),
                kappa=kappa,
            )
            free = np.concatenate([x[s["free1"]], x[s["free2"]]])
            effects = reconstruct_effects(free, self.layout.n)
        return Unpacked(theta_t, theta_w, effects)

    def unconstrain(
        self, theta_t: ThetaT, theta_w: Optional[ThetaW] = None, effects: Optional[np.ndarray] = None
    ) -> np.ndarray:
        """Inverse of ``unpack``. Effects (n x 2) are centred per mode and the means folded into mu."""
        s = self.layout.slices
        x = np.zeros(self.dim)
        mu1, mu2 = theta_t.mu1, theta_t.mu2
        if self.layout.correlation.has_effects:
            W = np.zeros((self.layout.n, 2)) if effects is None else np.asarray(effects, dtype=float).reshape(self.layout.n, 2)
            means = W.mean(axis=0)
            W = W - means
            mu1 += means[0]
            mu2 += means[1]
            x[s["free1"]] = W[:-1, 0]
            x[s["free2"]] = W[:-1, 1]
            theta_w = theta_w or ThetaW()
            x[s["sigma1"]] = np.log(theta_w.sigma1)
            x[s["sigma2"]] = np.log(theta_w.sigma2)
            if self.layout.correlation.spatial:
                x[s["rho12"]] = _logit((theta_w.rho12 / RHO_BOUND + 1.0) / 2.0)
                x[s["nu"]] = np.log(theta_w.nu)
            if self.layout.has("kappa"):
                x[s["kappa"]] = _logit(theta_w.kappa / 2.0)
        x[s["beta1"]] = theta_t.beta1
        x[s["beta2"]] = theta_t.beta2
        x[s["mu1"]] = mu1
        x[s["mu2"]] = mu2
        x[s["xi1"]] = np.log(theta_t.xi1)
        x[s["xi21"]] = np.log(theta_t.xi21)
        if self.layout.mixture:
            x[s["xi22"]] = np.log(theta_t.xi22)
            x[s["eta"]] = np.log(theta_t.eta)
            x[s["lambda"]] = _logit(theta_t.lam)
        return x

    def constrain(self, x: np.ndarray) -> np.ndarray:
        """Values aligned with ``names``: scalar parameters then full effects."""
        u = self.unpack(x)
        t, w = u.theta_t, u.theta_w
        out = list(t.beta1) + list(t.beta2) + [t.mu1, t.mu2, t.xi1, t.xi21]
        if self.layout.mixture:
            out += [t.xi22, t.eta, t.lam]
        if w is not None:
            out += [w.sigma1, w.sigma2]
            if self.layout.correlation.spatial:
                out += [w.rho12, w.nu]
            if self.layout.has("kappa"):
                out += [w.kappa]
            out += list(u.effects.values)
        return np.asarray(out, dtype=float)

    def from_constrained(self, values: np.ndarray) -> Unpacked:
        """Rebuild parameters from a row laid out like ``names``."""
        values = np.asarray(values, dtype=float)
        lookup = dict(zip(self.layout.scalar_names, values))
        p = self.layout.p
        theta_t = ThetaT(
            mu1=lookup["mu1"],
            mu2=lookup["mu2"],
            beta1=values[:p],
            beta2=values[p : 2 * p],
            xi1=lookup["xi1"],
            xi21=lookup.get("xi21", lookup.get("xi2")),
            xi22=lookup.get("xi22", 1.0),
            eta=lookup.get("eta", 1.0),
            lam=lookup.get("lambda", 1.0),
        )
        theta_w = None
        effects = SpatialField.zeros(self.layout.n)
        if self.layout.correlation.has_effects:
            theta_w = ThetaW(
                sigma1=lookup["sigma1"],
                sigma2=lookup["sigma2"],
                rho12=lookup.get("rho12", 0.0),
                nu=lookup.get("nu", 1.0),
                kappa=lookup.get("kappa", 2.0 if self.layout.correlation is CorrelationKind.GAU else 1.0),
            )
            effects = SpatialField(values[len(self.layout.scalar_names) :])
        return Unpacked(theta_t, theta_w, effects)

    def log_jacobian(self, x: np.ndarray) -> float:
        s = self.layout.slices
        total = 0.0
        for name in ("xi1", "xi21", "xi22", "eta", "sigma1", "sigma2", "nu"):
            if name in s:
                total += float(x[s[name]][0])
        for name, const in (("lambda", 0.0), ("rho12", np.log(2.0 * RHO_BOUND)), ("kappa", np.log(2.0))):
            if name in s:
                u = float(x[s[name]][0])
                total += const + _log_sigmoid(u) + _log_sigmoid(-u)
        return total

    def _prior_jacobian_grad(self, x: np.ndarray, unpacked: Unpacked) -> np.ndarray:
        # log-transformed scales with 1/scale priors cancel against their Jacobian
        s = self.layout.slices
        g = np.zeros(self.dim)
        if "eta" in s:
            g[s["eta"]] = 1.0
        if "lambda" in s:
            g[s["lambda"]] = 1.0 - 2.0 * unpacked.theta_t.lam
        if "rho12" in s:
            g[s["rho12"]] = 1.0 - 2.0 * special.expit(x[s["rho12"]][0])
        if "nu" in s:
            g[s["nu"]] = -self.prior.a + self.prior.b / unpacked.theta_w.nu
        if "kappa" in s:
            half = unpacked.theta_w.kappa / 2.0
            g[s["kappa"]] = self.prior.c * (1.0 - half) - self.prior.d * half
        return g

    # --- pieces --- #

    def _likelihood_and_grad(self, unpacked: Unpacked) -> Tuple[float, np.ndarray, np.ndarray]:
        """Log likelihood, its gradient on the non-effect coordinates, and d/dW (n x 2)."""
        data, s = self.data, self.layout.slices
        g = np.zeros(self.dim)
        n = self.layout.n
        gW = np.zeros((n, 2))
        if data.n_units == 0:
            return 0.0, g, gW
        t = unpacked.theta_t
        X = data.design_matrix
        W = unpacked.effects.matrix if n else None
        m1 = t.mu1 + X @ t.beta1
        m2 = t.mu2 + X @ t.beta2
        if W is not None:
            m1 = m1 + W[data.loc_index, 0]
            m2 = m2 + W[data.loc_index, 1]
        v1, dmu1, dlxi1 = mode1_terms(data.log_time, m1, t.xi1, data.delta1, self.family)
        t2 = mode2_terms(data.log_time, m2, t.xi21, t.xi22, t.eta, t.lam, data.delta2, self.family)
        ll = float(np.sum(v1) + np.sum(t2.value))
        if not np.isfinite(ll):
            return -np.inf, g, gW
        g[s["beta1"]] = X.T @ dmu1
        g[s["beta2"]] = X.T @ t2.d_mu
        g[s["mu1"]] = np.sum(dmu1)
        g[s["mu2"]] = np.sum(t2.d_mu)
        g[s["xi1"]] = np.sum(dlxi1)
        g[s["xi21"]] = np.sum(t2.d_log_xi21)
        if self.layout.mixture:
            g[s["xi22"]] = np.sum(t2.d_log_xi22)
            g[s["eta"]] = np.sum(t2.d_log_eta)
            g[s["lambda"]] = np.sum(t2.d_logit_lam)
        if n:
            gW[:, 0] = np.bincount(data.loc_index, weights=dmu1, minlength=n)
            gW[:, 1] = np.bincount(data.loc_index, weights=t2.d_mu, minlength=n)
        return ll, g, gW

    def _effects_prior_and_grad(self, x: np.ndarray, unpacked: Unpacked) -> Tuple[float, np.ndarray, np.ndarray]:
        """MVN(0, Sigma_f (x) Omega) log density of the full effects and its gradients."""
        s, n = self.layout.slices, self.layout.n
        g = np.zeros(self.dim)
        w = unpacked.theta_w
        W = unpacked.effects.matrix
        corr = self.layout.correlation
        if corr.spatial:
            omega, d_nu, d_kappa = correlation_derivatives(self.distances, w.nu, w.kappa)
            chol_o = cholesky_jittered(omega)
            OinvW = linalg.cho_solve((chol_o, True), W, check_finite=False)
            logdet_o = 2.0 * float(np.sum(np.log(np.diag(chol_o))))
        else:
            OinvW = W
            logdet_o = 0.0
        sf = sigma_f(w.sigma1, w.sigma2, w.rho12)
        sf_inv = np.linalg.inv(sf)
        logdet_f = float(np.log(np.linalg.det(sf)))
        S = W.T @ OinvW
        lp = -n * _LOG_2PI - 0.5 * n * logdet_f - logdet_o - 0.5 * float(np.sum(sf_inv * S))

        gW = -OinvW @ sf_inv

        G_f = -0.5 * n * sf_inv + 0.5 * sf_inv @ S @ sf_inv
        s1, s2, rho = w.sigma1, w.sigma2, w.rho12
        dsf_ds1 = np.array([[2 * s1, rho * s2], [rho * s2, 0.0]])
        dsf_ds2 = np.array([[0.0, rho * s1], [rho * s1, 2 * s2]])
        g[s["sigma1"]] = s1 * np.sum(G_f * dsf_ds1)
        g[s["sigma2"]] = s2 * np.sum(G_f * dsf_ds2)
        if corr.spatial:
            dsf_drho = np.array([[0.0, s1 * s2], [s1 * s2, 0.0]])
            sig = special.expit(x[s["rho12"]][0])
            g[s["rho12"]] = np.sum(G_f * dsf_drho) * 2.0 * RHO_BOUND * sig * (1.0 - sig)

            omega_inv = linalg.cho_solve((chol_o, True), np.eye(n), check_finite=False)
            G_o = -omega_inv + 0.5 * (OinvW @ sf_inv) @ OinvW.T
            g[s["nu"]] = w.nu * np.sum(G_o * d_nu)
            if "kappa" in s:
                g[s["kappa"]] = w.kappa * (1.0 - w.kappa / 2.0) * np.sum(G_o * d_kappa)
        return lp, g, gW

    def _chain_effects(self, g: np.ndarray, gW: np.ndarray) -> None:
        s, n = self.layout.slices, self.layout.n
        if n == 0 or not self.layout.correlation.has_effects:
            return
        g[s["free1"]] += gW[: n - 1, 0] - gW[n - 1, 0]
        g[s["free2"]] += gW[: n - 1, 1] - gW[n - 1, 1]

    # --- public evaluation --- #

    def log_density_and_grad(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        x = np.asarray(x, dtype=float)
        zero = np.zeros(self.dim)
        if not np.all(np.isfinite(x)):
            return -np.inf, zero
        unpacked = self.unpack(x)
        lp_prior = log_prior(
            unpacked.theta_t, unpacked.theta_w, self.prior, self.layout.correlation, self.layout.mixture
        )
        lp_jac = self.log_jacobian(x)
        if not np.isfinite(lp_prior + lp_jac):
            return -np.inf, zero
        ll, g, gW = self._likelihood_and_grad(unpacked)
        if not np.isfinite(ll):
            return -np.inf, zero
        lp = ll + lp_prior + lp_jac
        g += self._prior_jacobian_grad(x, unpacked)
        if self.layout.correlation.has_effects and self.layout.n:
            try:
                lp_w, g_w, gW_prior = self._effects_prior_and_grad(x, unpacked)
            except NonPositiveDefiniteError:
                self.non_pd_count += 1
                return -np.inf, zero
            lp += lp_w
            g += g_w
            gW = gW + gW_prior
            self._chain_effects(g, gW)
        if not np.isfinite(lp) or not np.all(np.isfinite(g)):
            return -np.inf, zero
        return float(lp), g

    def log_density(self, x: np.ndarray) -> float:
        return self.log_density_and_grad(x)[0]

    def first_nonfinite_term(self, x: np.ndarray) -> Optional[str]:
        """Name of the first component that is not finite at ``x``."""
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            return "state"
        unpacked = self.unpack(x)
        if not np.isfinite(self.log_jacobian(x)):
            return "log_jacobian"
        if not np.isfinite(
            log_prior(unpacked.theta_t, unpacked.theta_w, self.prior, self.layout.correlation, self.layout.mixture)
        ):
            return "log_prior"
        if not np.isfinite(self._likelihood_and_grad(unpacked)[0]):
            return "log_likelihood"
        if self.layout.correlation.has_effects and self.layout.n:
            try:
                lp_w = self._effects_prior_and_grad(x, unpacked)[0]
            except NonPositiveDefiniteError:
                return "effects_prior (Omega not positive definite)"
            if not np.isfinite(lp_w):
                return "effects_prior"
        return None

    def pointwise_log_lik(self, values: np.ndarray) -> np.ndarray:
        """Per-unit log likelihood (conditional on effects) for a constrained draw row."""
        u = self.from_constrained(values)
        data = self.data
        t = u.theta_t
        X = data.design_matrix
        m1 = t.mu1 + X @ t.beta1
        m2 = t.mu2 + X @ t.beta2
        if self.layout.n:
            W = u.effects.matrix
            m1 = m1 + W[data.loc_index, 0]
            m2 = m2 + W[data.loc_index, 1]
        v1, _, _ = mode1_terms(data.log_time, m1, t.xi1, data.delta1, self.family)
        t2 = mode2_terms(data.log_time, m2, t.xi21, t.xi22, t.eta, t.lam, data.delta2, self.family)
        return v1 + t2.value


# --- Functional API --- #

_MODEL_CACHE: Dict[Tuple[int, str], PosteriorModel] = {}


def model_for(data: Dataset, config: ModelConfig) -> PosteriorModel:
    key = (id(data), config.model_dump_json())
    model = _MODEL_CACHE.get(key)
    if model is None or model.data is not data:
        if len(_MODEL_CACHE) > 16:
            _MODEL_CACHE.clear()
        model = _MODEL_CACHE[key] = PosteriorModel(data, config)
    return model


def log_posterior(state: np.ndarray, data: Dataset, config: ModelConfig) -> float:
    return model_for(data, config).log_density(state)


def grad_log_posterior(state: np.ndarray, data: Dataset, config: ModelConfig) -> np.ndarray:
    return model_for(data, config).log_density_and_grad(state)[1]


# --- Proper prior block as its own target --- #


class SpatialPriorTarget:
    """The (nu, kappa) prior on the unconstrained scale, for prior-only sampling."""

    def __init__(self, prior: PriorConfig, correlation: CorrelationKind = CorrelationKind.PEXP):
        correlation = CorrelationKind(correlation)
        if not correlation.spatial:
            raise ValueError("prior-only target needs a spatial correlation family")
        self.prior = prior
        self.has_kappa = correlation is CorrelationKind.PEXP

    @property
    def dim(self) -> int:
        return 2 if self.has_kappa else 1

    @property
    def names(self) -> List[str]:
        return ["nu", "kappa"] if self.has_kappa else ["nu"]

    def constrain(self, x: np.ndarray) -> np.ndarray:
        out = [np.exp(x[0])]
        if self.has_kappa:
            out.append(2.0 * special.expit(x[1]))
        return np.asarray(out)

    def log_density_and_grad(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        a, b, c, d = self.prior.a, self.prior.b, self.prior.c, self.prior.d
        nu = np.exp(x[0])
        lp = a * np.log(b) - special.gammaln(a) - a * x[0] - b / nu
        grad = [-a + b / nu]
        if self.has_kappa:
            half = special.expit(x[1])
            lp += c * _log_sigmoid(x[1]) + d * _log_sigmoid(-x[1]) - special.betaln(c, d)
            grad.append(c * (1.0 - half) - d * half)
        return float(lp), np.asarray(grad)

    def log_density(self, x: np.ndarray) -> float:
        return self.log_density_and_grad(x)[0]

    def first_nonfinite_term(self, x: np.ndarray) -> Optional[str]:
        return None if np.isfinite(self.log_density(x)) else "log_prior"
