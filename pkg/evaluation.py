"""Post-fit analysis: residuals, Kaplan-Meier, PSIS-LOO, marginal correlations, failure maps."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog
from scipy import optimize, special

from data_model import Dataset
from distributions import ThetaT, log_pdf_mode1, log_pdf_mode2, log_survival_mode1, log_survival_mode2
from errors import BoundingBoxError
from posterior import PosteriorModel, ThetaW, Unpacked
from schemas import CorrelationKind, EventType, Family, GridSpec, ModelConfig
from spatial import CorrelationFamily, correlation_matrix, distance_matrix, sigma_f

logger = structlog.get_logger(__name__)

PARETO_K_WARN = 0.7


# --------------------------------------------------------------------------- #
# Residuals
# --------------------------------------------------------------------------- #


def residual_from_cdf(F):
    """-log(1 - F); zero when F is zero."""
    return -np.log1p(-np.asarray(F, dtype=float))


@dataclass
class ResidualSet:
    residual: np.ndarray  # (units, 2), columns are modes
    event: np.ndarray

    def mode(self, k: int) -> np.ndarray:
        return self.residual[:, k - 1]

    def to_frame(self, unit_id: Sequence[str]) -> pd.DataFrame:
        return pd.DataFrame(
            {"unit_id": unit_id, "event": self.event, "r_mode1": self.residual[:, 0], "r_mode2": self.residual[:, 1]}
        )


def plug_in(fit, model: PosteriorModel) -> Unpacked:
    """Parameters at the posterior mean of a draws object, or at a constrained vector."""
    values = fit.posterior_mean() if hasattr(fit, "posterior_mean") else np.asarray(fit, dtype=float)
    return model.from_constrained(values)


def residuals(fit, data: Dataset, model_config: ModelConfig) -> ResidualSet:
    """Cox-Snell style residuals r = -log(1 - F_hat(t)) per unit and mode at the plug-in fit."""
    model = PosteriorModel(data, model_config)
    u = plug_in(fit, model)
    t = u.theta_t
    X = data.design_matrix
    m1 = t.mu1 + X @ t.beta1
    m2 = t.mu2 + X @ t.beta2
    if model.layout.n:
        W = u.effects.matrix
        m1 = m1 + W[data.loc_index, 0]
        m2 = m2 + W[data.loc_index, 1]
    family = Family(model_config.family)
    r1 = -np.asarray(log_survival_mode1(data.time, m1, t.xi1, family))
    r2 = -np.asarray(log_survival_mode2(data.time, m2, m2 + t.eta, t.xi21, t.xi22, t.lam, family))
    return ResidualSet(residual=np.column_stack([r1, r2]), event=np.asarray(data.event))


def probability_plot(res: ResidualSet, mode: int) -> pd.DataFrame:
    """Weibull probability-plot coordinates of mode-k residuals.

    Units failing from another mode, or censored, are censored residuals. The
    unit-exponential reference is the line plot_position = log_residual.
    """
    r = res.mode(mode)
    failed = res.event == mode
    km = kaplan_meier(r, failed)
    table = km.table
    if table.empty:
        return pd.DataFrame(columns=["log_residual", "plot_position"])
    surv = table["survival"].to_numpy()
    prev = np.concatenate([[1.0], surv[:-1]])
    p = 1.0 - 0.5 * (prev + surv)
    with np.errstate(divide="ignore"):
        frame = pd.DataFrame(
            {"log_residual": np.log(table["time"].to_numpy()), "plot_position": np.log(-np.log1p(-p))}
        )
    return frame[np.isfinite(frame["log_residual"]) & np.isfinite(frame["plot_position"])].reset_index(drop=True)


# --------------------------------------------------------------------------- #
# Kaplan-Meier
# --------------------------------------------------------------------------- #


@dataclass
class KaplanMeier:
    table: pd.DataFrame  # time, at_risk, events, survival at each distinct event time

    def survival_at(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.table.empty:
            return np.ones_like(t)
        times = self.table["time"].to_numpy()
        surv = self.table["survival"].to_numpy()
        idx = np.searchsorted(times, t, side="right") - 1
        return np.where(idx >= 0, surv[np.maximum(idx, 0)], 1.0)

    def pmf(self, bins: Union[int, Sequence[float]] = 20, upper: Optional[float] = None) -> pd.DataFrame:
        """Mass S(a) - S(b) in equal-width bins [a, b)."""
        if np.ndim(bins) == 0:
            top = upper if upper is not None else (self.table["time"].max() if not self.table.empty else 1.0)
            edges = np.linspace(0.0, float(top), int(bins) + 1)
        else:
            edges = np.asarray(bins, dtype=float)
        s = self.survival_at(edges)
        return pd.DataFrame({"bin_start": edges[:-1], "bin_end": edges[1:], "mass": s[:-1] - s[1:]})


def kaplan_meier(times, indicators) -> KaplanMeier:
    """Product-limit estimate; ``indicators`` is 1 for an event, 0 for censoring."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(indicators).astype(bool)
    n = times.size
    event_times = np.unique(times[events])
    if event_times.size == 0:
        return KaplanMeier(pd.DataFrame(columns=["time", "at_risk", "events", "survival"]))
    sorted_times = np.sort(times)
    at_risk = n - np.searchsorted(sorted_times, event_times, side="left")
    sorted_events = np.sort(times[events])
    d = np.searchsorted(sorted_events, event_times, side="right") - np.searchsorted(
        sorted_events, event_times, side="left"
    )
    survival = np.cumprod(1.0 - d / at_risk)
    table = pd.DataFrame({"time": event_times, "at_risk": at_risk, "events": d, "survival": survival})
    return KaplanMeier(table)


def kaplan_meier_by_mode(data: Dataset, mode: int) -> KaplanMeier:
    """Per-mode KM; the other mode's failures count as censored."""
    return kaplan_meier(data.time, data.event == mode)


# --------------------------------------------------------------------------- #
# PSIS-LOO
# --------------------------------------------------------------------------- #


def _gpdfit(ary: np.ndarray) -> Tuple[float, float]:
    """Generalized Pareto fit to sorted exceedances (empirical Bayes estimate of k, sigma)."""
    prior_bs = 3
    prior_k = 10
    n = len(ary)
    m_est = 30 + int(n**0.5)

    b_ary = 1 - np.sqrt(m_est / (np.arange(1, m_est + 1, dtype=float) - 0.5))
    b_ary /= prior_bs * ary[int(n / 4 + 0.5) - 1]
    b_ary += 1 / ary[-1]

    k_ary = np.log1p(-b_ary[:, None] * ary).mean(axis=1)
    len_scale = n * (np.log(-(b_ary / k_ary)) - k_ary - 1)
    weights = 1 / np.exp(len_scale - len_scale[:, None]).sum(axis=1)

    # remove negligible weights
    real_idxs = weights >= 10 * np.finfo(float).eps
    if not np.all(real_idxs):
        weights = weights[real_idxs]
        b_ary = b_ary[real_idxs]
    weights /= weights.sum()

    b_post = np.sum(b_ary * weights)
    k_post = np.log1p(-b_post * ary).mean()
    sigma = -k_post / b_post
    # weakly informative prior shrinking k toward 0.5
    k_post = (n * k_post + prior_k * 0.5) / (n + prior_k)
    return float(k_post), float(sigma)


def _gpinv(probs: np.ndarray, kappa: float, sigma: float) -> np.ndarray:
    x = np.full_like(probs, np.nan)
    if sigma <= 0:
        return x
    if np.abs(kappa) < np.finfo(float).eps:
        x = -np.log1p(-probs)
    else:
        x = np.expm1(-kappa * np.log1p(-probs)) / kappa
    return x * sigma


def psis_smooth(log_weights: np.ndarray, r_eff: float = 1.0) -> Tuple[np.ndarray, float]:
    """Pareto-smoothed, normalised log weights for one unit and the tail shape k."""
    x = np.array(log_weights, dtype=float)
    n_samples = x.size
    if np.ptp(x) == 0:
        return np.full(n_samples, -np.log(n_samples)), 0.0
    tail_len = int(np.ceil(min(0.2 * n_samples, 3 * np.sqrt(n_samples / r_eff))))
    cutoff_ind = -tail_len - 1
    cutoffmin = np.log(np.finfo(float).tiny)

    x -= np.max(x)
    x_sort_ind = np.argsort(x)
    xcutoff = max(x[x_sort_ind[cutoff_ind]], cutoffmin)
    expxcutoff = np.exp(xcutoff)
    (tailinds,) = np.where(x > xcutoff)
    x_tail = x[tailinds]
    n_tail = len(x_tail)
    if n_tail <= 4:
        k = np.inf
    else:
        x_tail_si = np.argsort(x_tail)
        x_tail = np.exp(x_tail) - expxcutoff
        k, sigma = _gpdfit(x_tail[x_tail_si])
        if np.isfinite(k):
            sti = np.arange(0.5, n_tail) / n_tail
            smoothed_tail = np.log(_gpinv(sti, k, sigma) + expxcutoff)
            x[tailinds[x_tail_si]] = smoothed_tail
            x[x > 0] = 0
    x -= special.logsumexp(x)
    return x, float(k)


@dataclass
class LooResult:
    elpd_i: np.ndarray
    pareto_k: np.ndarray
    lppd_i: np.ndarray

    @property
    def elpd_loo(self) -> float:
        return float(np.sum(self.elpd_i))

    @property
    def se(self) -> float:
        n = self.elpd_i.size
        return float(np.sqrt(n * np.var(self.elpd_i))) if n else 0.0

    @property
    def p_loo(self) -> float:
        return float(np.sum(self.lppd_i) - self.elpd_loo)

    @property
    def looic(self) -> float:
        return -2.0 * self.elpd_loo

    @property
    def flagged(self) -> np.ndarray:
        return np.nonzero(self.pareto_k > PARETO_K_WARN)[0]

    def summary(self) -> Dict[str, float]:
        return {
            "elpd_loo": self.elpd_loo,
            "se": self.se,
            "p_loo": self.p_loo,
            "looic": self.looic,
            "n_high_k": int(self.flagged.size),
        }

    def to_frame(self, unit_id: Optional[Sequence[str]] = None) -> pd.DataFrame:
        frame = pd.DataFrame({"elpd_loo": self.elpd_i, "pareto_k": self.pareto_k})
        frame.insert(0, "unit_id", unit_id if unit_id is not None else np.arange(self.elpd_i.size))
        return frame


def psis_loo(log_lik: np.ndarray, r_eff: float = 1.0) -> LooResult:
    """PSIS-LOO from a (draws, units) pointwise log-likelihood matrix."""
    log_lik = np.asarray(log_lik, dtype=float)
    n_draws, n_units = log_lik.shape
    elpd = np.empty(n_units)
    ks = np.empty(n_units)
    for j in range(n_units):
        lw, ks[j] = psis_smooth(-log_lik[:, j], r_eff)
        elpd[j] = special.logsumexp(lw + log_lik[:, j])
    lppd = special.logsumexp(log_lik, axis=0) - np.log(n_draws)
    result = LooResult(elpd_i=elpd, pareto_k=ks, lppd_i=lppd)
    if result.flagged.size:
        logger.warning("Pareto k above threshold", units=int(result.flagged.size), threshold=PARETO_K_WARN)
    return result


def loo(draws, r_eff: float = 1.0) -> LooResult:
    """PSIS-LOO of a PosteriorDraws with stored pointwise log likelihoods."""
    return psis_loo(draws.flat_log_lik(), r_eff)


def compare_loo(results: Dict[str, LooResult]) -> pd.DataFrame:
    rows = [{"model": name, **res.summary()} for name, res in results.items()]
    frame = pd.DataFrame(rows).sort_values("looic", kind="mergesort").reset_index(drop=True)
    frame["delta_looic"] = frame["looic"] - frame["looic"].iloc[0]
    return frame


# --------------------------------------------------------------------------- #
# Marginal correlations of failure times
# --------------------------------------------------------------------------- #

_BOX_PROBS = (0.0005, 0.9995)
_WIDE_BOX_PROBS = (0.00005, 0.99995)
# outside mass tolerated before widening: nominal 0.1% with room for Monte Carlo error
_COVERAGE_TOL = 0.0015
_CHUNK = 4096


@dataclass(frozen=True)
class PointFit:
    theta_t: ThetaT
    theta_w: ThetaW
    family: Family
    omega: np.ndarray
    locations: np.ndarray

    @classmethod
    def from_draws(cls, draws, data: Dataset, model_config: ModelConfig) -> "PointFit":
        model = PosteriorModel(data, model_config)
        u = plug_in(draws, model)
        return cls.from_params(u.theta_t, u.theta_w or ThetaW(1e-8, 1e-8, 0.0), model_config, data.locations, data.grid)

    @classmethod
    def from_params(
        cls, theta_t: ThetaT, theta_w: ThetaW, model_config: ModelConfig, locations: np.ndarray, grid: GridSpec
    ) -> "PointFit":
        corr = CorrelationKind(model_config.correlation)
        family = CorrelationFamily(corr, theta_w.nu, theta_w.kappa) if corr.spatial else None
        omega = correlation_matrix(distance_matrix(locations, grid), family)
        return cls(theta_t, theta_w, Family(model_config.family), omega, np.asarray(locations))


def _log_density(fit: PointFit, mode: int, t: np.ndarray, loc: np.ndarray) -> np.ndarray:
    """(len(t), len(loc)) conditional log densities of the mode-k time."""
    th = fit.theta_t
    tt = t[:, None]
    if mode == 1:
        return log_pdf_mode1(tt, loc[None, :], th.xi1, fit.family)
    return log_pdf_mode2(tt, loc[None, :], loc[None, :] + th.eta, th.xi21, th.xi22, th.lam, fit.family)


def _cdf(fit: PointFit, mode: int, t: float, loc: np.ndarray) -> float:
    th = fit.theta_t
    if mode == 1:
        ls = log_survival_mode1(t, loc, th.xi1, fit.family)
    else:
        ls = log_survival_mode2(t, loc, loc + th.eta, th.xi21, th.xi22, th.lam, fit.family)
    return float(np.mean(-np.expm1(ls)))


def _marginal_quantile(fit: PointFit, mode: int, prob: float, loc: np.ndarray) -> float:
    scale = fit.theta_t.xi1 if mode == 1 else max(fit.theta_t.xi21, fit.theta_t.xi22)
    centre = float(np.mean(loc)) + (0.0 if mode == 1 else fit.theta_t.eta / 2.0)
    lo, hi = centre - 10 * scale, centre + 10 * scale + (0.0 if mode == 1 else fit.theta_t.eta)
    f = lambda y: _cdf(fit, mode, np.exp(y), loc) - prob  # noqa: E731
    while f(lo) > 0:
        lo -= 10 * scale
    while f(hi) < 0:
        hi += 10 * scale
    return float(np.exp(optimize.brentq(f, lo, hi, xtol=1e-10)))


def _box(fit: PointFit, mode: int, loc_fit: np.ndarray, loc_check: np.ndarray) -> Tuple[float, float]:
    """Time interval covering all but ~0.1% of the marginal, widened once if needed."""
    for probs in (_BOX_PROBS, _WIDE_BOX_PROBS):
        lo = _marginal_quantile(fit, mode, probs[0], loc_fit)
        hi = _marginal_quantile(fit, mode, probs[1], loc_fit)
        outside = 1.0 - (_cdf(fit, mode, hi, loc_check) - _cdf(fit, mode, lo, loc_check))
        if outside <= _COVERAGE_TOL:
            return lo, hi
        logger.info("Widening integration box", mode=mode, outside_mass=outside)
    raise BoundingBoxError(f"mode {mode}: {outside:.4%} of mass outside the integration box after widening")


def ratio_correlation(t1: np.ndarray, t2: np.ndarray, joint: np.ndarray, dens1: np.ndarray, dens2: np.ndarray) -> float:
    """Correlation from self-normalised moment estimates over uniform time draws."""
    e1 = np.sum(t1 * dens1) / np.sum(dens1)
    e11 = np.sum(t1 * t1 * dens1) / np.sum(dens1)
    e2 = np.sum(t2 * dens2) / np.sum(dens2)
    e22 = np.sum(t2 * t2 * dens2) / np.sum(dens2)
    e12 = np.sum(t1 * t2 * joint) / np.sum(joint)
    return float((e12 - e1 * e2) / np.sqrt((e11 - e1 * e1) * (e22 - e2 * e2)))


def _mc_correlation(
    fit: PointFit,
    modes: Tuple[int, int],
    loc_a: np.ndarray,
    loc_b: np.ndarray,
    box_a: Tuple[float, float],
    box_b: Tuple[float, float],
    n_r: int,
    rng: np.random.Generator,
    same_variable: bool = False,
) -> float:
    t_a = rng.uniform(box_a[0], box_a[1], n_r)
    t_b = t_a if same_variable else rng.uniform(box_b[0], box_b[1], n_r)
    dens_a = np.empty(n_r)
    dens_b = np.empty(n_r)
    joint = np.empty(n_r)
    for start in range(0, n_r, _CHUNK):
        sl = slice(start, start + _CHUNK)
        fa = np.exp(_log_density(fit, modes[0], t_a[sl], loc_a))
        dens_a[sl] = fa.mean(axis=1)
        if same_variable:
            dens_b[sl] = dens_a[sl]
            joint[sl] = dens_a[sl]
            continue
        fb = np.exp(_log_density(fit, modes[1], t_b[sl], loc_b))
        dens_b[sl] = fb.mean(axis=1)
        joint[sl] = (fa * fb).mean(axis=1)
    return ratio_correlation(t_a, t_b, joint, dens_a, dens_b)


def marginal_cross_mode_correlation(
    fit: PointFit, x: np.ndarray, n_l: int = 500, n_r: int = 50_000, seed: int = 0
) -> float:
    """Cor(T_1, T_2) for a unit with covariates ``x``, integrating out its location's effects."""
    rng = np.random.default_rng(seed)
    th, tw = fit.theta_t, fit.theta_w
    cov = sigma_f(tw.sigma1, tw.sigma2, tw.rho12)
    w = rng.multivariate_normal(np.zeros(2), cov, size=n_l, method="cholesky")
    w_check = rng.multivariate_normal(np.zeros(2), cov, size=n_l, method="cholesky")
    x = np.asarray(x, dtype=float)
    base1 = th.mu1 + float(x @ th.beta1)
    base2 = th.mu2 + float(x @ th.beta2)
    loc1, loc2 = base1 + w[:, 0], base2 + w[:, 1]
    box1 = _box(fit, 1, loc1, base1 + w_check[:, 0])
    box2 = _box(fit, 2, loc2, base2 + w_check[:, 1])
    return _mc_correlation(fit, (1, 2), loc1, loc2, box1, box2, n_r, rng)


def marginal_spatial_correlation(
    fit: PointFit,
    mode: int,
    i: int,
    i_star: int,
    x: np.ndarray,
    n_l: int = 500,
    n_r: int = 50_000,
    seed: int = 0,
    omega: Optional[float] = None,
) -> float:
    """Cor(T_ijk, T_i*jk) for units with covariates ``x`` at locations i and i*.

    ``omega`` overrides Omega[i, i*] (used to trace correlation against distance).
    """
    rng = np.random.default_rng(seed)
    th, tw = fit.theta_t, fit.theta_w
    sigma = tw.sigma1 if mode == 1 else tw.sigma2
    same = i == i_star and omega is None
    corr = 1.0 if same else float(fit.omega[i, i_star] if omega is None else omega)
    cov = sigma**2 * np.array([[1.0, corr], [corr, 1.0]])
    w = rng.multivariate_normal(np.zeros(2), cov, size=n_l, method="eigh")
    w_check = rng.normal(0.0, sigma, size=n_l)
    x = np.asarray(x, dtype=float)
    base = (th.mu1 + float(x @ th.beta1)) if mode == 1 else (th.mu2 + float(x @ th.beta2))
    loc_a, loc_b = base + w[:, 0], base + w[:, 1]
    box = _box(fit, mode, loc_a, base + w_check)
    return _mc_correlation(fit, (mode, mode), loc_a, loc_b, box, box, n_r, rng, same_variable=same)


def spatial_correlation_curve(
    fit: PointFit,
    mode: int,
    distances: Sequence[float],
    model_config: ModelConfig,
    x: np.ndarray,
    n_l: int = 500,
    n_r: int = 50_000,
    seed: int = 0,
) -> pd.DataFrame:
    corr = CorrelationKind(model_config.correlation)
    family = CorrelationFamily(corr, fit.theta_w.nu, fit.theta_w.kappa) if corr.spatial else None
    rows = []
    for d in distances:
        omega = 1.0 if d == 0 else (float(np.exp(-((d / family.nu) ** family.kappa))) if family else 0.0)
        value = marginal_spatial_correlation(fit, mode, 0, 0, x, n_l, n_r, seed, omega=omega)
        rows.append({"distance": float(d), "omega": omega, "correlation": value})
    return pd.DataFrame(rows)


# --------------------------------------------------------------------------- #
# Failure-proportion maps
# --------------------------------------------------------------------------- #


def failure_proportion_map(data: Dataset) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Per-cell failure proportions on the full grid plus row and column marginals.

    Cells with no units report NaN.
    """
    grid = data.grid
    cell = data.row * grid.n_cols + data.col
    size = grid.n_rows * grid.n_cols
    n = np.bincount(cell, minlength=size).astype(float)
    f1 = np.bincount(cell, weights=(data.event == EventType.MODE1), minlength=size)
    f2 = np.bincount(cell, weights=(data.event == EventType.MODE2), minlength=size)
    with np.errstate(invalid="ignore", divide="ignore"):
        cells = pd.DataFrame(
            {
                "row": np.repeat(np.arange(grid.n_rows), grid.n_cols),
                "col": np.tile(np.arange(grid.n_cols), grid.n_rows),
                "n_units": n.astype(int),
                "prop_mode1": np.where(n > 0, f1 / n, np.nan),
                "prop_mode2": np.where(n > 0, f2 / n, np.nan),
            }
        )
    margins = []
    for axis, key in (("row", data.row), ("col", data.col)):
        levels = grid.n_rows if axis == "row" else grid.n_cols
        m_n = np.bincount(key, minlength=levels).astype(float)
        m1 = np.bincount(key, weights=(data.event == EventType.MODE1), minlength=levels)
        m2 = np.bincount(key, weights=(data.event == EventType.MODE2), minlength=levels)
        with np.errstate(invalid="ignore", divide="ignore"):
            margins.append(
                pd.DataFrame(
                    {
                        "axis": axis,
                        "index": np.arange(levels),
                        "n_units": m_n.astype(int),
                        "prop_mode1": np.where(m_n > 0, m1 / m_n, np.nan),
                        "prop_mode2": np.where(m_n > 0, m2 / m_n, np.nan),
                    }
                )
            )
    return cells, pd.concat(margins, ignore_index=True)
