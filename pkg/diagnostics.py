"""Rank-normalised split R-hat and bulk/tail effective sample size."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import structlog
from scipy import special, stats

from schemas import ConvergenceReport, ParamDiagnostics

logger = structlog.get_logger(__name__)

RHAT_CUTOFF = 1.1
ESS_CUTOFF = 400.0


def _as_chains(chains) -> np.ndarray:
    ary = np.asarray(chains, dtype=float)
    if ary.ndim == 1:
        ary = ary[None, :]
    if ary.ndim != 2:
        raise ValueError("draws must be shaped (chains, draws)")
    return ary


def is_constant(chains) -> bool:
    ary = _as_chains(chains)
    return bool(np.all(ary == ary.flat[0])) or not np.all(np.isfinite(ary))


def split_chains(chains) -> np.ndarray:
    """Halve every chain; an odd middle draw is dropped."""
    ary = _as_chains(chains)
    half = ary.shape[1] // 2
    return np.vstack([ary[:, :half], ary[:, ary.shape[1] - half :]])


def rank_normalize(chains) -> np.ndarray:
    """Inverse-normal of pooled fractional ranks (r - 3/8) / (S + 1/4)."""
    ary = _as_chains(chains)
    size = ary.size
    ranks = stats.rankdata(ary, method="average").reshape(ary.shape)
    return special.ndtri((ranks - 0.375) / (size + 0.25))


def _rhat_classic(ary: np.ndarray) -> float:
    _, n = ary.shape
    chain_var = np.var(ary, axis=1, ddof=1)
    within = np.mean(chain_var)
    between = n * np.var(np.mean(ary, axis=1), ddof=1)
    return float(np.sqrt((n - 1) / n + between / (n * within)))


def rhat_bulk(chains) -> float:
    return _rhat_classic(rank_normalize(split_chains(chains)))


def rhat_tail(chains) -> float:
    ary = _as_chains(chains)
    folded = np.abs(ary - np.median(ary))
    return _rhat_classic(rank_normalize(split_chains(folded)))


def rhat(chains) -> float:
    """max(bulk, tail) rank-normalised split R-hat; NaN for constant draws."""
    ary = _as_chains(chains)
    if ary.shape[0] < 2 or ary.shape[1] < 4:
        raise ValueError("rhat needs at least 2 chains of 4 draws")
    if is_constant(ary):
        return float("nan")
    return max(rhat_bulk(ary), rhat_tail(ary))


def _autocov(ary: np.ndarray, lag: int) -> np.ndarray:
    """Per-chain autocovariance at one lag by direct summation (biased, 1/N)."""
    n = ary.shape[1]
    centred = ary - ary.mean(axis=1, keepdims=True)
    return np.einsum("ij,ij->i", centred[:, : n - lag], centred[:, lag:]) / n


def _ess_raw(ary: np.ndarray) -> float:
    """Geyer initial monotone sequence estimate over (already split) chains."""
    n_chain, n_draw = ary.shape
    if n_draw < 4 or is_constant(ary):
        return float("nan")

    acov0 = _autocov(ary, 0)
    chain_mean = ary.mean(axis=1)
    mean_var = np.mean(acov0) * n_draw / (n_draw - 1.0)
    var_plus = mean_var * (n_draw - 1.0) / n_draw
    if n_chain > 1:
        var_plus += np.var(chain_mean, ddof=1)

    def rho(lag: int) -> float:
        return 1.0 - (mean_var - np.mean(_autocov(ary, lag))) / var_plus

    rho_hat_t = np.zeros(n_draw)
    rho_hat_even = 1.0
    rho_hat_t[0] = rho_hat_even
    rho_hat_odd = rho(1)
    rho_hat_t[1] = rho_hat_odd

    # initial positive sequence
    t = 1
    while t < (n_draw - 3) and (rho_hat_even + rho_hat_odd) > 0.0:
        rho_hat_even = rho(t + 1)
        rho_hat_odd = rho(t + 2)
        if (rho_hat_even + rho_hat_odd) >= 0:
            rho_hat_t[t + 1] = rho_hat_even
            rho_hat_t[t + 2] = rho_hat_odd
        t += 2

    max_t = t - 2
    if rho_hat_even > 0:
        rho_hat_t[max_t + 1] = rho_hat_even

    # initial monotone sequence
    t = 1
    while t <= max_t - 2:
        if (rho_hat_t[t + 1] + rho_hat_t[t + 2]) > (rho_hat_t[t - 1] + rho_hat_t[t]):
            rho_hat_t[t + 1] = (rho_hat_t[t - 1] + rho_hat_t[t]) / 2.0
            rho_hat_t[t + 2] = rho_hat_t[t + 1]
        t += 2

    ess = n_chain * n_draw
    tau_hat = -1.0 + 2.0 * np.sum(rho_hat_t[: max_t + 1]) + np.sum(rho_hat_t[max_t + 1 : max_t + 2])
    tau_hat = max(tau_hat, 1.0 / np.log10(ess))
    return float(ess / tau_hat)


def ess_bulk(chains) -> float:
    ary = _as_chains(chains)
    if is_constant(ary):
        return float("nan")
    return _ess_raw(rank_normalize(split_chains(ary)))


def ess_tail(chains) -> float:
    """Minimum ESS of the 5% and 95% quantile indicators."""
    ary = _as_chains(chains)
    if is_constant(ary):
        return float("nan")
    values = []
    for prob in (0.05, 0.95):
        indicator = (ary <= np.quantile(ary, prob)).astype(float)
        values.append(_ess_raw(split_chains(indicator)))
    return float(np.nanmin(values)) if not np.all(np.isnan(values)) else float("nan")


def ess(chains, kind: str = "bulk") -> float:
    if kind == "bulk":
        return ess_bulk(chains)
    if kind == "tail":
        return ess_tail(chains)
    raise ValueError(f"unknown ESS kind {kind!r}")


def diagnose_param(name: str, chains) -> ParamDiagnostics:
    ary = _as_chains(chains)
    if is_constant(ary):
        return ParamDiagnostics(param=name, constant=True)
    r = rhat(ary) if ary.shape[0] >= 2 else None
    bulk, tail = ess_bulk(ary), ess_tail(ary)
    return ParamDiagnostics(
        param=name,
        rhat=r,
        ess_bulk=bulk,
        ess_tail=tail,
        rhat_flag=r is not None and r > RHAT_CUTOFF,
        ess_flag=min(bulk, tail) < ESS_CUTOFF,
    )


def convergence_report(draws, names: Optional[Sequence[str]] = None) -> ConvergenceReport:
    """Diagnostics for every named parameter of a PosteriorDraws (scalars by default)."""
    names = list(names) if names is not None else list(draws.scalar_names)
    params = [diagnose_param(name, draws.param(name)) for name in names]
    report = ConvergenceReport(params=params, rhat_cutoff=RHAT_CUTOFF, ess_cutoff=ESS_CUTOFF)
    flagged = [p.param for p in params if p.rhat_flag]
    low_ess = [p.param for p in params if p.ess_flag]
    if flagged:
        logger.warning("R-hat above cutoff", params=flagged, cutoff=RHAT_CUTOFF)
    if low_ess:
        logger.warning("ESS below threshold", params=low_ess, threshold=ESS_CUTOFF)
    return report
