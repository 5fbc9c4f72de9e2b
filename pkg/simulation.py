"""Synthetic competing-risks data on a d x d grid and the parameter-recovery study."""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog
from scipy import integrate

from data_model import Dataset, build_dataset
from diagnostics import RHAT_CUTOFF, convergence_report
from distributions import cdf_mode1, log_pdf_mode1, log_survival_mode1, sample_mode1
from errors import ConfigError
from observability import init_observability
from sampler import run_chains, summarize
from schemas import CorrelationKind, EventType, Family, GridSpec, ModelConfig, SamplerConfig, SimConfig, SimTruth
from spatial import CorrelationFamily, cholesky_jittered, correlation_matrix, distance_matrix

logger = structlog.get_logger(__name__)

_DAYS_PER_YEAR = 365.25
COVARIATE_NAMES = ("x1", "x2")


@dataclass
class SimulationResult:
    dataset: Dataset
    effects: np.ndarray  # (d*d, 2), one row per grid cell in row-major order
    cells: np.ndarray
    latent: np.ndarray  # (N, 2) uncensored latent times
    censor: np.ndarray
    regenerations: int


# --- Pieces --- #


def censoring_times(config: SimConfig, size: int, rng: np.random.Generator) -> np.ndarray:
    """Years from a uniform daily start date to the end of the study."""
    lo, hi = config.start_window
    start_days = rng.integers(0, (hi - lo).days + 1, size=size)
    return ((config.end_date - lo).days - start_days) / _DAYS_PER_YEAR


def binary_covariates(size: int, rng: np.random.Generator) -> np.ndarray:
    """N x 3 independent Bernoulli(0.5) draws with the last column dropped."""
    return rng.binomial(1, 0.5, size=(size, 3))[:, :2].astype(float)


def effects_cholesky(truth: SimTruth) -> np.ndarray:
    """Lower factor of Sigma_f; valid with zero variances."""
    s1, s2, rho = np.sqrt(truth.sigma1_sq), np.sqrt(truth.sigma2_sq), truth.rho12
    return np.array([[s1, 0.0], [rho * s2, s2 * np.sqrt(1.0 - rho**2)]])


def draw_effects(truth: SimTruth, grid: GridSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Effects for every grid cell from MVN(0, Sigma_f (x) Omega)."""
    cells = np.array([(r, c) for r in range(grid.n_rows) for c in range(grid.n_cols)], dtype=np.int64)
    omega = correlation_matrix(distance_matrix(cells, grid), CorrelationFamily(CorrelationKind.PEXP, truth.nu, truth.kappa))
    chol_o = cholesky_jittered(omega)
    Z = rng.standard_normal((cells.shape[0], 2))
    return chol_o @ Z @ effects_cholesky(truth).T, cells


def _meets_thresholds(config: SimConfig, loc: np.ndarray, event: np.ndarray, n_cells: int) -> bool:
    for mode in (EventType.MODE1, EventType.MODE2):
        counts = np.bincount(loc[event == mode], minlength=n_cells)
        if not (np.mean(counts >= 1) > config.min_frac_one_failure and np.mean(counts >= 2) > config.min_frac_two_failures):
            return False
    return True


# --- Generator --- #


def simulate(config: SimConfig) -> SimulationResult:
    """One dataset from the study design, regenerated until enough locations see failures."""
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    truth = config.truth
    grid = GridSpec(n_rows=config.grid_side, n_cols=config.grid_side)
    n_cells = grid.n_rows * grid.n_cols
    beta1, beta2 = np.asarray(truth.beta1), np.asarray(truth.beta2)
    if beta1.size != len(COVARIATE_NAMES):
        raise ConfigError(f"truth must have {len(COVARIATE_NAMES)} coefficients per mode, got {beta1.size}")

    for attempt in range(config.max_regenerations):
        W, cells = draw_effects(truth, grid, rng)
        X = binary_covariates(config.n_units, rng)
        loc = rng.integers(0, n_cells, size=config.n_units)
        censor = censoring_times(config, config.n_units, rng)
        t1 = sample_mode1(truth.mu1 + X @ beta1 + W[loc, 0], truth.xi1, Family.WEIBULL, rng)
        t2 = sample_mode1(truth.mu2 + X @ beta2 + W[loc, 1], truth.xi2, Family.WEIBULL, rng)
        time = np.minimum(np.minimum(t1, t2), censor)
        event = np.where(time == censor, EventType.CENSORED, np.where(t1 <= t2, EventType.MODE1, EventType.MODE2))
        if _meets_thresholds(config, loc, event, n_cells):
            break
        logger.debug("Regenerating dataset", attempt=attempt + 1)
    else:
        raise ConfigError(
            f"no dataset met the failure thresholds in {config.max_regenerations} attempts; increase n_units"
        )

    zeros = np.zeros(config.n_units, dtype=np.int64)
    dataset = build_dataset(
        unit_id=[f"u{j:06d}" for j in range(config.n_units)],
        row=cells[loc, 0],
        col=cells[loc, 1],
        cage=zeros,
        slot=zeros,
        node=zeros,
        time=time,
        event=event,
        grid=grid,
        design_matrix=X,
        covariate_names=COVARIATE_NAMES,
    )
    logger.info(
        "Simulated dataset",
        units=config.n_units,
        grid_side=config.grid_side,
        regenerations=attempt,
        **dataset.event_counts(),
    )
    return SimulationResult(dataset, W, cells, np.column_stack([t1, t2]), censor, attempt)


def write_truth(result: SimulationResult, config: SimConfig, path: Union[str, Path]) -> Path:
    """JSON sidecar with the generating parameters and the realised effects."""
    path = Path(path)
    record = {
        "seed": config.seed,
        "truth": config.truth.model_dump(mode="json"),
        "scalar_params": config.truth.scalar_params(),
        "grid": result.dataset.grid.model_dump(),
        "regenerations": result.regenerations,
        "effects": [
            {"row": int(r), "col": int(c), "w1": float(w[0]), "w2": float(w[1])}
            for (r, c), w in zip(result.cells, result.effects)
        ],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# --- Marginal oracle --- #


def event_probabilities(config: SimConfig, n_time: int = 4001, n_quad: int = 20) -> Dict[str, float]:
    """P(mode-1 event) and P(mode-2 event) under the truth, integrating out effects and censoring.

    Effects use Gauss-Hermite quadrature on N(0, Sigma_f); the censoring time is
    treated as continuous uniform over the start window.
    """
    truth = config.truth
    lo, hi = config.start_window
    c_lo = (config.end_date - hi).days / _DAYS_PER_YEAR
    c_hi = (config.end_date - lo).days / _DAYS_PER_YEAR
    t = np.linspace(c_hi * 1e-6, c_hi, n_time)
    at_risk = np.clip((c_hi - t) / max(c_hi - c_lo, 1e-12), 0.0, 1.0)

    nodes, weights = np.polynomial.hermite_e.hermegauss(n_quad)
    weights = weights / weights.sum()
    L = effects_cholesky(truth)
    z1, z2 = np.meshgrid(nodes, nodes, indexing="ij")
    w_pairs = np.column_stack([z1.ravel(), z2.ravel()]) @ L.T
    w_weight = np.outer(weights, weights).ravel()

    beta1, beta2 = np.asarray(truth.beta1), np.asarray(truth.beta2)
    out = {"mode1": 0.0, "mode2": 0.0}
    for x in ((0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)):
        m1 = truth.mu1 + float(np.dot(x, beta1)) + w_pairs[:, 0]
        m2 = truth.mu2 + float(np.dot(x, beta2)) + w_pairs[:, 1]
        tt = t[:, None]
        f1 = np.exp(log_pdf_mode1(tt, m1[None, :], truth.xi1, Family.WEIBULL))
        f2 = np.exp(log_pdf_mode1(tt, m2[None, :], truth.xi2, Family.WEIBULL))
        s1 = np.exp(log_survival_mode1(tt, m1[None, :], truth.xi1, Family.WEIBULL))
        s2 = np.exp(log_survival_mode1(tt, m2[None, :], truth.xi2, Family.WEIBULL))
        p1 = integrate.trapezoid(f1 * s2 * at_risk[:, None], t, axis=0)
        p2 = integrate.trapezoid(f2 * s1 * at_risk[:, None], t, axis=0)
        out["mode1"] += 0.25 * float(p1 @ w_weight)
        out["mode2"] += 0.25 * float(p2 @ w_weight)
    return out


def mode1_event_probability(config: SimConfig) -> float:
    return event_probabilities(config)["mode1"]


def conditional_cdf(result: SimulationResult, truth: SimTruth, mode: int):
    """Per-unit cdf of the latent mode-k time given covariates and effects (for KS checks)."""
    data = result.dataset
    loc = data.loc_index
    cell = data.locations[loc, 0] * data.grid.n_cols + data.locations[loc, 1]
    beta = np.asarray(truth.beta1 if mode == 1 else truth.beta2)
    mu = (truth.mu1 if mode == 1 else truth.mu2) + data.design_matrix @ beta + result.effects[cell, mode - 1]
    xi = truth.xi1 if mode == 1 else truth.xi2
    return lambda t: cdf_mode1(t, mu, xi, Family.WEIBULL)


# --- Recovery study --- #


STUDY_MODEL = ModelConfig(family=Family.WEIBULL, correlation=CorrelationKind.PEXP, mixture=False)


def recovery_metrics(estimates: pd.DataFrame, truth: Dict[str, float]) -> pd.DataFrame:
    """Per-parameter RRMSE, relative bias, mean posterior sd, CI coverage and length.

    ``estimates`` has one row per (replicate, param) with mean, sd, q025, q975.
    Relative metrics are NaN when the true value is zero.
    """
    rows = []
    for param, group in estimates.groupby("param", sort=False):
        if param not in truth:
            continue
        value = truth[param]
        err = group["mean"].to_numpy() - value
        scale = abs(value) if value != 0 else np.nan
        rows.append(
            {
                "param": param,
                "truth": value,
                "rrmse": float(np.sqrt(np.mean(err**2)) / scale),
                "rel_bias": float(np.mean(err) / value) if value != 0 else np.nan,
                "sd": float(group["sd"].mean()),
                "coverage": float(np.mean((group["q025"] <= value) & (value <= group["q975"]))),
                "ci_length": float(np.mean(group["q975"] - group["q025"])),
                "replicates": int(len(group)),
            }
        )
    return pd.DataFrame(rows)


def replicate_seed(master: int, cell: int, replicate: int, attempt: int = 0) -> int:
    return int(np.random.SeedSequence([master, cell, replicate, attempt]).generate_state(1, np.uint64)[0]) >> 1


def _fit_replicate(args) -> Optional[pd.DataFrame]:
    sim_config, sampler_config, cell, replicate, master, log_level, log_format = args
    init_observability(log_level, log_format)
    with structlog.contextvars.bound_contextvars(cell=cell, replicate=replicate):
        for dataset_attempt in range(3):
            seed = replicate_seed(master, cell, replicate, 2 * dataset_attempt)
            data = simulate(sim_config.model_copy(update={"seed": seed})).dataset
            for rerun in range(2):
                fit_seed = replicate_seed(master, cell, replicate, 2 * dataset_attempt + rerun + 1)
                config = sampler_config.model_copy(update={"seed": fit_seed, "store_log_lik": False})
                draws = run_chains(data, STUDY_MODEL, config, threads=1)
                report = convergence_report(draws)
                if report.converged:
                    table = summarize(draws)
                    table.insert(0, "replicate", replicate)
                    return table
                logger.warning("Replicate did not converge", max_rhat=report.max_rhat, cutoff=RHAT_CUTOFF, rerun=rerun)
            logger.warning("Replacing dataset", attempt=dataset_attempt + 1)
    logger.error("Replicate abandoned")
    return None


def run_recovery_study(
    n_units_levels: Sequence[int],
    grid_sides: Sequence[int],
    replicates: int,
    sampler_config: SamplerConfig,
    sim_config: Optional[SimConfig] = None,
    threads: int = 1,
    log_level: str = "INFO",
    log_format: str = "console",
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Fit every (N, d, replicate) and aggregate recovery metrics per cell and parameter.

    Returns (per-replicate estimates, metrics). Replicates run in worker processes
    when ``threads > 1``; each has its own seed so results do not depend on it.
    """
    sim_config = sim_config or SimConfig()
    master = sim_config.seed
    jobs = []
    cells: List[Tuple[int, int]] = []
    for n_units in n_units_levels:
        for side in grid_sides:
            cell = len(cells)
            cells.append((n_units, side))
            base = sim_config.model_copy(update={"n_units": n_units, "grid_side": side})
            for rep in range(replicates):
                jobs.append((base, sampler_config, cell, rep, master, log_level, log_format))

    logger.info("Starting recovery study", cells=len(cells), replicates=replicates, jobs=len(jobs))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_fit_replicate, jobs))
    else:
        results = [_fit_replicate(job) for job in jobs]

    truth = sim_config.truth.scalar_params()
    estimates: List[pd.DataFrame] = []
    metrics: List[pd.DataFrame] = []
    for cell, (n_units, side) in enumerate(cells):
        tables = [r for job, r in zip(jobs, results) if job[2] == cell and r is not None]
        if not tables:
            logger.warning("No converged replicates", n_units=n_units, grid_side=side)
            continue
        cell_est = pd.concat(tables, ignore_index=True)
        cell_est.insert(0, "grid_side", side)
        cell_est.insert(0, "n_units", n_units)
        estimates.append(cell_est)
        cell_metrics = recovery_metrics(cell_est, truth)
        cell_metrics.insert(0, "grid_side", side)
        cell_metrics.insert(0, "n_units", n_units)
        metrics.append(cell_metrics)
    estimates_frame = pd.concat(estimates, ignore_index=True) if estimates else pd.DataFrame()
    metrics_frame = pd.concat(metrics, ignore_index=True) if metrics else pd.DataFrame()
    return estimates_frame, metrics_frame
