"""Multi-chain Hamiltonian Monte Carlo with warmup adaptation.

Each transition builds a trajectory by repeated doubling (capped at
``max_tree_depth``) and draws the next state from it with multinomial weights,
stopping early on a U-turn or a divergence. Step size is tuned by dual
averaging and a diagonal inverse metric is estimated from warmup draws.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog
from structlog.contextvars import bound_contextvars

from data_model import Dataset
from diagnostics import diagnose_param
from errors import DataValidationError, InitializationError
from posterior import PosteriorModel
from schemas import ChainStats, ModelConfig, SamplerConfig, SamplerReport

logger = structlog.get_logger(__name__)

DIVERGENCE_WARN_RATE = 0.10


class LogDensity(Protocol):
    dim: int
    names: List[str]

    def log_density_and_grad(self, x: np.ndarray) -> Tuple[float, np.ndarray]: ...

    def constrain(self, x: np.ndarray) -> np.ndarray: ...

    def first_nonfinite_term(self, x: np.ndarray) -> Optional[str]: ...


# --- Draw container --- #


@dataclass
class PosteriorDraws:
    names: List[str]
    values: np.ndarray  # (chains, iters, params), constrained scale
    lp: np.ndarray  # (chains, iters)
    scalar_names: List[str] = field(default_factory=list)
    log_lik: Optional[np.ndarray] = None  # (chains, iters, units)
    accept_stat: Optional[np.ndarray] = None
    divergent: Optional[np.ndarray] = None
    tree_depth: Optional[np.ndarray] = None
    report: Optional[SamplerReport] = None

    def __post_init__(self) -> None:
        if not self.scalar_names:
            self.scalar_names = [n for n in self.names if not n.startswith(("w1[", "w2["))]
        self._index = {name: j for j, name in enumerate(self.names)}

    @property
    def n_chains(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_iters(self) -> int:
        return int(self.values.shape[1])

    def param(self, name: str) -> np.ndarray:
        """(chains, iters) draws of one parameter."""
        return self.values[:, :, self._index[name]]

    def has(self, name: str) -> bool:
        return name in self._index

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1, self.values.shape[2])

    def posterior_mean(self) -> np.ndarray:
        return self.flat().mean(axis=0)

    def flat_log_lik(self) -> np.ndarray:
        if self.log_lik is None:
            raise ValueError("pointwise log likelihood was not stored")
        return self.log_lik.reshape(-1, self.log_lik.shape[2])


# --- Adaptation --- #


class DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance."""

    def __init__(self, step_size: float, target: float, gamma: float = 0.05, t0: float = 10.0, kappa: float = 0.75):
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.restart(step_size)

    def restart(self, step_size: float) -> None:
        self.mu = math.log(10.0 * step_size)
        self.h_bar = 0.0
        self.log_eps_bar = 0.0
        self.t = 0

    def update(self, accept_stat: float) -> float:
        self.t += 1
        eta = 1.0 / (self.t + self.t0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_stat)
        log_eps = self.mu - math.sqrt(self.t) / self.gamma * self.h_bar
        weight = self.t ** (-self.kappa)
        self.log_eps_bar = weight * log_eps + (1.0 - weight) * self.log_eps_bar
        return math.exp(log_eps)

    @property
    def final_step_size(self) -> float:
        return math.exp(self.log_eps_bar)


class WelfordVariance:
    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def regularized(self) -> np.ndarray:
        var = self.m2 / max(self.n - 1, 1)
        n = self.n
        return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


def warmup_windows(warmup: int) -> Tuple[int, List[int]]:
    """Phase boundaries: returns (end of initial fast phase, ends of metric windows).

    Phases are 15% step size only, 75% metric windows (doubling from 25), 10%
    final step size only.
    """
    init_end = int(0.15 * warmup)
    final_len = int(0.10 * warmup)
    slow_end = warmup - final_len
    ends: List[int] = []
    start, size = init_end, 25
    while start < slow_end:
        end = start + size
        if end + 2 * size > slow_end:
            end = slow_end
        ends.append(end)
        start, size = end, size * 2
    return init_end, ends


# --- Trajectory --- #


@dataclass
class _State:
    x: np.ndarray
    rho: np.ndarray
    grad: np.ndarray
    logp: float


@dataclass
class _Tree:
    left: _State
    right: _State
    proposal: _State
    log_weight: float
    rho_sum: np.ndarray
    n_leapfrog: int
    accept_sum: float
    turning: bool = False
    divergent: bool = False


class _Integrator:
    def __init__(self, target: LogDensity, inv_metric: np.ndarray, step_size: float, max_energy_error: float):
        self.target = target
        self.inv_metric = inv_metric
        self.step_size = step_size
        self.max_energy_error = max_energy_error

    def kinetic(self, rho: np.ndarray) -> float:
        return 0.5 * float(np.dot(rho, self.inv_metric * rho))

    def leapfrog(self, state: _State, direction: int) -> _State:
        eps = direction * self.step_size
        rho = state.rho + 0.5 * eps * state.grad
        x = state.x + eps * self.inv_metric * rho
        logp, grad = self.target.log_density_and_grad(x)
        rho = rho + 0.5 * eps * grad
        return _State(x, rho, grad, logp)

    def is_turning(self, left: _State, right: _State, rho_sum: np.ndarray) -> bool:
        return (
            float(np.dot(rho_sum, self.inv_metric * left.rho)) <= 0
            or float(np.dot(rho_sum, self.inv_metric * right.rho)) <= 0
        )

    def build_tree(self, state: _State, depth: int, direction: int, h0: float, rng: np.random.Generator) -> _Tree:
        if depth == 0:
            new = self.leapfrog(state, direction)
            h = -new.logp + self.kinetic(new.rho) if np.isfinite(new.logp) else np.inf
            energy_error = h - h0
            if not np.isfinite(energy_error):
                energy_error = np.inf
            divergent = energy_error > self.max_energy_error
            accept = math.exp(min(0.0, -energy_error)) if np.isfinite(energy_error) else 0.0
            return _Tree(new, new, new, -energy_error, new.rho.copy(), 1, accept, divergent=divergent)

        inner = self.build_tree(state, depth - 1, direction, h0, rng)
        if inner.divergent or inner.turning:
            return inner
        edge = inner.right if direction > 0 else inner.left
        outer = self.build_tree(edge, depth - 1, direction, h0, rng)
        n_leapfrog = inner.n_leapfrog + outer.n_leapfrog
        accept_sum = inner.accept_sum + outer.accept_sum
        if outer.divergent or outer.turning:
            outer.n_leapfrog, outer.accept_sum = n_leapfrog, accept_sum
            return outer

        log_weight = np.logaddexp(inner.log_weight, outer.log_weight)
        proposal = inner.proposal
        if math.log(rng.uniform()) < outer.log_weight - log_weight:
            proposal = outer.proposal
        left, right = (inner.left, outer.right) if direction > 0 else (outer.left, inner.right)
        rho_sum = inner.rho_sum + outer.rho_sum
        turning = self.is_turning(left, right, rho_sum)
        return _Tree(left, right, proposal, log_weight, rho_sum, n_leapfrog, accept_sum, turning=turning)

    def transition(self, current: _State, max_depth: int, rng: np.random.Generator):
        rho = rng.standard_normal(current.x.shape[0]) / np.sqrt(self.inv_metric)
        start = _State(current.x, rho, current.grad, current.logp)
        h0 = -start.logp + self.kinetic(rho)
        left = right = proposal = start
        log_weight = 0.0
        rho_sum = rho.copy()
        n_leapfrog, accept_sum, divergent, depth = 0, 0.0, False, 0
        for depth in range(max_depth):
            direction = 1 if rng.uniform() < 0.5 else -1
            edge = right if direction > 0 else left
            sub = self.build_tree(edge, depth, direction, h0, rng)
            n_leapfrog += sub.n_leapfrog
            accept_sum += sub.accept_sum
            if sub.divergent:
                divergent = True
                break
            if sub.turning:
                break
            if direction > 0:
                right = sub.right
            else:
                left = sub.left
            # biased progressive sampling favours the newer subtree
            if math.log(rng.uniform()) < sub.log_weight - log_weight:
                proposal = sub.proposal
            log_weight = np.logaddexp(log_weight, sub.log_weight)
            rho_sum = rho_sum + sub.rho_sum
            if self.is_turning(left, right, rho_sum):
                break
        accept_stat = accept_sum / max(n_leapfrog, 1)
        return _State(proposal.x, proposal.rho, proposal.grad, proposal.logp), accept_stat, divergent, depth + 1


def find_reasonable_step_size(
    target: LogDensity, state: _State, inv_metric: np.ndarray, rng: np.random.Generator, step_size: float = 1.0
) -> float:
    integrator = _Integrator(target, inv_metric, step_size, np.inf)

    def log_accept(eps: float) -> float:
        integrator.step_size = eps
        rho = rng.standard_normal(state.x.shape[0]) / np.sqrt(inv_metric)
        start = _State(state.x, rho, state.grad, state.logp)
        new = integrator.leapfrog(start, 1)
        if not np.isfinite(new.logp):
            return -np.inf
        return (new.logp - integrator.kinetic(new.rho)) - (start.logp - integrator.kinetic(rho))

    direction = 1.0 if log_accept(step_size) > math.log(0.5) else -1.0
    for _ in range(100):
        la = log_accept(step_size)
        if direction > 0 and not la > math.log(0.5):
            break
        if direction < 0 and la > math.log(0.5):
            break
        step_size *= 2.0**direction
        if not 1e-10 < step_size < 1e7:
            break
    return float(np.clip(step_size, 1e-10, 1e7))


# --- Chains --- #


def initialize(
    target: LogDensity,
    rng: Union[np.random.Generator, int],
    radius: float = 2.0,
    attempts: int = 100,
) -> np.ndarray:
    """Uniform(-radius, radius) start with a finite log density, redrawn up to ``attempts`` times."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    first_term = None
    for _ in range(attempts):
        x = rng.uniform(-radius, radius, size=target.dim)
        logp, grad = target.log_density_and_grad(x)
        if np.isfinite(logp) and np.all(np.isfinite(grad)):
            return x
        if first_term is None:
            first_term = target.first_nonfinite_term(x) or "log_density"
    raise InitializationError(first_term or "log_density", attempts)


@dataclass
class ChainResult:
    chain: int
    values: np.ndarray
    unconstrained: np.ndarray
    lp: np.ndarray
    accept_stat: np.ndarray
    divergent: np.ndarray
    tree_depth: np.ndarray
    stats: ChainStats


def run_chain(target: LogDensity, config: SamplerConfig, seed: np.random.SeedSequence, chain: int) -> ChainResult:
    """Warm up and sample one chain; deterministic given ``seed``."""
    rng = np.random.default_rng(seed)
    with bound_contextvars(chain=chain):
        non_pd_start = getattr(target, "non_pd_count", 0)
        x = initialize(target, rng, config.init_radius, config.max_init_attempts)
        logp, grad = target.log_density_and_grad(x)
        state = _State(x, np.zeros_like(x), grad, logp)
        dim = target.dim
        inv_metric = np.ones(dim)
        step_size = find_reasonable_step_size(target, state, inv_metric, rng)
        adapter = DualAveraging(step_size, config.target_accept)
        init_end, window_ends = warmup_windows(config.warmup_iters)
        window_idx = 0
        variance = WelfordVariance(dim)
        integrator = _Integrator(target, inv_metric, step_size, config.divergence_threshold)

        for it in range(config.warmup_iters):
            state, accept, _, _ = integrator.transition(state, config.max_tree_depth, rng)
            integrator.step_size = adapter.update(accept)
            if window_idx < len(window_ends) and it >= init_end:
                variance.add(state.x)
                if it + 1 == window_ends[window_idx]:
                    inv_metric = variance.regularized()
                    integrator.inv_metric = inv_metric
                    variance = WelfordVariance(dim)
                    window_idx += 1
                    step_size = find_reasonable_step_size(target, state, inv_metric, rng, integrator.step_size)
                    integrator.step_size = step_size
                    adapter.restart(step_size)
        if config.warmup_iters:
            integrator.step_size = adapter.final_step_size

        n = config.sampling_iters
        out = np.empty((n, len(target.names)))
        raw = np.empty((n, dim))
        lp = np.empty(n)
        accept_stat = np.empty(n)
        divergent = np.zeros(n, dtype=bool)
        depth = np.empty(n, dtype=np.int64)
        for it in range(n):
            state, accept_stat[it], divergent[it], depth[it] = integrator.transition(state, config.max_tree_depth, rng)
            raw[it] = state.x
            out[it] = target.constrain(state.x)
            lp[it] = state.logp

        stats = ChainStats(
            chain=chain,
            step_size=integrator.step_size,
            divergences=int(divergent.sum()),
            mean_accept_stat=float(accept_stat.mean()) if n else float("nan"),
            mean_tree_depth=float(depth.mean()) if n else float("nan"),
            non_pd_evaluations=getattr(target, "non_pd_count", 0) - non_pd_start,
        )
        logger.info(
            "Chain finished",
            step_size=round(stats.step_size, 5),
            divergences=stats.divergences,
            mean_accept_stat=round(stats.mean_accept_stat, 3),
        )
    return ChainResult(chain, out, raw, lp, accept_stat, divergent, depth, stats)


def _worker_init(log_level: str, log_format: str) -> None:
    from observability import init_observability

    init_observability(log_level, log_format)


def sample(target: LogDensity, config: SamplerConfig, threads: int = 1) -> PosteriorDraws:
    """Run ``config.chains`` independent chains; results do not depend on ``threads``."""
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    if threads > 1 and config.chains > 1:
        from settings import get_settings

        settings = get_settings()
        with ProcessPoolExecutor(
            max_workers=min(threads, config.chains),
            initializer=_worker_init,
            initargs=(settings.log_level, settings.log_format),
        ) as pool:
            futures = [pool.submit(run_chain, target, config, seeds[c], c + 1) for c in range(config.chains)]
            results = [f.result() for f in futures]
    else:
        results = [run_chain(target, config, seeds[c], c + 1) for c in range(config.chains)]

    report = SamplerReport(chains=[r.stats for r in results], draws_per_chain=config.sampling_iters)
    if report.divergence_rate > DIVERGENCE_WARN_RATE:
        message = f"divergence rate {report.divergence_rate:.1%} exceeds {DIVERGENCE_WARN_RATE:.0%}"
        report.warnings.append(message)
        logger.warning("High divergence rate", rate=report.divergence_rate)
    non_pd = sum(r.stats.non_pd_evaluations for r in results)
    if non_pd:
        report.warnings.append(f"{non_pd} evaluations hit a non-positive-definite correlation matrix")

    return PosteriorDraws(
        names=list(target.names),
        values=np.stack([r.values for r in results]),
        lp=np.stack([r.lp for r in results]),
        scalar_names=list(getattr(getattr(target, "layout", None), "scalar_names", []) or []),
        accept_stat=np.stack([r.accept_stat for r in results]),
        divergent=np.stack([r.divergent for r in results]),
        tree_depth=np.stack([r.tree_depth for r in results]),
        report=report,
    )


def attach_log_lik(draws: PosteriorDraws, model: PosteriorModel) -> PosteriorDraws:
    """Fill ``draws.log_lik`` with per-unit log likelihoods conditional on sampled effects."""
    flat = draws.flat()
    log_lik = np.vstack([model.pointwise_log_lik(row) for row in flat]) if flat.size else np.empty((0, model.data.n_units))
    draws.log_lik = log_lik.reshape(draws.n_chains, draws.n_iters, -1)
    return draws


def run_chains(data: Dataset, model: ModelConfig, config: SamplerConfig, threads: int = 1) -> PosteriorDraws:
    """Full Bayesian fit of ``model`` to ``data``."""
    target = PosteriorModel(data, model)
    logger.info(
        "Sampling",
        family=target.family.value,
        correlation=target.layout.correlation.value,
        dim=target.dim,
        chains=config.chains,
        warmup=config.warmup_iters,
        samples=config.sampling_iters,
    )
    if model.mixture:
        logger.info("Flat prior on eta over (0, inf) is improper; propriety rests on the failure counts")
    draws = sample(target, config, threads)
    if config.store_log_lik:
        attach_log_lik(draws, target)
    return draws


# --- Summaries and files --- #


def summarize(draws: PosteriorDraws, names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Posterior mean, sd, equal-tail 95% interval (type-7 quantiles) and diagnostics."""
    names = list(names) if names is not None else list(draws.scalar_names)
    rows = []
    for name in names:
        chains = draws.param(name)
        pooled = np.sort(chains.ravel())
        diag = diagnose_param(name, chains)
        rows.append(
            {
                "param": name,
                "mean": float(np.mean(pooled)),
                "sd": float(np.std(pooled, ddof=1)) if pooled.size > 1 else 0.0,
                "q025": float(np.quantile(pooled, 0.025)),
                "q975": float(np.quantile(pooled, 0.975)),
                "rhat": diag.rhat if diag.rhat is not None else np.nan,
                "ess_bulk": diag.ess_bulk if diag.ess_bulk is not None else np.nan,
                "ess_tail": diag.ess_tail if diag.ess_tail is not None else np.nan,
            }
        )
    return pd.DataFrame(rows, columns=["param", "mean", "sd", "q025", "q975", "rhat", "ess_bulk", "ess_tail"])


def write_draws(draws: PosteriorDraws, path: Union[str, Path]) -> Path:
    path = Path(path)
    n_chains, n_iters, _ = draws.values.shape
    frame = pd.DataFrame(draws.flat(), columns=draws.names)
    frame.insert(0, "iter", np.tile(np.arange(1, n_iters + 1), n_chains))
    frame.insert(0, "chain", np.repeat(np.arange(1, n_chains + 1), n_iters))
    frame["lp__"] = draws.lp.reshape(-1)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path


def read_draws(path: Union[str, Path]) -> PosteriorDraws:
    frame = pd.read_csv(path, float_precision="round_trip")
    if list(frame.columns[:2]) != ["chain", "iter"] or frame.columns[-1] != "lp__":
        raise DataValidationError(f"{path} is not a draws file (expected chain,iter,...,lp__)")
    names = list(frame.columns[2:-1])
    chains = np.sort(frame["chain"].unique())
    per_chain = [frame[frame["chain"] == c].sort_values("iter") for c in chains]
    values = np.stack([g[names].to_numpy(dtype=float) for g in per_chain])
    lp = np.stack([g["lp__"].to_numpy(dtype=float) for g in per_chain])
    return PosteriorDraws(names=names, values=values, lp=lp)
