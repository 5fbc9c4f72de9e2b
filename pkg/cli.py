"""Command-line entry point: ``python cli.py <subcommand> [options]``.

Exit codes: 0 success, 2 usage, 3 validation, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from contextlib import contextmanager
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import pydantic
import structlog

import evaluation
import plots
from data_model import TITAN_GRID, Dataset, check_propriety, ingest_csv, load_relabel_map, write_csv
from diagnostics import RHAT_CUTOFF, convergence_report
from errors import DataValidationError, ModelMismatchError, SpatialRiskError, UsageError
from mcem import run_mcem
from observability import init_observability, run_context
from posterior import PosteriorModel, SpatialPriorTarget
from sampler import attach_log_lik, read_draws, run_chains, sample, summarize, write_draws
from schemas import CorrelationKind, Family, GridSpec, ModelConfig, RunManifest
from settings import Settings, load_settings
from simulation import run_recovery_study, simulate, write_truth
from spatial import min_eigenvalue_map

logger = structlog.get_logger(__name__)

PACKAGE_VERSION = "0.1.0"
_RUNTIME_KEYS = {"log_level", "log_format", "threads", "output_dir"}
# post-fit commands may write into the fit directory; their manifests must not replace the fit's
_POST_FIT = {"diagnose", "loo", "residuals", "correlate"}


# --- Helpers --- #


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def config_hash(settings: Settings) -> str:
    payload = settings.model_dump(mode="json", exclude=_RUNTIME_KEYS)
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def _versions() -> Dict[str, str]:
    versions = {"spatialrisk": PACKAGE_VERSION, "python": platform.python_version()}
    for dist in ("numpy", "scipy", "pandas", "pydantic", "structlog", "matplotlib"):
        try:
            versions[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            versions[dist] = "unknown"
    return versions


def _write_json(path: Path, obj: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def _write_frame(path: Path, frame: pd.DataFrame) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path


def parse_grid(text: Optional[str]) -> GridSpec:
    if text is None:
        return TITAN_GRID
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
        return GridSpec(n_rows=rows, n_cols=cols)
    except (ValueError, pydantic.ValidationError) as exc:
        raise UsageError(f"--grid expects ROWSxCOLS, got {text!r}") from exc


def _parse_vector(text: Optional[str], size: int) -> np.ndarray:
    if not text:
        return np.zeros(size)
    try:
        values = np.array([float(v) for v in text.split(",")])
    except ValueError as exc:
        raise UsageError(f"--x expects comma-separated numbers, got {text!r}") from exc
    if values.size != size:
        raise UsageError(f"--x needs {size} values, got {values.size}")
    return values


class _Run:
    """Output bookkeeping for one command: paths, timings and the manifest."""

    def __init__(self, command: str, run_id: str, settings: Settings):
        self.command = command
        self.run_id = run_id
        self.settings = settings
        self.out_dir = Path(settings.output_dir)
        self.outputs: List[str] = []
        self.inputs: Dict[str, str] = {}
        self.timings: Dict[str, float] = {}

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out_dir / name

    def add_input(self, path: Optional[Path]) -> None:
        if path is not None:
            self.inputs[str(path)] = sha256_file(Path(path))

    @contextmanager
    def timed(self, label: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[label] = round(time.perf_counter() - start, 3)

    def write_manifest(self, **fields) -> Path:
        name = f"manifest_{self.command}.json" if self.command in _POST_FIT else "manifest.json"
        path = self.out_dir / name
        manifest = RunManifest(
            run_id=self.run_id,
            command=self.command,
            config_hash=config_hash(self.settings),
            versions=_versions(),
            inputs=self.inputs,
            outputs=sorted(set(self.outputs)),
            timings=self.timings,
            **fields,
        )
        _write_json(path, manifest.model_dump(mode="json"))
        logger.info("Wrote outputs", out_dir=str(self.out_dir), files=len(manifest.outputs))
        return path


def _load_data(args, run: Optional[_Run] = None) -> Dataset:
    relabel = load_relabel_map(args.relabel) if getattr(args, "relabel", None) else None
    data = ingest_csv(args.data, relabel=relabel, grid=parse_grid(args.grid), time_unit=args.time_unit)
    if run is not None:
        run.add_input(Path(args.data))
        if getattr(args, "relabel", None):
            run.add_input(Path(args.relabel))
    return data


def _derived_seed(seed: int, attempt: int) -> int:
    if attempt == 0:
        return seed
    return int(np.random.SeedSequence([seed, attempt]).generate_state(1, np.uint64)[0]) >> 1


# --- Fitted-run loading --- #


def load_fit(args) -> Tuple[Any, RunManifest, Dataset, ModelConfig]:
    """Draws, manifest, data and model of a finished ``fit`` run."""
    fit_dir = Path(args.fit_dir)
    manifest_path = fit_dir / "manifest.json"
    draws_path = fit_dir / "draws.csv"
    if not manifest_path.exists() or not draws_path.exists():
        raise UsageError(f"{fit_dir} has no draws.csv/manifest.json; run `fit` first")
    manifest = RunManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    if manifest.model is None:
        raise UsageError(f"{manifest_path} does not describe a model fit")
    model = manifest.model
    if args.family is not None and Family(args.family) != model.family:
        raise ModelMismatchError(f"fit used family {model.family.value}, --family {args.family} requested")
    if args.corr is not None and CorrelationKind(args.corr) != model.correlation:
        raise ModelMismatchError(f"fit used correlation {model.correlation.value}, --corr {args.corr} requested")

    data_path = Path(args.data) if getattr(args, "data", None) else Path(manifest.data or "")
    if not data_path.is_file():
        raise UsageError(f"dataset {data_path} not found; pass --data")
    expected = manifest.inputs.get(str(data_path))
    if expected is not None and sha256_file(data_path) != expected:
        raise DataValidationError(f"{data_path} changed since the fit (checksum mismatch)")
    relabel = load_relabel_map(manifest.relabel) if manifest.relabel else None
    data = ingest_csv(data_path, relabel=relabel, grid=manifest.grid or TITAN_GRID, time_unit=manifest.time_unit)

    draws = read_draws(draws_path)
    expected_names = PosteriorModel(data, model).names
    if draws.names != expected_names:
        raise ModelMismatchError("draws columns do not match the model and data in the manifest")
    return draws, manifest, data, model


# --- Commands --- #


def cmd_ingest(args, settings: Settings, run: _Run) -> None:
    data = _load_data(args, run)
    family = Family(args.family or settings.model.family)
    report = check_propriety(data, family)
    _write_json(run.path("propriety.json"), report.model_dump(mode="json"))
    counts = pd.DataFrame(
        {"row": data.locations[:, 0], "col": data.locations[:, 1], "n_units": data.location_counts()}
    )
    _write_frame(run.path("locations.csv"), counts)
    run.write_manifest(grid=data.grid, covariates=list(data.covariate_names), data=str(args.data))


def cmd_simulate(args, settings: Settings, run: _Run) -> None:
    config = settings.simulation
    with run.timed("simulate"):
        result = simulate(config)
    write_csv(result.dataset, run.path("data.csv"))
    write_truth(result, config, run.path("truth.json"))
    run.write_manifest(seed=config.seed, grid=result.dataset.grid, covariates=list(result.dataset.covariate_names))


def cmd_fit(args, settings: Settings, run: _Run) -> None:
    if args.prior_only:
        _fit_prior_only(settings, run)
        return
    data = _load_data(args, run)
    model = settings.model_with_prior()
    check_propriety(data, model.family)
    sampler_config = settings.sampler.model_copy(update={"store_log_lik": False})
    draws = None
    for attempt in range(args.retries + 1):
        config = sampler_config.model_copy(update={"seed": _derived_seed(sampler_config.seed, attempt)})
        with run.timed(f"sample_{attempt}"):
            draws = run_chains(data, model, config, threads=settings.threads)
        report = convergence_report(draws)
        if report.converged:
            break
        if attempt < args.retries:
            logger.warning("Re-running with a derived seed", attempt=attempt + 1, max_rhat=report.max_rhat)
    if not report.converged:
        logger.warning("Fit did not converge", max_rhat=report.max_rhat, cutoff=RHAT_CUTOFF)

    write_draws(draws, run.path("draws.csv"))
    _write_frame(run.path("summary.csv"), summarize(draws))
    _write_json(run.path("sampler.json"), draws.report.model_dump(mode="json") if draws.report else {})
    _write_json(run.path("convergence.json"), report.model_dump(mode="json"))
    run.write_manifest(
        seed=config.seed,
        model=model,
        grid=data.grid,
        covariates=list(data.covariate_names),
        data=str(args.data),
        relabel=str(args.relabel) if args.relabel else None,
        time_unit=args.time_unit,
    )


def _fit_prior_only(settings: Settings, run: _Run) -> None:
    model = settings.model_with_prior()
    target = SpatialPriorTarget(model.prior, model.correlation)
    config = settings.sampler.model_copy(update={"store_log_lik": False})
    with run.timed("sample"):
        draws = sample(target, config, threads=settings.threads)
    write_draws(draws, run.path("prior_draws.csv"))
    _write_frame(run.path("prior_summary.csv"), summarize(draws))
    run.write_manifest(seed=config.seed, model=model)


def cmd_fit_em(args, settings: Settings, run: _Run) -> None:
    data = _load_data(args, run)
    model = settings.model_with_prior()
    with run.timed("mcem"):
        result = run_mcem(data, model, settings.mcem)
    _write_frame(run.path("mcem_estimates.csv"), result.to_frame())
    _write_frame(run.path("mcem_trajectory.csv"), result.trajectory)
    if not result.progress.empty:
        _write_frame(run.path("mcem_progress.csv"), result.progress)
    if result.effects.size:
        effects = pd.DataFrame(
            {
                "row": data.locations[:, 0],
                "col": data.locations[:, 1],
                "w1": result.effects[:, 0],
                "w2": result.effects[:, 1],
            }
        )
        _write_frame(run.path("mcem_effects.csv"), effects)
    _write_json(
        run.path("mcem.json"),
        {"converged": result.converged, "iterations": result.iterations, "m_step_failures": result.m_step_failures},
    )
    run.write_manifest(seed=settings.mcem.seed, model=model, grid=data.grid, covariates=list(data.covariate_names), data=str(args.data))


def cmd_diagnose(args, settings: Settings, run: _Run) -> None:
    draws, manifest, _, _ = load_fit(args)
    report = convergence_report(draws)
    _write_frame(run.path("diagnostics.csv"), summarize(draws))
    _write_json(run.path("diagnostics.json"), report.model_dump(mode="json"))
    run.add_input(Path(args.fit_dir) / "draws.csv")
    run.write_manifest(model=manifest.model)


def cmd_loo(args, settings: Settings, run: _Run) -> None:
    results: Dict[str, evaluation.LooResult] = {}
    fit_dirs = args.fit_dir
    for fit_dir in fit_dirs:
        sub = argparse.Namespace(**{**vars(args), "fit_dir": fit_dir})
        draws, manifest, data, model = load_fit(sub)
        with run.timed(f"loo_{Path(fit_dir).name}"):
            attach_log_lik(draws, PosteriorModel(data, model))
            res = evaluation.loo(draws)
        label = f"{model.family.value}-{model.correlation.value}"
        results[label if label not in results else str(fit_dir)] = res
        run.add_input(Path(fit_dir) / "draws.csv")
        if len(fit_dirs) == 1:
            _write_frame(run.path("loo.csv"), res.to_frame(data.unit_id))
            _write_json(run.path("loo_summary.json"), res.summary())
    if len(fit_dirs) > 1:
        _write_frame(run.path("loo_compare.csv"), evaluation.compare_loo(results))
    run.write_manifest()


def cmd_residuals(args, settings: Settings, run: _Run) -> None:
    draws, manifest, data, model = load_fit(args)
    res = evaluation.residuals(draws, data, model)
    _write_frame(run.path("residuals.csv"), res.to_frame(data.unit_id))
    for mode in (1, 2):
        frame = evaluation.probability_plot(res, mode)
        _write_frame(run.path(f"probplot_mode{mode}.csv"), frame)
        plots.probability_plot(frame, mode, run.path(f"probplot_mode{mode}.svg"))
    run.write_manifest(model=manifest.model)


def cmd_km(args, settings: Settings, run: _Run) -> None:
    data = _load_data(args, run)
    upper = float(np.max(data.time)) if data.n_units else 1.0
    for mode in (1, 2):
        km = evaluation.kaplan_meier_by_mode(data, mode)
        pmf = km.pmf(args.bins, upper=upper)
        _write_frame(run.path(f"km_mode{mode}.csv"), km.table)
        _write_frame(run.path(f"km_pmf_mode{mode}.csv"), pmf)
        plots.km_pmf(pmf, mode, run.path(f"km_pmf_mode{mode}.svg"))
    run.write_manifest(grid=data.grid)


def cmd_heatmap(args, settings: Settings, run: _Run) -> None:
    data = _load_data(args, run)
    cells, margins = evaluation.failure_proportion_map(data)
    _write_frame(run.path("failure_map.csv"), cells)
    _write_frame(run.path("failure_margins.csv"), margins)
    for mode in (1, 2):
        plots.failure_heatmap(cells, f"prop_mode{mode}", run.path(f"heatmap_mode{mode}.svg"))
    run.write_manifest(grid=data.grid)


def cmd_correlate(args, settings: Settings, run: _Run) -> None:
    draws, manifest, data, model = load_fit(args)
    if not model.correlation.has_effects:
        raise UsageError("correlate needs a model with location effects")
    fit = evaluation.PointFit.from_draws(draws, data, model)
    x = _parse_vector(args.x, data.p)
    summary: Dict[str, Any] = {"x": x.tolist()}
    with run.timed("cross_mode"):
        summary["cross_mode"] = evaluation.marginal_cross_mode_correlation(fit, x, args.n_l, args.n_r, args.seed)
    if args.pair:
        i, j = args.pair
        if not (0 <= i < data.n_locations and 0 <= j < data.n_locations):
            raise UsageError(f"--pair indices must lie in [0, {data.n_locations})")
        for mode in (1, 2):
            summary[f"pair_mode{mode}"] = evaluation.marginal_spatial_correlation(
                fit, mode, i, j, x, args.n_l, args.n_r, args.seed
            )
    if model.correlation.spatial:
        distances = np.linspace(0.0, args.max_distance, args.points)
        for mode in (1, 2):
            with run.timed(f"curve_mode{mode}"):
                curve = evaluation.spatial_correlation_curve(fit, mode, distances, model, x, args.n_l, args.n_r, args.seed)
            _write_frame(run.path(f"spatial_correlation_mode{mode}.csv"), curve)
            plots.correlation_curve(curve, run.path(f"spatial_correlation_mode{mode}.svg"))
    _write_json(run.path("correlation.json"), summary)
    run.write_manifest(model=manifest.model, seed=args.seed)


def cmd_eigmap(args, settings: Settings, run: _Run) -> None:
    if args.data:
        data = _load_data(args, run)
        locations, grid = data.locations, data.grid
    else:
        grid = parse_grid(args.grid)
        locations = np.array([(r, c) for r in range(grid.n_rows) for c in range(grid.n_cols)], dtype=np.int64)
    mcem = settings.mcem
    nu_grid = np.linspace(0.01, mcem.nu_max, mcem.nu_grid_size)
    kappa_grid = np.linspace(0.05, 2.0, mcem.kappa_grid_size)
    with run.timed("eigmap"):
        frame = min_eigenvalue_map(nu_grid, kappa_grid, locations, grid)
    _write_frame(run.path("eigmap.csv"), frame)
    plots.eigenvalue_map(frame, run.path("eigmap.svg"))
    run.write_manifest(grid=grid)


def cmd_study(args, settings: Settings, run: _Run) -> None:
    with run.timed("study"):
        estimates, metrics = run_recovery_study(
            args.n_units,
            args.grid_sides,
            args.replicates,
            settings.sampler,
            settings.simulation,
            threads=settings.threads,
            log_level=settings.log_level,
            log_format=settings.log_format,
        )
    _write_frame(run.path("study_estimates.csv"), estimates)
    _write_frame(run.path("study_metrics.csv"), metrics)
    run.write_manifest(seed=settings.simulation.seed)


# --- Parser --- #


def build_argparser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="TOML config file")
    common.add_argument("--out", type=Path, default=None, help="Output directory")
    common.add_argument("--threads", type=int, default=None, help="Worker processes (results do not depend on it)")
    common.add_argument("--log-level", default=None)
    common.add_argument("--log-format", choices=["console", "json"], default=None)

    data_opts = argparse.ArgumentParser(add_help=False)
    data_opts.add_argument("--data", type=Path, required=True, help="Failure-record CSV")
    data_opts.add_argument("--relabel", type=Path, default=None, help="Physical-to-connectivity column map")
    data_opts.add_argument("--grid", default=None, help="ROWSxCOLS (default 8x25)")
    data_opts.add_argument("--time-unit", choices=["years", "days", "hours"], default="years")

    model_opts = argparse.ArgumentParser(add_help=False)
    model_opts.add_argument("--family", choices=[f.value for f in Family], default=None)
    model_opts.add_argument("--corr", choices=[c.value for c in CorrelationKind], default=None)

    fit_dir = argparse.ArgumentParser(add_help=False)
    fit_dir.add_argument("--fit-dir", type=Path, required=True, help="Output directory of a `fit` run")
    fit_dir.add_argument("--data", type=Path, default=None, help="Override the dataset path in the manifest")

    parser = argparse.ArgumentParser(prog="spatialrisk", description="Spatial competing-risks survival toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common, data_opts], help="Validate a dataset and report propriety")
    p.add_argument("--family", choices=[f.value for f in Family], default=None)
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("simulate", parents=[common], help="Simulate a dataset with its truth sidecar")
    p.add_argument("--n-units", type=int, default=None)
    p.add_argument("--grid-side", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(handler=cmd_simulate)

    for name, handler, help_text in (
        ("fit", cmd_fit, "Bayesian fit by Hamiltonian Monte Carlo"),
        ("fit-em", cmd_fit_em, "Maximum likelihood by Monte Carlo EM"),
    ):
        p = sub.add_parser(name, parents=[common, model_opts], help=help_text)
        p.add_argument("--data", type=Path, required=name == "fit-em", default=None, help="Failure-record CSV")
        p.add_argument("--relabel", type=Path, default=None)
        p.add_argument("--grid", default=None, help="ROWSxCOLS (default 8x25)")
        p.add_argument("--time-unit", choices=["years", "days", "hours"], default="years")
        p.add_argument("--no-mixture", action="store_true", help="Single distribution for mode 2")
        p.add_argument("--seed", type=int, default=None)
        if name == "fit":
            p.add_argument("--chains", type=int, default=None)
            p.add_argument("--warmup", type=int, default=None)
            p.add_argument("--samples", type=int, default=None)
            p.add_argument("--retries", type=int, default=1, help="Re-runs with a derived seed when R-hat > 1.1")
            p.add_argument("--prior-only", action="store_true", help="Sample the (nu, kappa) prior alone")
        p.set_defaults(handler=handler)

    for name, handler, help_text in (
        ("diagnose", cmd_diagnose, "R-hat and ESS of a finished fit"),
        ("residuals", cmd_residuals, "Residuals and probability-plot coordinates"),
    ):
        p = sub.add_parser(name, parents=[common, model_opts, fit_dir], help=help_text)
        p.set_defaults(handler=handler)

    p = sub.add_parser("loo", parents=[common, model_opts], help="PSIS-LOO; several fits are compared by LOOIC")
    p.add_argument("--fit-dir", type=Path, nargs="+", required=True)
    p.add_argument("--data", type=Path, default=None)
    p.set_defaults(handler=cmd_loo)

    p = sub.add_parser("km", parents=[common, data_opts], help="Kaplan-Meier curves and binned pmfs per mode")
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(handler=cmd_km)

    p = sub.add_parser("heatmap", parents=[common, data_opts], help="Failure proportions on the cabinet grid")
    p.set_defaults(handler=cmd_heatmap)

    p = sub.add_parser("correlate", parents=[common, model_opts, fit_dir], help="Marginal failure-time correlations")
    p.add_argument("--x", default=None, help="Comma-separated covariate vector (default zeros)")
    p.add_argument("--pair", type=int, nargs=2, default=None, metavar=("I", "J"), help="Location indices")
    p.add_argument("--n-l", type=int, default=500, help="Effect draws")
    p.add_argument("--n-r", type=int, default=50_000, help="Time draws")
    p.add_argument("--max-distance", type=float, default=1.0)
    p.add_argument("--points", type=int, default=11)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_correlate)

    p = sub.add_parser("eigmap", parents=[common], help="Smallest eigenvalue of Omega over (nu, kappa)")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--relabel", type=Path, default=None)
    p.add_argument("--grid", default=None)
    p.add_argument("--time-unit", choices=["years", "days", "hours"], default="years")
    p.set_defaults(handler=cmd_eigmap)

    p = sub.add_parser("study", parents=[common], help="Parameter-recovery simulation study")
    p.add_argument("--n-units", type=int, nargs="+", default=[5000])
    p.add_argument("--grid-sides", type=int, nargs="+", default=[5])
    p.add_argument("--replicates", type=int, default=30)
    p.add_argument("--chains", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(handler=cmd_study)
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """CLI flags as Settings init kwargs (highest precedence)."""
    out: Dict[str, Any] = {}
    for flag, key in (("out", "output_dir"), ("threads", "threads"), ("log_level", "log_level"), ("log_format", "log_format")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value

    def section(name: str, pairs: Sequence[Tuple[str, str]]) -> None:
        values = {key: getattr(args, flag) for flag, key in pairs if getattr(args, flag, None) is not None}
        if values:
            out.setdefault(name, {}).update(values)

    if args.command in ("fit", "fit-em"):
        section("model", (("family", "family"), ("corr", "correlation")))
        if args.no_mixture:
            out.setdefault("model", {})["mixture"] = False
    if args.command in ("fit", "study"):
        section("sampler", (("chains", "chains"), ("warmup", "warmup_iters"), ("samples", "sampling_iters"), ("seed", "seed")))
    if args.command == "fit-em":
        section("mcem", (("seed", "seed"),))
    if args.command == "simulate":
        section("simulation", (("n_units", "n_units"), ("grid_side", "grid_side"), ("seed", "seed")))
    if args.command == "study":
        section("simulation", (("seed", "seed"),))
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_argparser()
    args = parser.parse_args(argv)
    if args.command == "fit" and not args.prior_only and args.data is None:
        parser.error("fit requires --data unless --prior-only is given")
    try:
        settings = load_settings(args.config, overrides_from_args(args))
    except pydantic.ValidationError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 3
    except SpatialRiskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code

    init_observability(settings.log_level, settings.log_format)
    with run_context(args.command) as run_id:
        run = _Run(args.command, run_id, settings)
        try:
            args.handler(args, settings, run)
        except SpatialRiskError as exc:
            logger.error("Command failed", error=str(exc), error_type=type(exc).__name__, exit_code=exc.exit_code)
            return exc.exit_code
        except pydantic.ValidationError as exc:
            logger.error("Invalid input", error=str(exc))
            return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
