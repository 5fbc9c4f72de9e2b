"""SVG figures for the evaluation tables. Each function takes the same frame the CLI writes as CSV."""
from __future__ import annotations

from pathlib import Path
from typing import Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

PathLike = Union[str, Path]

# fixed metadata keeps the SVG byte-identical across runs
_SVG_META = {"Date": None, "Creator": None}


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.rcParams["svg.hashsalt"] = "spatialrisk"
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def probability_plot(frame: pd.DataFrame, mode: int, path: PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(frame["log_residual"], frame["plot_position"], ".", ms=3, label=f"mode {mode}")
    if not frame.empty:
        lims = [
            min(frame["log_residual"].min(), frame["plot_position"].min()),
            max(frame["log_residual"].max(), frame["plot_position"].max()),
        ]
        ax.plot(lims, lims, "k--", lw=1, label="unit exponential")
    ax.set_xlabel("log residual")
    ax.set_ylabel("log(-log(1 - p))")
    ax.legend(loc="upper left")
    return _save(fig, path)


def km_pmf(frame: pd.DataFrame, mode: int, path: PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = (frame["bin_end"] - frame["bin_start"]).to_numpy()
    ax.bar(frame["bin_start"], frame["mass"], width=width, align="edge", edgecolor="k", lw=0.5)
    ax.set_xlabel("time (years)")
    ax.set_ylabel("probability")
    ax.set_title(f"Kaplan-Meier pmf, mode {mode}")
    return _save(fig, path)


def failure_heatmap(cells: pd.DataFrame, column: str, path: PathLike) -> Path:
    n_rows = int(cells["row"].max()) + 1
    n_cols = int(cells["col"].max()) + 1
    grid = np.full((n_rows, n_cols), np.nan)
    grid[cells["row"].to_numpy(), cells["col"].to_numpy()] = cells[column].to_numpy()
    fig, ax = plt.subplots(figsize=(max(4.0, n_cols * 0.35), max(2.5, n_rows * 0.4)))
    image = ax.imshow(grid, origin="lower", cmap="viridis", aspect="auto")
    fig.colorbar(image, ax=ax, label=column)
    ax.set_xlabel("column")
    ax.set_ylabel("row")
    return _save(fig, path)


def correlation_curve(frame: pd.DataFrame, path: PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(frame["distance"], frame["correlation"], "o-", ms=3)
    ax.set_xlabel("distance")
    ax.set_ylabel("correlation of failure times")
    return _save(fig, path)


def eigenvalue_map(frame: pd.DataFrame, path: PathLike) -> Path:
    table = frame.pivot(index="kappa", columns="nu", values="min_eig")
    fig, ax = plt.subplots(figsize=(5, 4))
    mesh = ax.pcolormesh(table.columns, table.index, table.to_numpy(), shading="auto", cmap="coolwarm")
    ax.contour(table.columns, table.index, table.to_numpy(), levels=[0.0], colors="k")
    fig.colorbar(mesh, ax=ax, label="smallest eigenvalue")
    ax.set_xlabel("nu")
    ax.set_ylabel("kappa")
    return _save(fig, path)
