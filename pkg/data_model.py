"""Observed failure records, covariate coding, validation and CSV ingestion."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import pydantic
import structlog

from errors import DataValidationError, ParseError
from schemas import (
    ColumnRelabelMap,
    EventType,
    FailureRecord,
    Family,
    GridSpec,
    ModeCount,
    ProprietyReport,
)

logger = structlog.get_logger(__name__)

TITAN_GRID = GridSpec(n_rows=8, n_cols=25)

CSV_COLUMNS = ["unit_id", "row", "col", "cage", "slot", "node", "time", "event"]
EXPLICIT_PREFIX = "x_"

# Dummy coding with baselines cage 2, slot 7, node 3
_FACTOR_LEVELS = (("cage", 3), ("slot", 8), ("node", 4))
DUMMY_NAMES: Tuple[str, ...] = tuple(
    f"{factor}{level}" for factor, n_levels in _FACTOR_LEVELS for level in range(n_levels - 1)
)

_DAYS_PER_YEAR = 365.25
_TIME_UNITS = {"years": 1.0, "days": 1.0 / _DAYS_PER_YEAR, "hours": 1.0 / (_DAYS_PER_YEAR * 24.0)}


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented, immutable view of the validated records.

    ``locations`` holds the distinct (row, col) pairs in lexicographic order and
    ``loc_index[j]`` is the location of unit j.
    """

    unit_id: np.ndarray
    row: np.ndarray
    col: np.ndarray
    cage: np.ndarray
    slot: np.ndarray
    node: np.ndarray
    time: np.ndarray
    event: np.ndarray
    design_matrix: np.ndarray
    covariate_names: Tuple[str, ...]
    locations: np.ndarray
    loc_index: np.ndarray
    grid: GridSpec = TITAN_GRID
    explicit_covariates: bool = False
    log_time: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        with np.errstate(divide="ignore"):
            object.__setattr__(self, "log_time", _frozen(np.log(self.time)))

    # --- sizes --- #

    @property
    def n_units(self) -> int:
        return int(self.time.shape[0])

    @property
    def n_locations(self) -> int:
        return int(self.locations.shape[0])

    @property
    def p(self) -> int:
        return int(self.design_matrix.shape[1])

    @property
    def delta1(self) -> np.ndarray:
        return (self.event == EventType.MODE1).astype(float)

    @property
    def delta2(self) -> np.ndarray:
        return (self.event == EventType.MODE2).astype(float)

    # --- summaries --- #

    def event_counts(self) -> dict:
        return {
            e.name.lower(): int(np.sum(self.event == e)) for e in EventType
        }

    def location_counts(self) -> np.ndarray:
        return np.bincount(self.loc_index, minlength=self.n_locations)

    def records(self) -> Iterator[FailureRecord]:
        for j in range(self.n_units):
            yield FailureRecord(
                unit_id=str(self.unit_id[j]),
                row=int(self.row[j]),
                col=int(self.col[j]),
                cage=int(self.cage[j]),
                slot=int(self.slot[j]),
                node=int(self.node[j]),
                time=float(self.time[j]),
                event=EventType(int(self.event[j])),
            )

    def subset(self, mask: np.ndarray) -> "Dataset":
        """Dataset restricted to the units selected by a boolean mask."""
        mask = np.asarray(mask, dtype=bool)
        return build_dataset(
            unit_id=self.unit_id[mask],
            row=self.row[mask],
            col=self.col[mask],
            cage=self.cage[mask],
            slot=self.slot[mask],
            node=self.node[mask],
            time=self.time[mask],
            event=self.event[mask],
            grid=self.grid,
            design_matrix=self.design_matrix[mask] if self.explicit_covariates else None,
            covariate_names=self.covariate_names if self.explicit_covariates else None,
        )

    def equals(self, other: "Dataset") -> bool:
        if self.grid != other.grid or self.covariate_names != other.covariate_names:
            return False
        pairs = [
            (self.unit_id, other.unit_id),
            (self.row, other.row),
            (self.col, other.col),
            (self.cage, other.cage),
            (self.slot, other.slot),
            (self.node, other.node),
            (self.time, other.time),
            (self.event, other.event),
            (self.design_matrix, other.design_matrix),
        ]
        return all(a.shape == b.shape and np.array_equal(a, b) for a, b in pairs)


# --- Covariate coding --- #


def dummy_code(cage: np.ndarray, slot: np.ndarray, node: np.ndarray) -> np.ndarray:
    """Vectorised treatment coding; the highest level of each factor is the baseline."""
    cage, slot, node = (np.asarray(v, dtype=int) for v in (cage, slot, node))
    X = np.zeros((cage.shape[0], len(DUMMY_NAMES)))
    offset = 0
    for values, (_, n_levels) in zip((cage, slot, node), _FACTOR_LEVELS):
        rows = np.nonzero(values < n_levels - 1)[0]
        X[rows, offset + values[rows]] = 1.0
        offset += n_levels - 1
    return X


def encode_covariates(record: FailureRecord) -> np.ndarray:
    """12-vector of dummy codes for one record (cage 2, slot 7, node 3 encode to zeros)."""
    return dummy_code(np.array([record.cage]), np.array([record.slot]), np.array([record.node]))[0]


# --- Construction and validation --- #


def _check_range(values: np.ndarray, lo: int, hi: int, name: str, line_offset: Optional[int]) -> None:
    bad = np.nonzero((values < lo) | (values > hi))[0]
    if bad.size:
        j = int(bad[0])
        line = j + line_offset if line_offset is not None else None
        raise DataValidationError(f"{name}={values[j]} outside [{lo}, {hi}]", line=line)


def build_dataset(
    unit_id: Sequence,
    row: Sequence,
    col: Sequence,
    cage: Sequence,
    slot: Sequence,
    node: Sequence,
    time: Sequence,
    event: Sequence,
    grid: GridSpec = TITAN_GRID,
    design_matrix: Optional[np.ndarray] = None,
    covariate_names: Optional[Sequence[str]] = None,
    line_offset: Optional[int] = None,
) -> Dataset:
    """Validate column arrays and assemble a Dataset.

    ``line_offset`` maps array position to a source line for error messages.
    """
    row, col, cage, slot, node, event = (
        np.asarray(v, dtype=np.int64) for v in (row, col, cage, slot, node, event)
    )
    time = np.asarray(time, dtype=float)
    unit_id = np.asarray([str(u) for u in unit_id], dtype=object)
    n_units = time.shape[0]

    _check_range(row, 0, grid.n_rows - 1, "row", line_offset)
    _check_range(col, 0, grid.n_cols - 1, "col", line_offset)
    _check_range(cage, 0, 2, "cage", line_offset)
    _check_range(slot, 0, 7, "slot", line_offset)
    _check_range(node, 0, 3, "node", line_offset)
    _check_range(event, 0, 2, "event", line_offset)
    bad_time = np.nonzero(~(time > 0) | ~np.isfinite(time))[0]
    if bad_time.size:
        j = int(bad_time[0])
        raise DataValidationError(
            f"time must be positive, got {time[j]}",
            line=j + line_offset if line_offset is not None else None,
        )

    explicit = design_matrix is not None
    if explicit:
        X = np.asarray(design_matrix, dtype=float).reshape(n_units, -1)
        names = tuple(covariate_names or [f"x{j + 1}" for j in range(X.shape[1])])
        if len(names) != X.shape[1]:
            raise DataValidationError("covariate_names does not match design matrix width")
    else:
        X = dummy_code(cage, slot, node)
        names = DUMMY_NAMES
        if n_units:
            empty = [n for n, s in zip(names, X.sum(axis=0)) if s == 0]
            if empty:
                logger.warning("Dummy columns with no units; their coefficients are unidentified", columns=empty)

    keys = row * grid.n_cols + col
    uniq, loc_index = np.unique(keys, return_inverse=True)
    locations = np.column_stack([uniq // grid.n_cols, uniq % grid.n_cols]).astype(np.int64)

    return Dataset(
        unit_id=_frozen(unit_id),
        row=_frozen(row),
        col=_frozen(col),
        cage=_frozen(cage),
        slot=_frozen(slot),
        node=_frozen(node),
        time=_frozen(time),
        event=_frozen(event),
        design_matrix=_frozen(X),
        covariate_names=names,
        locations=_frozen(locations.reshape(-1, 2)),
        loc_index=_frozen(loc_index.astype(np.int64).reshape(-1)),
        grid=grid,
        explicit_covariates=explicit,
    )


def _parse_numeric(frame: pd.DataFrame, column: str, integer: bool) -> np.ndarray:
    raw = frame[column].str.strip()
    values = pd.to_numeric(raw, errors="coerce")
    bad = values.isna().to_numpy()
    if integer:
        bad |= ~np.isclose(values.fillna(0.5) % 1, 0)
    if bad.any():
        j = int(np.nonzero(bad)[0][0])
        kind = "integer" if integer else "number"
        raise ParseError(f"{column}={raw.iloc[j]!r} is not a valid {kind}", line=j + 2)
    if integer:
        return values.to_numpy(dtype=np.int64)
    # to_numeric's fast parser can be off by an ulp; the round trip with write_csv must be exact
    return raw.to_numpy(dtype=object).astype(float)


def ingest_csv(
    path: Union[str, Path],
    relabel: Optional[ColumnRelabelMap] = None,
    grid: GridSpec = TITAN_GRID,
    time_unit: str = "years",
) -> Dataset:
    """Read and validate a failure-record CSV.

    Parameters
    ----------
    path : file with header ``unit_id,row,col,cage,slot,node,time,event`` and
        optional trailing ``x_<name>`` covariate columns.
    relabel : physical-to-connectivity column permutation; identity when omitted.
    time_unit : unit of the ``time`` column; converted to years.

    Raises
    ------
    ParseError            • malformed row (message carries the line number)
    DataValidationError   • bad header, out-of-range category, nonpositive time
    """
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"no such file: {path}")
    if time_unit not in _TIME_UNITS:
        raise DataValidationError(f"unknown time unit {time_unit!r}; choose from {sorted(_TIME_UNITS)}")

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.ParserError as exc:
        match = re.search(r"line (\d+)", str(exc))
        raise ParseError(str(exc), line=int(match.group(1)) if match else None) from exc

    header = list(frame.columns)
    if header[: len(CSV_COLUMNS)] != CSV_COLUMNS or any(
        not c.startswith(EXPLICIT_PREFIX) for c in header[len(CSV_COLUMNS):]
    ):
        raise DataValidationError(f"header {header} does not match schema {','.join(CSV_COLUMNS)}", line=1)

    ints = {c: _parse_numeric(frame, c, integer=True) for c in ("row", "col", "cage", "slot", "node", "event")}
    time = _parse_numeric(frame, "time", integer=False) * _TIME_UNITS[time_unit]

    col = ints["col"]
    if relabel is not None:
        mapping = np.asarray(relabel.physical_to_connectivity, dtype=np.int64)
        if mapping.size != grid.n_cols:
            raise DataValidationError(f"relabel map has {mapping.size} entries, grid has {grid.n_cols} columns")
        _check_range(col, 0, grid.n_cols - 1, "col", 2)
        col = mapping[col]

    extra = header[len(CSV_COLUMNS):]
    design = None
    if extra:
        design = np.column_stack([_parse_numeric(frame, c, integer=False) for c in extra])

    dataset = build_dataset(
        unit_id=frame["unit_id"].tolist(),
        row=ints["row"],
        col=col,
        cage=ints["cage"],
        slot=ints["slot"],
        node=ints["node"],
        time=time,
        event=ints["event"],
        grid=grid,
        design_matrix=design,
        covariate_names=[c[len(EXPLICIT_PREFIX):] for c in extra] or None,
        line_offset=2,
    )
    logger.info(
        "Ingested dataset",
        path=str(path),
        units=dataset.n_units,
        locations=dataset.n_locations,
        **dataset.event_counts(),
    )
    return dataset


def write_csv(dataset: Dataset, path: Union[str, Path]) -> Path:
    """Emit a Dataset in the ingest schema; ``ingest_csv`` of the result reproduces it."""
    path = Path(path)
    frame = pd.DataFrame(
        {
            "unit_id": dataset.unit_id,
            "row": dataset.row,
            "col": dataset.col,
            "cage": dataset.cage,
            "slot": dataset.slot,
            "node": dataset.node,
            "time": dataset.time,
            "event": dataset.event,
        }
    )
    if dataset.explicit_covariates:
        for j, name in enumerate(dataset.covariate_names):
            frame[f"{EXPLICIT_PREFIX}{name}"] = dataset.design_matrix[:, j]
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path


def load_relabel_map(path: Union[str, Path]) -> ColumnRelabelMap:
    text = Path(path).read_text(encoding="utf-8")
    try:
        values = [int(tok) for tok in re.split(r"[,\s]+", text.strip()) if tok]
        return ColumnRelabelMap(physical_to_connectivity=values)
    except (ValueError, pydantic.ValidationError) as exc:
        raise DataValidationError(f"invalid relabel map {path}: {exc}") from exc


# --- Propriety --- #


def check_propriety(data: Dataset, family: Family) -> ProprietyReport:
    """Failure-count conditions under which the flat-prior posterior is proper.

    Weibull needs more than p+1 failures per mode, lognormal more than (p+3)/2.
    Violations are logged as warnings; nothing is raised.
    """
    family = Family(family)
    p = data.p
    required = p + 1.0 if family is Family.WEIBULL else (p + 3.0) / 2.0
    modes: List[ModeCount] = []
    for mode, delta in ((1, data.delta1), (2, data.delta2)):
        m = int(delta.sum())
        ok = m > required
        modes.append(ModeCount(mode=mode, failures=m, required=required, ok=ok))
        if not ok:
            logger.warning(
                "Posterior may be improper: too few failures",
                mode=mode,
                failures=m,
                required_more_than=required,
                family=family.value,
            )
    return ProprietyReport(family=family, n_covariates=p, modes=modes)
