"""Balanced-panel data model and micro-to-cell aggregation.

A :class:`BalancedPanel` is a complete unit-by-time outcome matrix with a
single designated treated unit (always stored in row 0) and a treatment
start period ``treatment_start``; a cell (j, t) is "post" exactly when
``t >= treatment_start``. Panels can be built from long-format rows
(:func:`from_long`) or by weighted aggregation of individual records
(:func:`aggregate_micro`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .errors import (
    DegeneratePanel,
    DuplicateCell,
    EmptyCell,
    MissingCell,
    UnknownTreatedUnit,
    ZeroWeightCell,
)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class MicroRecord:
    """One individual observation.

    Attributes
    ----------
    unit : str
        Cluster label (e.g. a state).
    time : int
        Period index.
    weight : float
        Nonnegative sampling weight.
    outcome : float
        Observed outcome value.
    covariates : mapping of str to float
        Optional individual covariates, keyed by name.
    """

    unit: str
    time: int
    weight: float
    outcome: float
    covariates: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.outcome):
            raise ValueError(f"outcome must be finite, got {self.outcome}")
        if not (self.weight >= 0):
            raise ValueError(f"sampling weight must be >= 0, got {self.weight}")


class BalancedPanel:
    """Complete unit x time outcome matrix with one treated unit.

    Row 0 always holds the treated unit; every other row is a control.
    All arrays are read-only so panels can be shared freely across
    worker processes.

    Parameters
    ----------
    units : sequence of str
        Unit labels, treated unit first.
    times : sequence of int
        Strictly increasing period values.
    y : (N, T) array
        Outcome matrix, rows aligned with ``units``.
    treatment_start : int
        First post period T0; post cells are those with t >= T0.
    cell_counts : (N, T) integer array, optional
        Number of micro records behind each cell mean.
    covariates : (N, T, K) array, optional
        Cell-level covariate means; requires ``covariate_names``.
    covariate_names : sequence of str, optional
    """

    def __init__(
        self,
        units: Sequence[str],
        times: Sequence[int],
        y: np.ndarray,
        treatment_start: int,
        cell_counts: Optional[np.ndarray] = None,
        covariates: Optional[np.ndarray] = None,
        covariate_names: Optional[Sequence[str]] = None,
    ):
        units = [str(u) for u in units]
        times_arr = np.array(times, dtype=int, copy=True)
        y = np.array(y, dtype=float, copy=True)

        if y.ndim != 2 or y.shape != (len(units), len(times_arr)):
            raise DegeneratePanel(
                f"outcome matrix shape {y.shape} does not match "
                f"{len(units)} units x {len(times_arr)} times"
            )
        if len(set(units)) != len(units):
            raise DegeneratePanel("unit labels must be unique")
        if np.any(np.diff(times_arr) <= 0):
            raise DegeneratePanel("times must be strictly increasing")
        if not np.all(np.isfinite(y)):
            bad = np.argwhere(~np.isfinite(y))
            u, t = bad[0]
            raise DegeneratePanel(
                f"non-finite outcome at ({units[u]!r}, {times_arr[t]})"
            )

        post = times_arr >= treatment_start
        n_pre = int((~post).sum())
        n_post = int(post.sum())
        if n_pre < 2 or n_post < 1:
            raise DegeneratePanel(
                f"need >= 2 pre and >= 1 post periods, got {n_pre} pre / {n_post} post"
            )
        if len(units) < 3:
            raise DegeneratePanel(
                f"need >= 2 control units, got {len(units) - 1}"
            )

        if cell_counts is not None:
            cell_counts = np.array(cell_counts, dtype=int, copy=True)
            if cell_counts.shape != y.shape:
                raise DegeneratePanel("cell_counts shape mismatch")
            if np.any(cell_counts <= 0):
                raise DegeneratePanel("cell_counts must be positive")
        if (covariates is None) != (covariate_names is None):
            raise DegeneratePanel("covariates and covariate_names go together")
        if covariates is not None:
            covariates = np.array(covariates, dtype=float, copy=True)
            if covariates.shape[:2] != y.shape or covariates.shape[2] != len(covariate_names):
                raise DegeneratePanel("covariate array shape mismatch")

        self.units = units
        self.times = times_arr
        self.y = y
        self.treatment_start = int(treatment_start)
        self.cell_counts = cell_counts
        self.covariates = covariates
        self.covariate_names = list(covariate_names) if covariate_names else None

        for arr in (self.times, self.y, self.cell_counts, self.covariates):
            if arr is not None:
                arr.flags.writeable = False

    # -- shape helpers -----------------------------------------------------

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_controls(self) -> int:
        return len(self.units) - 1

    @property
    def post_mask(self) -> np.ndarray:
        return self.times >= self.treatment_start

    @property
    def t_pre(self) -> int:
        return int((~self.post_mask).sum())

    @property
    def t_post(self) -> int:
        return int(self.post_mask.sum())

    @property
    def treated_unit(self) -> str:
        return self.units[0]

    def split_pre_post(self):
        """Partition the outcome matrix at the treatment start.

        Returns
        -------
        (y_pre, y_post) : pair of arrays
            Column blocks of shape (N, T_pre) and (N, T_post).
        """
        post = self.post_mask
        return self.y[:, ~post], self.y[:, post]

    def to_long(self):
        """Emit (unit, time, value[, count]) rows, row-major.

        Inverse of :func:`from_long` up to unit ordering.
        """
        rows = []
        for i, u in enumerate(self.units):
            for k, t in enumerate(self.times):
                if self.cell_counts is None:
                    rows.append((u, int(t), float(self.y[i, k])))
                else:
                    rows.append((u, int(t), float(self.y[i, k]), int(self.cell_counts[i, k])))
        return rows

    def with_outcomes(self, y: np.ndarray) -> "BalancedPanel":
        """Copy of this panel with a replacement outcome matrix."""
        return BalancedPanel(
            self.units,
            self.times,
            y,
            self.treatment_start,
            cell_counts=self.cell_counts,
            covariates=self.covariates,
            covariate_names=self.covariate_names,
        )

    def __repr__(self):
        return (
            f"BalancedPanel({self.n_units} units x {len(self.times)} times, "
            f"treated={self.treated_unit!r}, T0={self.treatment_start}, "
            f"{self.t_pre} pre / {self.t_post} post)"
        )


def from_long(
    rows: Sequence[tuple],
    treated_unit: str,
    treatment_start: int,
    covariate_names: Optional[Sequence[str]] = None,
) -> BalancedPanel:
    """Build a panel from long-format (unit, time, value, ...) rows.

    Each row is ``(unit, time, value)``, optionally followed by a cell
    count and then by cell-level covariate values matching
    ``covariate_names``. Every (unit, time) pair must appear exactly
    once; the treated unit is moved to row 0, controls keep their input
    order, and times are sorted ascending.
    """
    n_cov = len(covariate_names) if covariate_names else 0
    cells = {}
    unit_order = []
    seen_units = set()
    times = set()
    for row in rows:
        unit, time = str(row[0]), int(row[1])
        if (unit, time) in cells:
            raise DuplicateCell(unit, time)
        cells[(unit, time)] = row[2:]
        if unit not in seen_units:
            seen_units.add(unit)
            unit_order.append(unit)
        times.add(time)

    treated_unit = str(treated_unit)
    if treated_unit not in seen_units:
        raise UnknownTreatedUnit(treated_unit)

    missing = [
        (u, t) for u in unit_order for t in times if (u, t) not in cells
    ]
    if missing:
        raise MissingCell(missing)

    units = [treated_unit] + [u for u in unit_order if u != treated_unit]
    times_sorted = sorted(times)

    has_count = any(len(v) >= 2 + n_cov and len(v) > 1 for v in cells.values())
    y = np.empty((len(units), len(times_sorted)))
    counts = np.ones((len(units), len(times_sorted)), dtype=int) if has_count else None
    cov = np.empty((len(units), len(times_sorted), n_cov)) if n_cov else None
    for i, u in enumerate(units):
        for k, t in enumerate(times_sorted):
            vals = cells[(u, t)]
            y[i, k] = float(vals[0])
            rest = vals[1:]
            if n_cov:
                if len(rest) == n_cov:       # no count column
                    cov[i, k] = [float(x) for x in rest]
                elif len(rest) == n_cov + 1:
                    counts[i, k] = int(rest[0])
                    cov[i, k] = [float(x) for x in rest[1:]]
                else:
                    raise DegeneratePanel(
                        f"row for ({u!r}, {t}) has {len(vals)} value fields, "
                        f"expected value [+ count] + {n_cov} covariates"
                    )
            elif rest:
                counts[i, k] = int(rest[0])

    return BalancedPanel(
        units,
        times_sorted,
        y,
        treatment_start,
        cell_counts=counts,
        covariates=cov,
        covariate_names=covariate_names if n_cov else None,
    )


def aggregate_micro(
    records: Sequence[MicroRecord],
    treated_unit: str,
    treatment_start: int,
) -> BalancedPanel:
    """Aggregate individual records into weighted cell means.

    Cell value = sum(w_i * y_i) / sum(w_i) over the records in that
    (unit, time) cell; covariates, when present on the records, are
    aggregated with the same weighted mean. ``cell_counts`` holds the
    number of records per cell. The unit/time grid is the cross of all
    observed labels; a missing combination raises :class:`EmptyCell`.
    """
    if not records:
        raise EmptyCell("<none>", 0)

    unit_order = []
    seen = set()
    times = set()
    groups: dict = {}
    for rec in records:
        key = (rec.unit, rec.time)
        groups.setdefault(key, []).append(rec)
        if rec.unit not in seen:
            seen.add(rec.unit)
            unit_order.append(rec.unit)
        times.add(rec.time)

    treated_unit = str(treated_unit)
    if treated_unit not in seen:
        raise UnknownTreatedUnit(treated_unit)
    units = [treated_unit] + [u for u in unit_order if u != treated_unit]
    times_sorted = sorted(times)

    cov_names = sorted({name for rec in records for name in rec.covariates})
    y = np.empty((len(units), len(times_sorted)))
    counts = np.empty((len(units), len(times_sorted)), dtype=int)
    cov = np.empty((len(units), len(times_sorted), len(cov_names))) if cov_names else None

    for i, u in enumerate(units):
        for k, t in enumerate(times_sorted):
            recs = groups.get((u, t))
            if not recs:
                raise EmptyCell(u, t)
            w = np.array([r.weight for r in recs])
            total = w.sum()
            if total <= 0:
                raise ZeroWeightCell(u, t)
            vals = np.array([r.outcome for r in recs])
            y[i, k] = float(w @ vals) / total
            counts[i, k] = len(recs)
            if cov_names:
                for c, name in enumerate(cov_names):
                    x = np.array([r.covariates.get(name, 0.0) for r in recs])
                    cov[i, k, c] = float(w @ x) / total

    return BalancedPanel(
        units,
        times_sorted,
        y,
        treatment_start,
        cell_counts=counts,
        covariates=cov,
        covariate_names=cov_names or None,
    )


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------
# Aggregate files: header `unit,time,value[,count][,<covariate>...]`.
# Micro files:     header `unit,time,outcome[,weight][,<covariate>...]`.
# Both may start with `# format_version=N` comment lines.


def _read_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, comment="#")
    df.columns = [c.strip() for c in df.columns]
    return df


def read_panel_csv(path, treated_unit: str, treatment_start: int) -> BalancedPanel:
    """Read an aggregate panel CSV into a :class:`BalancedPanel`."""
    df = _read_csv(path)
    for col in ("unit", "time", "value"):
        if col not in df.columns:
            raise DegeneratePanel(f"panel CSV missing required column {col!r}")
    extra = [c for c in df.columns if c not in ("unit", "time", "value", "count")]
    rows = []
    has_count = "count" in df.columns
    for _, r in df.iterrows():
        row = [r["unit"], int(r["time"]), float(r["value"])]
        if has_count:
            row.append(int(r["count"]))
        row.extend(float(r[c]) for c in extra)
        rows.append(tuple(row))
    return from_long(
        rows, treated_unit, treatment_start, covariate_names=extra or None
    )


def read_micro_csv(path):
    """Read a micro CSV into a list of :class:`MicroRecord`.

    Returns (records, covariate_names); a missing ``weight`` column
    means every record gets weight 1.
    """
    df = _read_csv(path)
    for col in ("unit", "time", "outcome"):
        if col not in df.columns:
            raise DegeneratePanel(f"micro CSV missing required column {col!r}")
    cov_names = [c for c in df.columns if c not in ("unit", "time", "outcome", "weight")]
    has_w = "weight" in df.columns
    records = []
    outcome = df["outcome"].to_numpy(float)
    unit = df["unit"].astype(str).to_numpy()
    time = df["time"].to_numpy(int)
    weight = df["weight"].to_numpy(float) if has_w else np.ones(len(df))
    covs = {c: df[c].to_numpy(float) for c in cov_names}
    for i in range(len(df)):
        records.append(
            MicroRecord(
                unit[i],
                int(time[i]),
                float(weight[i]),
                float(outcome[i]),
                {c: float(covs[c][i]) for c in cov_names},
            )
        )
    return records, cov_names


def write_panel_csv(panel: BalancedPanel, path) -> None:
    """Write an aggregate CSV (with count and covariate columns if present)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# format_version={FORMAT_VERSION}\n")
        cols = ["unit", "time", "value"]
        if panel.cell_counts is not None:
            cols.append("count")
        if panel.covariate_names:
            cols.extend(panel.covariate_names)
        fh.write(",".join(cols) + "\n")
        for i, u in enumerate(panel.units):
            for k, t in enumerate(panel.times):
                parts = [u, str(int(t)), repr(float(panel.y[i, k]))]
                if panel.cell_counts is not None:
                    parts.append(str(int(panel.cell_counts[i, k])))
                if panel.covariate_names:
                    parts.extend(repr(float(v)) for v in panel.covariates[i, k])
                fh.write(",".join(parts) + "\n")
