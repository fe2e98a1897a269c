"""Observational datasets: roles, validation, CSV ingestion."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ParseError, ValidationError

log = logging.getLogger(__name__)


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _as2d(a, n):
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(n, -1) if arr.size else np.zeros((n, 0))
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Units with outcome, binary treatment and a split covariate set.

    ``covariates_discrete`` is the linear block (dummy-coded, ``h`` columns);
    ``covariates_continuous`` enters the power-series part (``s`` columns).
    Arrays are copied and made read-only on construction.
    """

    outcome: np.ndarray
    treatment: np.ndarray
    covariates_discrete: np.ndarray
    covariates_continuous: np.ndarray
    lagged_outcome: Optional[np.ndarray] = None
    unit_ids: Optional[np.ndarray] = None
    discrete_names: tuple = ()
    continuous_names: tuple = ()
    single_arm: bool = field(default=False, repr=False)

    def __post_init__(self):
        y = _frozen(self.outcome)
        n = y.shape[0]
        z = np.asarray(self.treatment)
        if z.shape != (n,):
            raise ValidationError(f"treatment has shape {z.shape}, expected ({n},)")
        bad = np.flatnonzero((z != 0) & (z != 1))
        if bad.size:
            raise ValidationError(
                f"treatment must be 0/1; unit at row {bad[0]} has value {z[bad[0]]!r}"
            )
        xd = _frozen(_as2d(self.covariates_discrete, n))
        xc = _frozen(_as2d(self.covariates_continuous, n))
        if xc.shape[1] < 1:
            raise ValidationError("at least one continuous covariate is required")
        lag = None if self.lagged_outcome is None else _frozen(self.lagged_outcome)
        for name, arr in [("outcome", y), ("covariates_discrete", xd),
                          ("covariates_continuous", xc), ("lagged_outcome", lag)]:
            if arr is None:
                continue
            if arr.shape[0] != n:
                raise ValidationError(f"{name} has {arr.shape[0]} rows, expected {n}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains missing or non-finite values")
        ids = np.arange(n).astype(str) if self.unit_ids is None else np.asarray(self.unit_ids).astype(str)
        if ids.shape != (n,):
            raise ValidationError("unit_ids length does not match n_units")
        ids = ids.copy()
        ids.setflags(write=False)
        dn = tuple(self.discrete_names) or tuple(f"d{j}" for j in range(xd.shape[1]))
        cn = tuple(self.continuous_names) or tuple(f"c{j}" for j in range(xc.shape[1]))
        if len(dn) != xd.shape[1] or len(cn) != xc.shape[1]:
            raise ValidationError("covariate names do not match column counts")
        n1 = int(np.sum(z == 1))
        if n == 0:
            raise ValidationError("dataset has no units")
        if not self.single_arm and (n1 == 0 or n1 == n):
            raise ValidationError("both treated and control units are required")
        set_ = object.__setattr__
        set_(self, "outcome", y)
        set_(self, "treatment", _frozen(z, dtype=np.int8))
        set_(self, "covariates_discrete", xd)
        set_(self, "covariates_continuous", xc)
        set_(self, "lagged_outcome", lag)
        set_(self, "unit_ids", ids)
        set_(self, "discrete_names", dn)
        set_(self, "continuous_names", cn)

    @property
    def n_units(self) -> int:
        return self.outcome.shape[0]

    @property
    def h(self) -> int:
        return self.covariates_discrete.shape[1]

    @property
    def s(self) -> int:
        return self.covariates_continuous.shape[1]

    @property
    def n_treated(self) -> int:
        return int(self.treatment.sum())

    @property
    def n_control(self) -> int:
        return self.n_units - self.n_treated

    @property
    def covariate_names(self) -> tuple:
        return self.discrete_names + self.continuous_names

    @property
    def covariates(self) -> np.ndarray:
        """All covariates, discrete block first."""
        return np.hstack([self.covariates_discrete, self.covariates_continuous])

    def take(self, index) -> "Dataset":
        """Row subset (boolean mask or integer indices, repeats allowed)."""
        idx = np.asarray(index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        z = self.treatment[idx]
        return Dataset(
            outcome=self.outcome[idx],
            treatment=z,
            covariates_discrete=self.covariates_discrete[idx],
            covariates_continuous=self.covariates_continuous[idx],
            lagged_outcome=None if self.lagged_outcome is None else self.lagged_outcome[idx],
            unit_ids=self.unit_ids[idx],
            discrete_names=self.discrete_names,
            continuous_names=self.continuous_names,
            single_arm=bool(z.size) and (z.min() == z.max()),
        )

    def replace(self, **changes) -> "Dataset":
        """Copy with some fields swapped (e.g. a transformed outcome)."""
        fields = dict(
            outcome=self.outcome, treatment=self.treatment,
            covariates_discrete=self.covariates_discrete,
            covariates_continuous=self.covariates_continuous,
            lagged_outcome=self.lagged_outcome, unit_ids=self.unit_ids,
            discrete_names=self.discrete_names, continuous_names=self.continuous_names,
            single_arm=self.single_arm,
        )
        fields.update(changes)
        return Dataset(**fields)

    def equals(self, other: "Dataset") -> bool:
        """Bitwise equality of every array and name."""
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.dtype.kind == b.dtype.kind and bool(np.all(a == b))

        return (
            same(self.outcome, other.outcome)
            and same(self.treatment, other.treatment)
            and same(self.covariates_discrete, other.covariates_discrete)
            and same(self.covariates_continuous, other.covariates_continuous)
            and same(self.lagged_outcome, other.lagged_outcome)
            and same(self.unit_ids, other.unit_ids)
            and self.discrete_names == other.discrete_names
            and self.continuous_names == other.continuous_names
        )


@dataclass(frozen=True)
class VariableRoles:
    """Assignment of CSV columns to analysis roles.

    ``discrete_columns`` are factors expanded into first-level-baseline dummies;
    ``indicator_columns`` are already numeric and enter the linear block as-is.
    """

    outcome_column: str
    treatment_column: str
    discrete_columns: Sequence[str] = ()
    continuous_columns: Sequence[str] = ()
    lagged_outcome_column: Optional[str] = None
    indicator_columns: Sequence[str] = ()
    id_column: Optional[str] = None

    def all_columns(self) -> list:
        cols = [self.outcome_column, self.treatment_column, *self.discrete_columns,
                *self.indicator_columns, *self.continuous_columns]
        if self.lagged_outcome_column:
            cols.append(self.lagged_outcome_column)
        if self.id_column:
            cols.append(self.id_column)
        return cols

    def validate(self):
        cols = self.all_columns()
        dupes = sorted({c for c in cols if cols.count(c) > 1})
        if dupes:
            raise ConfigurationError(f"columns assigned to more than one role: {dupes}")
        if not self.continuous_columns:
            raise ConfigurationError("at least one continuous column is required")


def _level_key(levels):
    try:
        return sorted(levels, key=float)
    except ValueError:
        return sorted(levels)


def load_csv(path, roles: VariableRoles) -> Dataset:
    """Read a comma-separated file into a validated :class:`Dataset`.

    Rows with an empty required cell are dropped (logged, never imputed).
    Discrete columns with ``c`` levels become ``c - 1`` dummies against the
    first level in sorted order; dummy names are ``"<column>=<level>"``.
    """
    roles.validate()
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file, header row required") from None
        for col in roles.all_columns():
            if col not in header:
                raise ConfigurationError(f"column {col!r} not found in {path}")
        pos = {c: header.index(c) for c in roles.all_columns()}
        rows = []
        dropped = 0
        for lineno, raw in enumerate(reader, start=2):
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) < len(header):
                raw = raw + [""] * (len(header) - len(raw))
            cells = {c: raw[i].strip() for c, i in pos.items()}
            required = [c for c in roles.all_columns() if c != roles.id_column]
            if any(cells[c] == "" for c in required):
                dropped += 1
                continue
            rows.append((lineno, cells))
    if dropped:
        log.warning("%s: dropped %d row(s) with missing required values", path, dropped)
    if not rows:
        raise ValidationError(f"{path}: no complete rows")

    numeric_cols = [roles.outcome_column, roles.treatment_column, *roles.indicator_columns,
                    *roles.continuous_columns]
    if roles.lagged_outcome_column:
        numeric_cols.append(roles.lagged_outcome_column)
    values = {c: np.empty(len(rows)) for c in numeric_cols}
    for r, (lineno, cells) in enumerate(rows):
        for c in numeric_cols:
            try:
                values[c][r] = float(cells[c])
            except ValueError:
                raise ParseError(
                    f"{path}: non-numeric value {cells[c]!r} in column {c!r} at line {lineno}"
                ) from None
    z = values[roles.treatment_column]
    bad = np.flatnonzero((z != 0) & (z != 1))
    if bad.size:
        lineno = rows[bad[0]][0]
        raise ValidationError(
            f"{path}: treatment column {roles.treatment_column!r} must be 0/1, "
            f"got {z[bad[0]]:g} at line {lineno}"
        )

    dummy_cols, dummy_names = [], []
    for c in roles.discrete_columns:
        col = [cells[c] for _, cells in rows]
        levels = _level_key(set(col))
        for lev in levels[1:]:
            dummy_cols.append(np.array([v == lev for v in col], dtype=float))
            dummy_names.append(f"{c}={lev}")
    for c in roles.indicator_columns:
        dummy_cols.append(values[c])
        dummy_names.append(c)
    n = len(rows)
    xd = np.column_stack(dummy_cols) if dummy_cols else np.zeros((n, 0))
    xc = np.column_stack([values[c] for c in roles.continuous_columns])
    ids = None
    if roles.id_column:
        ids = np.array([cells[roles.id_column] for _, cells in rows])
    return Dataset(
        outcome=values[roles.outcome_column],
        treatment=z.astype(np.int8),
        covariates_discrete=xd,
        covariates_continuous=xc,
        lagged_outcome=values.get(roles.lagged_outcome_column) if roles.lagged_outcome_column else None,
        unit_ids=ids,
        discrete_names=tuple(dummy_names),
        continuous_names=tuple(roles.continuous_columns),
    )


def write_csv(d: Dataset, path) -> VariableRoles:
    """Serialize ``d``; returns the roles that read it back unchanged.

    Floats are written with ``repr`` so re-ingestion is bitwise exact. The
    dummy block is written pre-coded and read back as indicator columns.
    """
    header = ["unit_id", "outcome", "treatment", *d.discrete_names, *d.continuous_names]
    if d.lagged_outcome is not None:
        header.append("lagged_outcome")
    if len(set(header)) != len(header):
        raise ConfigurationError("covariate names collide with reserved column names")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(d.n_units):
            row = [d.unit_ids[i], repr(float(d.outcome[i])), int(d.treatment[i])]
            row += [repr(float(v)) for v in d.covariates_discrete[i]]
            row += [repr(float(v)) for v in d.covariates_continuous[i]]
            if d.lagged_outcome is not None:
                row.append(repr(float(d.lagged_outcome[i])))
            w.writerow(row)
    return VariableRoles(
        outcome_column="outcome",
        treatment_column="treatment",
        continuous_columns=tuple(d.continuous_names),
        indicator_columns=tuple(d.discrete_names),
        lagged_outcome_column="lagged_outcome" if d.lagged_outcome is not None else None,
        id_column="unit_id",
    )


def split_by_treatment(d: Dataset) -> tuple:
    """Return ``(treated, control)`` subsets, preserving unit ids and order."""
    return d.take(d.treatment == 1), d.take(d.treatment == 0)
