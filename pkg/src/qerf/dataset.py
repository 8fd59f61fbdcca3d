"""Observational data model and CSV ingestion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import (
    EmptyAfterTrim,
    EmptyDataset,
    MissingColumn,
    ParseFailure,
    ValidationError,
)


@dataclass(frozen=True)
class ExposureRange:
    w_min: float
    w_max: float

    def __post_init__(self):
        if not self.w_min < self.w_max:
            raise ValidationError(f"empty exposure range [{self.w_min}, {self.w_max}]")

    @classmethod
    def of(cls, exposure) -> "ExposureRange":
        exposure = np.asarray(exposure, dtype=float)
        return cls(float(exposure.min()), float(exposure.max()))

    @property
    def width(self) -> float:
        return self.w_max - self.w_min


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ObservationalDataset:
    """Units with a continuous exposure, pre-exposure covariates and an outcome.

    ``outcome`` may be ``None`` for design-only work (matching never looks at
    it). ``unit_weight`` defaults to ones. Arrays are copied and made
    read-only on construction.
    """

    exposure: np.ndarray
    covariates: np.ndarray
    outcome: Optional[np.ndarray] = None
    unit_weight: Optional[np.ndarray] = None
    covariate_names: tuple = field(default=())

    def __post_init__(self):
        w = _frozen(self.exposure)
        if w.ndim != 1:
            raise ValidationError("exposure must be one-dimensional")
        n = w.shape[0]
        if n < 2:
            raise EmptyDataset(f"need at least 2 units, got {n}")
        c = np.array(self.covariates, dtype=float)
        if c.ndim == 1:
            c = c.reshape(n, -1) if c.size else np.empty((n, 0))
        if c.shape[0] != n:
            raise ValidationError(f"covariates have {c.shape[0]} rows, exposure has {n}")
        c.setflags(write=False)
        y = None
        if self.outcome is not None:
            y = _frozen(self.outcome)
            if y.shape != (n,):
                raise ValidationError(f"outcome has shape {y.shape}, expected ({n},)")
        u = np.ones(n) if self.unit_weight is None else np.array(self.unit_weight, dtype=float)
        if u.shape != (n,):
            raise ValidationError(f"unit_weight has shape {u.shape}, expected ({n},)")
        u.setflags(write=False)
        for name, arr in (("exposure", w), ("covariates", c), ("outcome", y), ("unit_weight", u)):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains missing or non-finite values")
        if np.any(u <= 0):
            raise ValidationError("unit_weight must be strictly positive")
        names = tuple(self.covariate_names) or tuple(f"c{k + 1}" for k in range(c.shape[1]))
        if len(names) != c.shape[1]:
            raise ValidationError(f"{len(names)} covariate names for {c.shape[1]} columns")
        object.__setattr__(self, "exposure", w)
        object.__setattr__(self, "covariates", c)
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "unit_weight", u)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n_units(self) -> int:
        return self.exposure.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @property
    def exposure_range(self) -> ExposureRange:
        return ExposureRange.of(self.exposure)

    def subset(self, mask) -> "ObservationalDataset":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return ObservationalDataset(
            exposure=self.exposure[idx],
            covariates=self.covariates[idx],
            outcome=None if self.outcome is None else self.outcome[idx],
            unit_weight=self.unit_weight[idx],
            covariate_names=self.covariate_names,
        )

    def with_weights(self, unit_weight) -> "ObservationalDataset":
        return replace(self, unit_weight=unit_weight)

    def without_outcome(self) -> "ObservationalDataset":
        return replace(self, outcome=None)


@dataclass(frozen=True)
class ColumnMapping:
    exposure: str
    outcome: Optional[str] = None
    covariates: Sequence[str] = ()
    weight: Optional[str] = None


def _parse_cell(text, row, col):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise ParseFailure(row, col, text) from None
    if not math.isfinite(value):
        raise ParseFailure(row, col, text)
    return value


def load_csv(path, schema: ColumnMapping) -> ObservationalDataset:
    """Read a header-first decimal CSV into a validated dataset.

    Blank or non-numeric cells in mapped columns raise :class:`ParseFailure`
    carrying the 1-based data row and the column name. Unmapped columns are
    ignored.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyDataset(f"{path} is empty") from None
        wanted = [schema.exposure, *schema.covariates]
        if schema.outcome is not None:
            wanted.append(schema.outcome)
        if schema.weight is not None:
            wanted.append(schema.weight)
        for col in wanted:
            if col not in header:
                raise MissingColumn(col)
        pos = {name: header.index(name) for name in wanted}
        columns = {name: [] for name in wanted}
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            for name in wanted:
                cell = row[pos[name]] if pos[name] < len(row) else ""
                columns[name].append(_parse_cell(cell.strip(), row_no, name))
    n = len(columns[schema.exposure])
    if n == 0:
        raise EmptyDataset(f"{path} has a header but no data rows")
    covs = np.column_stack([columns[c] for c in schema.covariates]) if schema.covariates else np.empty((n, 0))
    return ObservationalDataset(
        exposure=columns[schema.exposure],
        covariates=covs,
        outcome=columns[schema.outcome] if schema.outcome is not None else None,
        unit_weight=columns[schema.weight] if schema.weight is not None else None,
        covariate_names=tuple(schema.covariates),
    )


def format_number(x) -> str:
    """Shortest decimal text that round-trips to the same float."""
    return repr(float(x))


def write_csv(ds: ObservationalDataset, path, schema: Optional[ColumnMapping] = None):
    """Write ``ds`` so that :func:`load_csv` with ``schema`` reproduces it exactly."""
    if schema is None:
        schema = ColumnMapping(
            exposure="w",
            outcome="y" if ds.outcome is not None else None,
            covariates=ds.covariate_names,
            weight=None if np.all(ds.unit_weight == 1.0) else "unit_weight",
        )
    header = list(schema.covariates) + [schema.exposure]
    cols = [ds.covariates[:, k] for k in range(ds.n_covariates)] + [ds.exposure]
    if schema.outcome is not None:
        header.append(schema.outcome)
        cols.append(ds.outcome)
    if schema.weight is not None:
        header.append(schema.weight)
        cols.append(ds.unit_weight)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(ds.n_units):
            writer.writerow([format_number(c[i]) for c in cols])
    return schema


def trim_exposure(ds: ObservationalDataset, lo_pct: float, hi_pct: float) -> ObservationalDataset:
    """Keep units whose exposure lies between two weighted exposure percentiles.

    Percentiles follow the left-continuous (inf) convention of
    :func:`qerf.quantile.weighted_quantile`, weighted by ``unit_weight``;
    ``0`` and ``1`` map to the sample minimum and maximum.
    """
    from .quantile import weighted_quantile

    if not (0.0 <= lo_pct <= hi_pct <= 1.0):
        raise ValidationError(f"need 0 <= lo_pct < hi_pct <= 1, got ({lo_pct}, {hi_pct})")
    if lo_pct == hi_pct:
        raise EmptyAfterTrim(f"degenerate trimming bounds ({lo_pct}, {hi_pct})")

    def bound(p):
        if p == 0.0:
            return ds.exposure.min()
        if p == 1.0:
            return ds.exposure.max()
        return weighted_quantile(ds.exposure, ds.unit_weight, p)

    lo, hi = bound(lo_pct), bound(hi_pct)
    keep = (ds.exposure >= lo) & (ds.exposure <= hi)
    if keep.sum() < 2:
        raise EmptyAfterTrim(f"fewer than 2 units with exposure in [{lo}, {hi}]")
    if keep.all():
        return ds
    return ds.subset(keep)
