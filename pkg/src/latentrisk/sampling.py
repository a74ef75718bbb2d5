"""Cross-section sampling, data-matrix assembly and row standardization."""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import binio
from .cohort import DAYS_PER_YEAR, Kind
from .curves import Curveset
from .errors import InputError, SchemaError

LOG_OFFSET = 1.0 / DAYS_PER_YEAR
FINAL_YEAR_DAYS = int(round(DAYS_PER_YEAR))

CENTER_SCALE = "CenterScale2SD"
LOG_CENTER_SCALE = "LogCenterScale2SD"
IDENTITY = "Identity"


def sample_times(
    window: tuple[date, date],
    density: float = 1.0,
    force_final_year: bool = False,
    rng: int | np.random.Generator | None = None,
) -> list[date]:
    """Random sample dates at ``density`` per record-year within ``window``.

    Forced mode puts exactly one date in the final year and a Poisson number
    (mean ``density * (years - 1)``) uniformly in the remainder; windows
    shorter than a year get exactly one date. Unforced mode draws a Poisson
    count with mean ``density * years``, which may be zero.
    """
    start, end = window
    if end < start:
        raise InputError(f"empty window {start}..{end}")
    if density <= 0:
        raise InputError("density must be positive")
    rng = np.random.default_rng(rng)
    n_days = (end - start).days + 1
    years = n_days / DAYS_PER_YEAR
    if force_final_year:
        if years >= 1.0:
            head = n_days - FINAL_YEAR_DAYS
            days = [head + int(rng.integers(0, FINAL_YEAR_DAYS))]
            n = rng.poisson(density * (years - 1.0))
            if n and head > 0:
                days += rng.integers(0, head, size=n).tolist()
        else:
            days = [int(rng.integers(0, n_days))]
    else:
        n = rng.poisson(density * years)
        days = rng.integers(0, n_days, size=n).tolist()
    return [start + timedelta(days=int(d)) for d in sorted(days)]


@dataclass(frozen=True)
class CrossSection:
    patient_id: str
    sample_date: date
    values: np.ndarray


@dataclass(frozen=True)
class DataMatrix:
    values: np.ndarray  # m x n
    patient_ids: tuple[str, ...]
    dates: tuple[date, ...]

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def column(self, j: int) -> CrossSection:
        return CrossSection(self.patient_ids[j], self.dates[j], self.values[:, j])

    def with_values(self, values: np.ndarray) -> "DataMatrix":
        return DataMatrix(values, self.patient_ids, self.dates)

    def metadata(self) -> dict:
        return {"patient_ids": list(self.patient_ids), "dates": [d.isoformat() for d in self.dates]}

    def save(self, path: str | Path, sidecar: str | Path | None = None, stats: "StandardizationStats | None" = None) -> None:
        binio.write(path, "datamatrix", {"values": self.values}, {"m": self.m, "n": self.n})
        if sidecar is not None:
            doc = {"columns": self.metadata(), "standardization": stats.to_dict() if stats else None}
            Path(sidecar).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path, sidecar: str | Path) -> "DataMatrix":
        arrays, _ = binio.read(path, "datamatrix")
        doc = json.loads(Path(sidecar).read_text())
        cols = doc["columns"]
        return cls(arrays["values"], tuple(cols["patient_ids"]), tuple(date.fromisoformat(d) for d in cols["dates"]))


def assemble_matrix(samples: Iterable[tuple[Curveset, Sequence[date]]]) -> DataMatrix:
    """Stack sampled curveset columns; order is input patient order, then date."""
    cols, pids, dates = [], [], []
    m = None
    for cs, when in samples:
        if m is None:
            m = cs.m
        elif cs.m != m:
            raise SchemaError("curvesets disagree on row count")
        for d in sorted(when):
            i = (d - cs.start_date).days
            if not 0 <= i < cs.t:
                raise InputError(f"sample {d} outside curveset span of {cs.patient_id}")
            cols.append(cs.matrix[:, i])
            pids.append(cs.patient_id)
            dates.append(d)
    if not cols:
        raise InputError("no samples to assemble")
    return DataMatrix(np.column_stack(cols), tuple(pids), tuple(dates))


@dataclass(frozen=True)
class StandardizationStats:
    tags: tuple[str, ...]
    offset: np.ndarray
    mean: np.ndarray
    sd: np.ndarray

    @property
    def m(self) -> int:
        return len(self.tags)

    def to_dict(self) -> dict:
        return {
            "tags": list(self.tags),
            "offset": self.offset.tolist(),
            "mean": self.mean.tolist(),
            "sd": self.sd.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationStats":
        return cls(tuple(d["tags"]), np.asarray(d["offset"], float), np.asarray(d["mean"], float), np.asarray(d["sd"], float))

    @classmethod
    def identity(cls, m: int) -> "StandardizationStats":
        z = np.zeros(m)
        return cls((IDENTITY,) * m, z, z.copy(), np.ones(m))


def _check_finite(X: np.ndarray) -> None:
    if not np.all(np.isfinite(X)):
        raise InputError("data matrix contains non-finite values")


def standardize(X: DataMatrix, kinds: Sequence[Kind]) -> tuple[DataMatrix, StandardizationStats]:
    """Center and scale by two standard deviations; log first for condition intensities.

    Binary rows (medications, demographics) and constant rows pass through
    unchanged and are tagged Identity.
    """
    V = X.values
    if len(kinds) != V.shape[0]:
        raise SchemaError(f"{len(kinds)} kinds for {V.shape[0]} rows")
    _check_finite(V)
    m, n = V.shape
    tags, offset, mean, sd = [], np.zeros(m), np.zeros(m), np.ones(m)
    out = V.copy()
    for i, kind in enumerate(kinds):
        if kind is Kind.CONDITION:
            if np.any(V[i] < 0):
                raise InputError(f"row {i}: negative condition intensity")
            y = np.log(V[i] + LOG_OFFSET)
            tag, off = LOG_CENTER_SCALE, LOG_OFFSET
        elif kind is Kind.MEASUREMENT:
            y = V[i]
            tag, off = CENTER_SCALE, 0.0
        else:
            tags.append(IDENTITY)
            continue
        if np.ptp(y) == 0:
            tags.append(IDENTITY)
            continue
        if n < 2:
            raise InputError("need at least two columns to scale a row")
        mu = y.mean()
        s = y.std(ddof=1)
        out[i] = (y - mu) / (2.0 * s)
        tags.append(tag)
        offset[i], mean[i], sd[i] = off, mu, s
    return X.with_values(out), StandardizationStats(tuple(tags), offset, mean, sd)


def apply_standardization(X: DataMatrix, stats: StandardizationStats) -> DataMatrix:
    """Replay a fitted transform on new columns; values are never clipped."""
    V = X.values
    if V.shape[0] != stats.m:
        raise SchemaError(f"matrix has {V.shape[0]} rows, stats describe {stats.m}")
    _check_finite(V)
    out = V.copy()
    for i, tag in enumerate(stats.tags):
        if tag == IDENTITY:
            continue
        y = np.log(V[i] + stats.offset[i]) if tag == LOG_CENTER_SCALE else V[i]
        out[i] = (y - stats.mean[i]) / (2.0 * stats.sd[i])
    return X.with_values(out)
