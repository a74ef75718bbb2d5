"""Dense daily curves inferred from irregular record observations.

Each clinical variable gets one row of a curveset, built by a constructor
matched to its kind: randomized averaged shifted histograms for condition
codes, shape-preserving cubic Hermite interpolation for measurements, step
functions for medication lists and constants for demographics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import binio
from .cohort import DAYS_PER_YEAR, Cohort, Kind, PatientRecord, VariableDescriptor, code_matches
from .errors import InputError, SchemaError

BASELINE_INTENSITY = 1.0 / 20.0


@dataclass(frozen=True)
class DailyCurve:
    start_date: date
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.values)

    def at(self, d: date) -> float:
        return float(self.values[(d - self.start_date).days])


@dataclass(frozen=True)
class Curveset:
    patient_id: str
    start_date: date
    matrix: np.ndarray  # m x t

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def t(self) -> int:
        return self.matrix.shape[1]

    def column(self, d: date) -> np.ndarray:
        i = (d - self.start_date).days
        if not 0 <= i < self.t:
            raise InputError(f"{d} outside curveset span of {self.patient_id}")
        return self.matrix[:, i]

    def save(self, path: str | Path) -> None:
        binio.write(
            path,
            "curveset",
            {"matrix": self.matrix},
            {"patient_id": self.patient_id, "start_date": self.start_date.isoformat(), "m": self.m, "t": self.t},
        )

    @classmethod
    def load(cls, path: str | Path) -> "Curveset":
        arrays, meta = binio.read(path, "curveset")
        return cls(meta["patient_id"], date.fromisoformat(meta["start_date"]), arrays["matrix"])

    def to_csv(self, path: str | Path, variables: Sequence[VariableDescriptor] | None = None) -> None:
        ids = [v.id for v in variables] if variables is not None else [f"v{i}" for i in range(self.m)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["date", *ids])
            for j in range(self.t):
                d = self.start_date + timedelta(days=j)
                w.writerow([d.isoformat(), *(repr(float(x)) for x in self.matrix[:, j])])


@dataclass(frozen=True)
class PopulationStats:
    medians: Mapping[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"medians": dict(sorted(self.medians.items()))}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PopulationStats":
        return cls({k: float(v) for k, v in d["medians"].items()})


@dataclass(frozen=True)
class CurveParams:
    bandwidth_days: int = 365
    n_shifts: int = 16
    baseline_intensity: float = BASELINE_INTENSITY
    # codes under these prefixes are ignored instead of raising SchemaError
    ignore_prefixes: tuple[str, ...] = ()


def _window_days(window: tuple[date, date]) -> int:
    start, end = window
    if end < start:
        raise InputError(f"empty window {start}..{end}")
    return (end - start).days + 1


def rash_intensity_curve(
    event_dates: Iterable[date],
    window: tuple[date, date],
    bandwidth_days: int = 365,
    n_shifts: int = 16,
    seed: int | np.random.SeedSequence = 0,
) -> DailyCurve:
    """Annualized event intensity from randomly shifted, averaged histograms.

    Bins are clipped to the window and each bin's count is spread evenly over
    the days it covers, so every shifted histogram integrates to the event
    count (in events, with days weighted 1/365.25).
    """
    if bandwidth_days < 1 or n_shifts < 1:
        raise InputError("bandwidth_days and n_shifts must be >= 1")
    start, end = window
    t = _window_days(window)
    ev = np.array([(d - start).days for d in event_dates], dtype=np.int64)
    if ev.size and (ev.min() < 0 or ev.max() >= t):
        raise InputError("event outside window")
    values = np.zeros(t)
    if ev.size == 0:
        return DailyCurve(start, values)
    h = float(bandwidth_days)
    offsets = np.random.default_rng(seed).uniform(0.0, h, size=n_shifts)
    days = np.arange(t)
    for o in offsets:
        day_bin = np.floor((days + o) / h).astype(np.int64)
        nb = int(day_bin[-1]) + 1
        width = np.bincount(day_bin, minlength=nb)
        counts = np.bincount(np.floor((ev + o) / h).astype(np.int64), minlength=nb)
        values += (counts / width * DAYS_PER_YEAR)[day_bin]
    values /= n_shifts
    return DailyCurve(start, values)


def pchip_slopes(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Fritsch-Carlson derivatives (weighted harmonic mean, zero at extrema)."""
    n = len(x)
    if n == 1:
        return np.zeros(1)
    h = np.diff(x)
    delta = np.diff(y) / h
    if n == 2:
        return np.full(2, delta[0])
    d = np.zeros(n)
    w1 = 2 * h[1:] + h[:-1]
    w2 = h[1:] + 2 * h[:-1]
    same = np.sign(delta[:-1]) * np.sign(delta[1:]) > 0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        hm = (w1 + w2) / (w1 / delta[:-1] + w2 / delta[1:])
    d[1:-1] = np.where(same, hm, 0.0)
    d[0] = _end_slope(h[0], h[1], delta[0], delta[1])
    d[-1] = _end_slope(h[-1], h[-2], delta[-1], delta[-2])
    return d


def _end_slope(h0, h1, del0, del1):
    d = ((2 * h0 + h1) * del0 - h0 * del1) / (h0 + h1)
    if np.sign(d) != np.sign(del0):
        return 0.0
    if np.sign(del0) != np.sign(del1) and abs(d) > abs(3 * del0):
        return 3 * del0
    return d


def pchip_eval(x: np.ndarray, y: np.ndarray, d: np.ndarray, xq: np.ndarray) -> np.ndarray:
    """Evaluate the Hermite interpolant; constant beyond the first and last knot."""
    xq = np.asarray(xq, dtype=float)
    out = np.empty_like(xq)
    lo, hi = xq <= x[0], xq >= x[-1]
    out[lo] = y[0]
    out[hi] = y[-1]
    mid = ~(lo | hi)
    if len(x) == 1 or not mid.any():
        return out
    q = xq[mid]
    k = np.clip(np.searchsorted(x, q, side="right") - 1, 0, len(x) - 2)
    hk = x[k + 1] - x[k]
    s = (q - x[k]) / hk
    dy = y[k + 1] - y[k]
    h01 = s * s * (3 - 2 * s)
    h10 = s * (1 - s) ** 2
    h11 = s * s * (s - 1)
    v = y[k] + (dy * h01 + hk * (d[k] * h10 + d[k + 1] * h11))
    # A segment whose end slopes agree in sign with dy is monotone in exact
    # arithmetic. Evaluate it as y0 + dy * p(s) with the normalized shape p
    # clipped to [0, 1]; rounding then cannot reverse the ordering of days.
    mono = (d[k] * dy >= 0) & (d[k + 1] * dy >= 0) & (dy != 0)
    if mono.any():
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(mono, hk * d[k] / dy, 0.0)
            b = np.where(mono, hk * d[k + 1] / dy, 0.0)
        shape = np.clip(h01 + a * h10 + b * h11, 0.0, 1.0)
        v = np.where(mono, y[k] + dy * shape, v)
    out[mid] = v
    return out


def pchip_curve(observations: Sequence[tuple[date, float]], window: tuple[date, date]) -> DailyCurve:
    if len(observations) == 0:
        raise InputError("pchip_curve needs at least one observation")
    start, _ = window
    t = _window_days(window)
    x = np.array([(d - start).days for d, _ in observations], dtype=float)
    y = np.array([v for _, v in observations], dtype=float)
    if np.any(np.diff(x) == 0):
        raise InputError("duplicate observation dates")
    if np.any(np.diff(x) < 0):
        raise InputError("observation dates must be strictly increasing")
    if x[0] < 0 or x[-1] >= t:
        raise InputError("observation outside window")
    d = pchip_slopes(x, y)
    values = pchip_eval(x, y, d, np.arange(t, dtype=float))
    values[x.astype(np.int64)] = y
    return DailyCurve(start, values)


def adherence_curve(med_snapshots: Sequence[tuple[date, bool]], window: tuple[date, date]) -> DailyCurve:
    """Binary regimen curve: on from a listing visit, off at the midpoint to a dropping visit."""
    start, _ = window
    t = _window_days(window)
    values = np.zeros(t)
    prev_day = None
    state = False
    for d, present in med_snapshots:
        day = (d - start).days
        if not 0 <= day < t:
            raise InputError(f"snapshot {d} outside window")
        if prev_day is not None and day <= prev_day:
            raise InputError("snapshot dates must be strictly increasing")
        if present and not state:
            values[day:] = 1.0
        elif not present and state:
            values[int(np.ceil((prev_day + day) / 2.0)) :] = 0.0
        state = bool(present)
        prev_day = day
    return DailyCurve(start, values)


def population_stats(cohort: Cohort) -> PopulationStats:
    """Pooled median of every observed value per measurement variable."""
    medians = {}
    for v in cohort.variables:
        if v.kind is not Kind.MEASUREMENT:
            continue
        vals = [x for r in cohort.records for _, x in r.measurements.get(v.id, ())]
        if v.id == "age" and not vals:
            vals = [
                ((r.record_end - r.birth_date).days) / DAYS_PER_YEAR for r in cohort.records if r.birth_date is not None
            ]
        medians[v.id] = float(np.median(vals)) if vals else 0.0
    return PopulationStats(medians)


def _condition_index(variables: Sequence[VariableDescriptor]) -> dict[str, int]:
    return {v.id: i for i, v in enumerate(variables) if v.kind is Kind.CONDITION}


def _resolve_code(code: str, cond_index: dict[str, int]) -> int | None:
    if code in cond_index:
        return cond_index[code]
    best = None
    for vid, i in cond_index.items():
        if code_matches(code, vid) and (best is None or len(vid) > len(best[0])):
            best = (vid, i)
    return best[1] if best else None


def build_curveset(
    record: PatientRecord,
    variables: Sequence[VariableDescriptor],
    stats: PopulationStats,
    params: CurveParams = CurveParams(),
    seed: int = 0,
) -> Curveset:
    window = (record.record_start, record.record_end)
    t = record.n_days
    m = len(variables)
    index = {v.id: i for i, v in enumerate(variables)}
    cond_index = _condition_index(variables)

    events: dict[int, list[date]] = {}
    for d, concept in record.condition_events:
        row = _resolve_code(concept.code, cond_index)
        if row is None:
            if any(code_matches(concept.code, p) for p in params.ignore_prefixes):
                continue
            raise SchemaError(f"{record.patient_id}: code {concept.code} not in variable dictionary")
        events.setdefault(row, []).append(d)
    for var in record.measurements:
        if var not in index or variables[index[var]].kind is not Kind.MEASUREMENT:
            raise SchemaError(f"{record.patient_id}: measurement {var} not in variable dictionary")
    med_ids = set().union(*(meds for _, meds in record.med_snapshots)) if record.med_snapshots else set()
    for var in med_ids:
        if var not in index or variables[index[var]].kind is not Kind.MEDICATION:
            raise SchemaError(f"{record.patient_id}: medication {var} not in variable dictionary")
    for var in record.demographics:
        if var not in index or variables[index[var]].kind is not Kind.DEMOGRAPHIC:
            raise SchemaError(f"{record.patient_id}: demographic {var} not in variable dictionary")

    matrix = np.empty((m, t))
    seeds = np.random.SeedSequence(seed).spawn(m)
    for i, v in enumerate(variables):
        if v.kind is Kind.CONDITION:
            if i in events:
                matrix[i] = rash_intensity_curve(
                    events[i], window, params.bandwidth_days, params.n_shifts, seeds[i]
                ).values
            else:
                matrix[i] = params.baseline_intensity
        elif v.kind is Kind.MEASUREMENT:
            obs = record.measurements.get(v.id)
            if obs:
                matrix[i] = pchip_curve(obs, window).values
            elif v.id == "age" and record.birth_date is not None:
                offset = (record.record_start - record.birth_date).days
                matrix[i] = (offset + np.arange(t)) / DAYS_PER_YEAR
            else:
                matrix[i] = stats.medians.get(v.id, 0.0)
        elif v.kind is Kind.MEDICATION:
            if v.id in med_ids:
                snaps = [(d, v.id in meds) for d, meds in record.med_snapshots]
                matrix[i] = adherence_curve(snaps, window).values
            else:
                matrix[i] = 0.0
        else:
            matrix[i] = float(record.demographics.get(v.id, 0))
    return Curveset(record.patient_id, record.record_start, matrix)
