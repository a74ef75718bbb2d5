"""Longitudinal record types and a synthetic cohort generator with planted sources.

The generator mixes k independent, non-Gaussian source traces through a sparse
mixing matrix into m latent variable tracks. Condition codes arrive as an
inhomogeneous Poisson process with intensity ``rate * exp(link * z)``,
measurements are noisy reads of ``z`` at visits, and medications are present
on a visit list when ``z`` crosses a threshold. One designated source raises
the hazard of a cryptogenic-type stroke code cluster.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from datetime import date, timedelta
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from . import binio
from .errors import ConfigError, SchemaError

DAYS_PER_YEAR = 365.25
COHORT_FORMAT = "latentrisk-cohort"
COHORT_VERSION = 1


class Kind(str, Enum):
    CONDITION = "Condition"
    MEDICATION = "Medication"
    DEMOGRAPHIC = "Demographic"
    MEASUREMENT = "Measurement"


def code_matches(code: str, prefix: str, exact: bool = False) -> bool:
    """Hierarchical match: ``"I63"`` matches ``"I63.52"``; ``exact`` disables descent."""
    if exact:
        return code == prefix
    return bool(prefix) and code.startswith(prefix)


@dataclass(frozen=True)
class CodedConcept:
    code: str
    kind: Kind = Kind.CONDITION

    def __post_init__(self):
        if not self.code:
            raise ValueError("code must be non-empty")

    def matches(self, prefix: str, exact: bool = False) -> bool:
        return code_matches(self.code, prefix, exact)


@dataclass(frozen=True)
class VariableDescriptor:
    id: str
    kind: Kind
    name: str = ""


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    record_start: date
    record_end: date
    condition_events: tuple[tuple[date, CodedConcept], ...] = ()
    measurements: Mapping[str, tuple[tuple[date, float], ...]] = field(default_factory=dict)
    med_snapshots: tuple[tuple[date, frozenset[str]], ...] = ()
    demographics: Mapping[str, int] = field(default_factory=dict)
    birth_date: date | None = None

    @property
    def n_days(self) -> int:
        return (self.record_end - self.record_start).days + 1

    def codes(self) -> set[str]:
        return {c.code for _, c in self.condition_events}


@dataclass(frozen=True)
class Cohort:
    records: tuple[PatientRecord, ...]
    variables: tuple[VariableDescriptor, ...]

    @property
    def m(self) -> int:
        return len(self.variables)

    def kinds(self) -> list[Kind]:
        return [v.kind for v in self.variables]

    def subset(self, patient_ids: Iterable[str]) -> "Cohort":
        keep = set(patient_ids)
        return Cohort(tuple(r for r in self.records if r.patient_id in keep), self.variables)


@dataclass(frozen=True)
class SyntheticGroundTruth:
    """Planted structure behind a generated cohort.

    Source traces are piecewise constant: segment ``i`` belongs to patient
    ``segment_patient[i]``, starts ``segment_start[i]`` days after that
    patient's record start and carries activations ``segment_values[i]``.
    """

    true_mixing: np.ndarray
    segment_patient: np.ndarray
    segment_start: np.ndarray
    segment_values: np.ndarray
    patient_sources: np.ndarray
    planted_risk_source: int
    source_families: tuple[str, ...]

    @property
    def k(self) -> int:
        return self.true_mixing.shape[1]

    def save(self, path: str | Path) -> None:
        binio.write(
            path,
            "ground-truth",
            {
                "true_mixing": self.true_mixing,
                "segment_patient": self.segment_patient,
                "segment_start": self.segment_start,
                "segment_values": self.segment_values,
                "patient_sources": self.patient_sources,
            },
            {"planted_risk_source": self.planted_risk_source, "source_families": list(self.source_families)},
        )

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticGroundTruth":
        arrays, meta = binio.read(path, "ground-truth")
        return cls(
            arrays["true_mixing"],
            arrays["segment_patient"],
            arrays["segment_start"],
            arrays["segment_values"],
            arrays["patient_sources"],
            int(meta["planted_risk_source"]),
            tuple(meta["source_families"]),
        )


# --------------------------------------------------------------------------
# record validation


def validate_record(record: PatientRecord) -> list[str]:
    """Return a list of invariant violations; empty when the record is well formed."""
    out = []
    start, end = record.record_start, record.record_end
    if start > end:
        out.append(f"record_start: {start} is after record_end {end}")
        return out
    for i, (d, concept) in enumerate(record.condition_events):
        if not start <= d <= end:
            out.append(f"condition_events[{i}]: {concept.code} on {d} outside [{start}, {end}]")
    for var, obs in record.measurements.items():
        for i, (d, _) in enumerate(obs):
            if not start <= d <= end:
                out.append(f"measurements[{var}][{i}]: {d} outside [{start}, {end}]")
    prev = None
    for i, (d, _) in enumerate(record.med_snapshots):
        if not start <= d <= end:
            out.append(f"med_snapshots[{i}]: {d} outside [{start}, {end}]")
        if prev is not None and d <= prev:
            out.append(f"med_snapshots[{i}]: non-increasing snapshot dates ({prev} then {d})")
        prev = d
    for var, v in record.demographics.items():
        if v not in (0, 1):
            out.append(f"demographics[{var}]: value {v!r} is not binary")
    return out


# --------------------------------------------------------------------------
# generator

NEURO_CODES = ("G43.909", "G40.909", "G47.33")
MIGRAINE_CODE = "G43.909"

_CONDITION_CODES = (
    "I10", "E78.5", "E11.9", "J30.9", "F41.9", "F32.9", "K21.9", "M54.5", "E66.9",
    "J45.909", "N39.0", "R51.9", "D57.1", "E03.9", "I48.91", "R42", "G89.29",
    "M79.7", "K58.9", "Z72.0", "F17.210", "R07.9", "I25.10", "N18.3", "J44.9",
    "E55.9", "D64.9", "R53.83", "M19.90", "L40.0", "G56.00", "H53.8", "R20.2",
    "E28.2", "Q21.1", "R00.2", "I95.9", "K76.0", "M25.50",
)
_MEASUREMENTS = (
    "weight", "systolic_bp", "diastolic_bp", "ldl", "hdl", "triglycerides", "hba1c",
    "glucose", "creatinine", "hemoglobin", "platelets", "wbc", "sodium", "potassium",
    "bmi", "heart_rate", "tsh", "alt", "crp", "inr",
)
_MEDICATIONS = (
    "atorvastatin", "aspirin", "clopidogrel", "lisinopril", "topiramate", "propranolol",
    "phenytoin", "sumatriptan", "metformin", "amlodipine", "warfarin", "estradiol",
    "fluticasone", "cetirizine", "amitriptyline", "levetiracetam", "hydroxyurea",
)
_DEMOGRAPHICS = ("sex_female", "race_white", "race_black", "race_other", "ethnicity_hispanic")

CRYPTO_STROKE_CODES = ("I63.9", "I63.52", "I63.8", "I63.6", "I63.212", "I67.848", "G43.609")
_CRYPTO_WEIGHTS = (0.4, 0.15, 0.12, 0.1, 0.08, 0.08, 0.07)
NONCRYPTO_STROKE_CODES = ("I63.30", "I63.40", "I63.012", "I63.10")
NONSPECIFIC_STROKE_CODE = "I63.50"
RECORD_CUTOFF = date(2024, 8, 31)


@dataclass(frozen=True)
class GeneratorConfig:
    n_patients: int = 2000
    m: int = 60
    k_true: int = 8
    mean_record_years: float = 10.0
    record_years_cv: float = 0.5
    min_record_years: float = 0.5
    max_record_years: float = 20.0
    condition_fraction: float = 0.4
    measurement_fraction: float = 0.3
    medication_fraction: float = 0.2
    include_age: bool = True
    neuro_codes: bool = True
    migraine_fraction: float = 0.8
    condition_rate_range: tuple[float, float] = (0.3, 1.5)
    condition_link: float = 1.0
    loadings_per_source: tuple[int, int] = (3, 6)
    source_persistence: float = 0.7
    segment_days: int = 365
    visit_rate: float = 3.0
    measurement_obs_prob: float = 0.6
    measurement_noise: float = 0.2
    medication_threshold: float = 0.5
    medication_noise: float = 0.3
    risk_source: int = 0
    stroke_base_rate: float = 0.003
    risk_effect: float = 2.5
    noncrypto_stroke_rate: float = 0.006
    nonspecific_stroke_rate: float = 0.003
    spurious_code_rate: float = 0.004
    mean_followup_codes: float = 1.5

    def validate(self) -> None:
        if self.n_patients < 0:
            raise ConfigError("n_patients must be >= 0")
        if self.k_true < 1:
            raise ConfigError("k_true must be >= 1")
        if self.m < self.k_true:
            raise ConfigError(f"k_true={self.k_true} exceeds m={self.m}")
        if not 0 <= self.risk_source < self.k_true:
            raise ConfigError("risk_source must index a planted source")
        rates = {
            "condition_rate_range": min(self.condition_rate_range),
            "visit_rate": self.visit_rate,
            "stroke_base_rate": self.stroke_base_rate,
            "noncrypto_stroke_rate": self.noncrypto_stroke_rate,
            "nonspecific_stroke_rate": self.nonspecific_stroke_rate,
            "spurious_code_rate": self.spurious_code_rate,
            "mean_followup_codes": self.mean_followup_codes,
            "measurement_noise": self.measurement_noise,
            "medication_noise": self.medication_noise,
            "record_years_cv": self.record_years_cv,
        }
        for name, v in rates.items():
            if v < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.condition_rate_range[0] > self.condition_rate_range[1]:
            raise ConfigError("condition_rate_range must be (low, high)")
        if self.mean_record_years <= 0 or self.min_record_years <= 0:
            raise ConfigError("record lengths must be positive")
        fr = (self.condition_fraction, self.measurement_fraction, self.medication_fraction)
        if min(fr) < 0 or sum(fr) > 1 + 1e-12:
            raise ConfigError("kind fractions must be non-negative and sum to at most 1")
        if not 0 <= self.source_persistence <= 1:
            raise ConfigError("source_persistence must lie in [0, 1]")
        if not 0 <= self.migraine_fraction <= 1 or not 0 <= self.measurement_obs_prob <= 1:
            raise ConfigError("probabilities must lie in [0, 1]")
        if self.segment_days < 1:
            raise ConfigError("segment_days must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeneratorConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown generator settings: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def _kind_counts(cfg: GeneratorConfig) -> dict[Kind, int]:
    m = cfg.m
    fr = {
        Kind.CONDITION: cfg.condition_fraction,
        Kind.MEASUREMENT: cfg.measurement_fraction,
        Kind.MEDICATION: cfg.medication_fraction,
        Kind.DEMOGRAPHIC: max(0.0, 1.0 - cfg.condition_fraction - cfg.measurement_fraction - cfg.medication_fraction),
    }
    raw = {k: v * m for k, v in fr.items()}
    counts = {k: int(math.floor(v)) for k, v in raw.items()}
    # largest remainder, stable order
    order = sorted(fr, key=lambda k: (-(raw[k] - counts[k]), list(fr).index(k)))
    for k in order[: m - sum(counts.values())]:
        counts[k] += 1
    return counts


def build_variables(cfg: GeneratorConfig) -> tuple[VariableDescriptor, ...]:
    counts = _kind_counts(cfg)
    out = []
    neuro = list(NEURO_CODES) if cfg.neuro_codes else []
    n_cond = counts[Kind.CONDITION]
    cond_codes = (neuro + list(_CONDITION_CODES))[:n_cond]
    cond_codes += [f"Z{90 + i // 10}.{i % 10}" for i in range(n_cond - len(cond_codes))]
    out += [VariableDescriptor(c, Kind.CONDITION, c) for c in cond_codes]
    n_meas = counts[Kind.MEASUREMENT]
    meas = (["age"] if cfg.include_age and n_meas > 0 else []) + list(_MEASUREMENTS)
    meas = meas[:n_meas] + [f"lab_{i}" for i in range(max(0, n_meas - len(meas)))]
    out += [VariableDescriptor(v, Kind.MEASUREMENT, v) for v in meas]
    meds = list(_MEDICATIONS)[: counts[Kind.MEDICATION]]
    meds += [f"med_{i}" for i in range(counts[Kind.MEDICATION] - len(meds))]
    out += [VariableDescriptor(v, Kind.MEDICATION, v) for v in meds]
    demo = list(_DEMOGRAPHICS)[: counts[Kind.DEMOGRAPHIC]]
    demo += [f"demo_{i}" for i in range(counts[Kind.DEMOGRAPHIC] - len(demo))]
    out += [VariableDescriptor(v, Kind.DEMOGRAPHIC, v) for v in demo]
    return tuple(out)


def _source_families(k: int, risk: int) -> tuple[str, ...]:
    fam = ["laplace" if j % 2 else "uniform" for j in range(k)]
    fam[risk] = "uniform"
    return tuple(fam)


def draw_sources(families: tuple[str, ...], size: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance, zero-mean draws, shape (size, k)."""
    out = np.empty((size, len(families)))
    for j, fam in enumerate(families):
        if fam == "uniform":
            out[:, j] = rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), size)
        else:
            out[:, j] = rng.laplace(0.0, 1.0 / math.sqrt(2.0), size)
    return out


def _driven_rows(variables: tuple[VariableDescriptor, ...]) -> list[int]:
    return [i for i, v in enumerate(variables) if v.id not in NEURO_CODES and v.id != "age"]


def _mixing_matrix(cfg: GeneratorConfig, variables, rng: np.random.Generator) -> np.ndarray:
    m, k = len(variables), cfg.k_true
    driven = _driven_rows(variables)
    if len(driven) < k:
        raise ConfigError("too few source-driven variables for k_true sources")
    meas = [i for i in driven if variables[i].kind is Kind.MEASUREMENT]
    lo, hi = cfg.loadings_per_source
    for _ in range(100):
        A = np.zeros((m, k))
        for j in range(k):
            n_load = int(rng.integers(lo, hi + 1))
            n_load = min(max(n_load, 1), len(driven))
            rows = rng.choice(driven, size=n_load, replace=False)
            if j == cfg.risk_source and meas:
                extra = [r for r in rng.choice(meas, size=min(2, len(meas)), replace=False) if r not in rows]
                rows = np.concatenate([rows, np.asarray(extra, dtype=int)])
            A[rows, j] = rng.choice([-1.0, 1.0], size=len(rows)) * rng.uniform(0.6, 1.4, size=len(rows))
        if np.linalg.matrix_rank(A) == k:
            return A
    raise ConfigError("could not draw a full-rank mixing matrix; increase m or loadings")


def mixed_observations(
    truth: SyntheticGroundTruth, n_samples: int, seed: int, noise: float = 0.0
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n_samples`` i.i.d. source vectors and mix them: returns (X m×n, S k×n)."""
    rng = np.random.default_rng(seed)
    S = draw_sources(truth.source_families, n_samples, rng).T
    X = truth.true_mixing @ S
    if noise > 0:
        X = X + noise * rng.standard_normal(X.shape)
    return X, S


def _poisson_days(rate_per_year: np.ndarray, seg_bounds: list[tuple[int, int]], rng) -> list[int]:
    days: list[int] = []
    for (a, b), rate in zip(seg_bounds, rate_per_year):
        if rate <= 0:
            continue
        n = rng.poisson(rate * (b - a) / DAYS_PER_YEAR)
        if n:
            days.extend(rng.integers(a, b, size=n).tolist())
    return days


def _first_arrival(rate_per_year: np.ndarray, seg_bounds, rng) -> int | None:
    for (a, b), rate in zip(seg_bounds, rate_per_year):
        if rate <= 0:
            continue
        t = rng.exponential(DAYS_PER_YEAR / rate)
        if t < b - a:
            return a + int(t)
    return None


def _code_cluster(first: int, codes: list[str], n_days: int, rng) -> list[tuple[int, str]]:
    offs = [0] + sorted(rng.integers(1, 181, size=len(codes) - 1).tolist())
    return [(min(first + o, n_days - 1), c) for o, c in zip(offs, codes)]


def _generate_patient(idx: int, cfg: GeneratorConfig, variables, A, families, params, rng):
    pid = f"P{idx:06d}"
    if cfg.record_years_cv > 0:
        shape = 1.0 / cfg.record_years_cv**2
        years = rng.gamma(shape, cfg.mean_record_years / shape)
    else:
        years = cfg.mean_record_years
    years = float(np.clip(years, cfg.min_record_years, cfg.max_record_years))
    n_days = max(1, int(round(years * DAYS_PER_YEAR)))
    end = RECORD_CUTOFF - timedelta(days=int(rng.integers(0, 3653)))
    start = end - timedelta(days=n_days - 1)
    birth = start - timedelta(days=int(rng.uniform(18, 70) * DAYS_PER_YEAR))

    seg_bounds = [(a, min(a + cfg.segment_days, n_days)) for a in range(0, n_days, cfg.segment_days)]
    n_seg = len(seg_bounds)
    base = draw_sources(families, 1, rng)[0]
    noise = draw_sources(families, n_seg, rng)
    rho = cfg.source_persistence
    s = math.sqrt(rho) * base + math.sqrt(1 - rho) * noise
    z = s @ A.T

    def seg_of(day: int) -> int:
        return min(day // cfg.segment_days, n_seg - 1)

    events: list[tuple[int, str]] = []
    for i, v in enumerate(variables):
        if v.kind is not Kind.CONDITION or v.id in NEURO_CODES:
            continue
        rate = params["cond_rate"][i] * np.exp(cfg.condition_link * z[:, i])
        events += [(d, v.id) for d in _poisson_days(rate, seg_bounds, rng)]

    var_ids = {v.id for v in variables}
    if cfg.neuro_codes:
        migraine = rng.random() < cfg.migraine_fraction
        code = MIGRAINE_CODE if migraine else NEURO_CODES[1 + int(rng.integers(0, 2))]
        if code in var_ids:
            n_neuro = 1 + rng.poisson(0.5 * years)
            events += [(int(d), code) for d in rng.integers(0, n_days, size=n_neuro)]

    # stroke code clusters
    crypto_rate = cfg.stroke_base_rate * np.exp(cfg.risk_effect * s[:, cfg.risk_source])
    t = _first_arrival(crypto_rate, seg_bounds, rng)
    if t is not None:
        n_codes = 1 + rng.poisson(cfg.mean_followup_codes)
        codes = list(rng.choice(CRYPTO_STROKE_CODES, size=n_codes, p=_CRYPTO_WEIGHTS))
        events += _code_cluster(t, codes, n_days, rng)
    const = np.ones(n_seg)
    t = _first_arrival(cfg.noncrypto_stroke_rate * const, seg_bounds, rng)
    if t is not None:
        n_codes = 2 + rng.poisson(1.0)
        codes = list(rng.choice(NONCRYPTO_STROKE_CODES, size=n_codes))
        if rng.random() < 0.6:
            codes.append(NONSPECIFIC_STROKE_CODE)
        if rng.random() < 0.2:
            codes.append("I63.9")
        events += _code_cluster(t, codes, n_days, rng)
    t = _first_arrival(cfg.nonspecific_stroke_rate * const, seg_bounds, rng)
    if t is not None:
        codes = [NONSPECIFIC_STROKE_CODE] * (1 + rng.poisson(1.0))
        events += _code_cluster(t, codes, n_days, rng)
    t = _first_arrival(cfg.spurious_code_rate * const, seg_bounds, rng)
    if t is not None:
        events.append((t, "I63.9"))

    events.sort()
    condition_events = tuple((start + timedelta(days=int(d)), CodedConcept(str(c))) for d, c in events)

    n_visits = rng.poisson(cfg.visit_rate * years)
    visit_days = np.unique(rng.integers(0, n_days, size=max(n_visits, 1)))
    measurements: dict[str, tuple] = {}
    snapshots: list[tuple[date, frozenset[str]]] = []
    med_rows = [i for i, v in enumerate(variables) if v.kind is Kind.MEDICATION]
    meas_rows = [i for i, v in enumerate(variables) if v.kind is Kind.MEASUREMENT and v.id != "age"]
    for i in meas_rows:
        seen = visit_days[rng.random(len(visit_days)) < cfg.measurement_obs_prob]
        if len(seen) == 0:
            continue
        mu, sd = params["meas_mu"][i], params["meas_sd"][i]
        vals = [
            float(mu + sd * (z[seg_of(int(d)), i] + cfg.measurement_noise * rng.standard_normal()))
            for d in seen
        ]
        measurements[variables[i].id] = tuple((start + timedelta(days=int(d)), v) for d, v in zip(seen, vals))
    for d in visit_days:
        g = seg_of(int(d))
        present = frozenset(
            variables[i].id
            for i in med_rows
            if z[g, i] + cfg.medication_noise * rng.standard_normal() > cfg.medication_threshold
        )
        snapshots.append((start + timedelta(days=int(d)), present))

    demographics = {}
    for i, v in enumerate(variables):
        if v.kind is Kind.DEMOGRAPHIC:
            demographics[v.id] = int(z[:, i].mean() + 0.5 * rng.standard_normal() > 0)

    record = PatientRecord(
        patient_id=pid,
        record_start=start,
        record_end=end,
        condition_events=condition_events,
        measurements=measurements,
        med_snapshots=tuple(snapshots),
        demographics=demographics,
        birth_date=birth,
    )
    seg_starts = np.array([a for a, _ in seg_bounds], dtype=np.int64)
    return record, seg_starts, s, base


def generate_cohort(config: GeneratorConfig, seed: int) -> tuple[Cohort, SyntheticGroundTruth]:
    """Generate a cohort and its planted ground truth; deterministic in (config, seed)."""
    config.validate()
    variables = build_variables(config)
    children = np.random.SeedSequence(seed).spawn(config.n_patients + 1)
    rng = np.random.default_rng(children[0])
    A = _mixing_matrix(config, variables, rng)
    families = _source_families(config.k_true, config.risk_source)
    lo, hi = config.condition_rate_range
    mu = rng.uniform(50, 150, size=len(variables))
    params = {
        "cond_rate": rng.uniform(lo, hi, size=len(variables)),
        "meas_mu": mu,
        "meas_sd": mu * rng.uniform(0.05, 0.2, size=len(variables)),
    }
    records = []
    seg_patient, seg_start, seg_values, patient_sources = [], [], [], []
    for idx in range(config.n_patients):
        prng = np.random.default_rng(children[idx + 1])
        rec, starts, s, base = _generate_patient(idx, config, variables, A, families, params, prng)
        records.append(rec)
        seg_patient.append(np.full(len(starts), idx, dtype=np.int64))
        seg_start.append(starts)
        seg_values.append(s)
        patient_sources.append(base)
    k = config.k_true
    truth = SyntheticGroundTruth(
        true_mixing=A,
        segment_patient=np.concatenate(seg_patient) if records else np.zeros(0, dtype=np.int64),
        segment_start=np.concatenate(seg_start) if records else np.zeros(0, dtype=np.int64),
        segment_values=np.vstack(seg_values) if records else np.zeros((0, k)),
        patient_sources=np.vstack(patient_sources) if records else np.zeros((0, k)),
        planted_risk_source=config.risk_source,
        source_families=families,
    )
    return Cohort(tuple(records), variables), truth


def source_expression_at(truth: SyntheticGroundTruth, patient_index: int, day: int) -> np.ndarray:
    """True source activations for a patient at a day offset from record start."""
    sel = np.flatnonzero(truth.segment_patient == patient_index)
    pos = np.searchsorted(truth.segment_start[sel], day, side="right") - 1
    return truth.segment_values[sel[max(pos, 0)]]


# --------------------------------------------------------------------------
# JSON-lines serialization


def record_to_dict(r: PatientRecord) -> dict:
    return {
        "patient_id": r.patient_id,
        "record_start": r.record_start.isoformat(),
        "record_end": r.record_end.isoformat(),
        "birth_date": r.birth_date.isoformat() if r.birth_date else None,
        "condition_events": [[d.isoformat(), c.code, c.kind.value] for d, c in r.condition_events],
        "measurements": {k: [[d.isoformat(), v] for d, v in obs] for k, obs in sorted(r.measurements.items())},
        "med_snapshots": [[d.isoformat(), sorted(meds)] for d, meds in r.med_snapshots],
        "demographics": dict(sorted(r.demographics.items())),
    }


def record_from_dict(d: Mapping) -> PatientRecord:
    dt = date.fromisoformat
    return PatientRecord(
        patient_id=d["patient_id"],
        record_start=dt(d["record_start"]),
        record_end=dt(d["record_end"]),
        condition_events=tuple((dt(x), CodedConcept(c, Kind(k))) for x, c, k in d["condition_events"]),
        measurements={k: tuple((dt(x), float(v)) for x, v in obs) for k, obs in d["measurements"].items()},
        med_snapshots=tuple((dt(x), frozenset(meds)) for x, meds in d["med_snapshots"]),
        demographics={k: int(v) for k, v in d["demographics"].items()},
        birth_date=dt(d["birth_date"]) if d.get("birth_date") else None,
    )


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def iter_cohort_lines(cohort: Cohort) -> Iterator[str]:
    yield _dumps(
        {
            "format": COHORT_FORMAT,
            "version": COHORT_VERSION,
            "variables": [{"id": v.id, "kind": v.kind.value, "name": v.name} for v in cohort.variables],
        }
    )
    for r in cohort.records:
        yield _dumps(record_to_dict(r))


def write_cohort(cohort: Cohort, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in iter_cohort_lines(cohort):
            fh.write(line + "\n")


def read_cohort(path: str | Path) -> Cohort:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != COHORT_FORMAT:
            raise SchemaError(f"{path}: not a cohort file")
        variables = tuple(VariableDescriptor(v["id"], Kind(v["kind"]), v.get("name", "")) for v in header["variables"])
        records = tuple(record_from_dict(json.loads(line)) for line in fh if line.strip())
    return Cohort(records, variables)


def with_records(cohort: Cohort, records: Iterable[PatientRecord]) -> Cohort:
    return replace(cohort, records=tuple(records))
