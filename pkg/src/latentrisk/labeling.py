"""Four-stage stroke-code labeling with data-driven inclusion refinement.

Stages, applied in order, each rejecting to Negative:

1. NoStrokeCode              no event under any stroke code
2. NotSpecific               no event under the refined inclusion codes
3. CoOccurringNonCryptogenic any event under a non-cryptogenic etiology code
4. SingleStrokeCode          fewer than ``min_stroke_code_instances`` stroke events

Records surviving all four are Positive.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .cohort import Cohort, PatientRecord, code_matches
from .errors import ConfigError, InputError

MONTH_DAYS = 30
WINDOW_YEARS = 10
WINDOW_DAYS = int(round(WINDOW_YEARS * 365.25))


class Label(str, Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"


class Stage(str, Enum):
    NO_STROKE_CODE = "NoStrokeCode"
    NOT_SPECIFIC = "NotSpecific"
    CO_OCCURRING = "CoOccurringNonCryptogenic"
    SINGLE_STROKE_CODE = "SingleStrokeCode"


@dataclass(frozen=True)
class CodeCriteria:
    initial_inclusion: frozenset[str]
    noncrypto_specific: frozenset[str]
    coincidence_threshold: float = 0.30
    min_stroke_code_instances: int = 2
    # None until refined; labeling then falls back to the initial set
    refined_inclusion: frozenset[str] | None = None
    exact_match: bool = False
    # stage-4 counting: "refined" counts refined-inclusion and non-cryptogenic
    # events, "all" counts every stroke-code event
    count_mode: str = "refined"
    # when False the noncrypto set only defines stroke codes and never excludes
    exclude_noncrypto: bool = True
    name: str = "custom"

    def __post_init__(self):
        if not 0.0 <= self.coincidence_threshold <= 1.0:
            raise ConfigError("coincidence_threshold must lie in [0, 1]")
        if self.min_stroke_code_instances < 1:
            raise ConfigError("min_stroke_code_instances must be >= 1")
        if self.count_mode not in ("refined", "all"):
            raise ConfigError("count_mode must be 'refined' or 'all'")

    @property
    def inclusion(self) -> frozenset[str]:
        return self.refined_inclusion if self.refined_inclusion is not None else self.initial_inclusion

    @property
    def stroke_codes(self) -> frozenset[str]:
        return self.initial_inclusion | self.noncrypto_specific | (self.refined_inclusion or frozenset())

    def matches_any(self, code: str, prefixes: Iterable[str]) -> bool:
        return any(code_matches(code, p, self.exact_match) for p in prefixes)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "initial_inclusion": sorted(self.initial_inclusion),
            "noncrypto_specific": sorted(self.noncrypto_specific),
            "coincidence_threshold": self.coincidence_threshold,
            "min_stroke_code_instances": self.min_stroke_code_instances,
            "refined_inclusion": sorted(self.refined_inclusion) if self.refined_inclusion is not None else None,
            "exact_match": self.exact_match,
            "count_mode": self.count_mode,
            "exclude_noncrypto": self.exclude_noncrypto,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CodeCriteria":
        ref = d.get("refined_inclusion")
        return cls(
            initial_inclusion=frozenset(d["initial_inclusion"]),
            noncrypto_specific=frozenset(d["noncrypto_specific"]),
            coincidence_threshold=float(d.get("coincidence_threshold", 0.30)),
            min_stroke_code_instances=int(d.get("min_stroke_code_instances", 2)),
            refined_inclusion=frozenset(ref) if ref is not None else None,
            exact_match=bool(d.get("exact_match", False)),
            count_mode=d.get("count_mode", "refined"),
            exclude_noncrypto=bool(d.get("exclude_noncrypto", True)),
            name=d.get("name", "custom"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "CodeCriteria":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def preset(name: str) -> CodeCriteria:
    """Shipped criteria.

    ``"cryptogenic"`` carries the initial code lists and is refined on data,
    ``"cryptogenic-reference"`` carries an already refined inclusion list and
    ``"general-is"`` is the comparator (any two stroke codes, no exclusions).
    """
    files = {
        "cryptogenic": "criteria_cryptogenic.json",
        "cryptogenic-reference": "criteria_cryptogenic_reference.json",
        "general-is": "criteria_general_is.json",
    }
    if name not in files:
        raise ConfigError(f"unknown label preset {name!r}; choose from {sorted(files)}")
    text = resources.files("latentrisk.data").joinpath(files[name]).read_text()
    return CodeCriteria.from_dict(json.loads(text))


@dataclass(frozen=True)
class CoincidenceEntry:
    code: str
    prefix: str
    n_records: int
    n_coincident: int
    coincidence: float | None
    retained: bool


def refine_inclusion_codes(cohort: Cohort | Sequence[PatientRecord], criteria: CodeCriteria) -> tuple[CodeCriteria, list[CoincidenceEntry]]:
    """Drop inclusion codes that co-occur with non-cryptogenic codes too often.

    Each inclusion prefix is expanded to the leaf codes observed under it.
    A code's coincidence is the fraction of records containing it that also
    contain a non-cryptogenic code; codes above the threshold are removed.
    A prefix with no observed codes is kept with undefined coincidence.
    """
    records = cohort.records if isinstance(cohort, Cohort) else tuple(cohort)
    if not records:
        raise InputError("refinement needs a non-empty cohort")
    code_sets = [r.codes() for r in records]
    has_noncrypto = [any(criteria.matches_any(c, criteria.noncrypto_specific) for c in cs) for cs in code_sets]
    observed = sorted(set().union(*code_sets))
    report: list[CoincidenceEntry] = []
    refined: set[str] = set()
    for prefix in sorted(criteria.initial_inclusion):
        leaves = [c for c in observed if code_matches(c, prefix, criteria.exact_match)]
        if not leaves:
            report.append(CoincidenceEntry(prefix, prefix, 0, 0, None, True))
            refined.add(prefix)
            continue
        for code in leaves:
            n = sum(1 for cs in code_sets if code in cs)
            hit = sum(1 for cs, nc in zip(code_sets, has_noncrypto) if code in cs and nc)
            rate = hit / n
            keep = rate <= criteria.coincidence_threshold
            report.append(CoincidenceEntry(code, prefix, n, hit, rate, keep))
            if keep:
                refined.add(code)
    refined_criteria = replace(criteria, refined_inclusion=frozenset(refined), exact_match=criteria.exact_match)
    return refined_criteria, report


@dataclass(frozen=True)
class LabelOutcome:
    label: Label
    rejection_stage: Stage | None = None
    first_event_date: date | None = None
    n_stroke_events: int = 0

    def __post_init__(self):
        if self.label is Label.POSITIVE and (self.rejection_stage is not None or self.first_event_date is None):
            raise ValueError("Positive outcome needs first_event_date and no rejection stage")

    @property
    def positive(self) -> bool:
        return self.label is Label.POSITIVE


def label_record(record: PatientRecord, criteria: CodeCriteria) -> LabelOutcome:
    """Apply the four stages in order.

    ``first_event_date`` is the earliest stroke-code event and is set for
    every record that has one, Negative or not, because the prediction
    window of any record with a stroke code ends before that code.
    """
    stroke = [(d, c.code) for d, c in record.condition_events if criteria.matches_any(c.code, criteria.stroke_codes)]
    if not stroke:
        return LabelOutcome(Label.NEGATIVE, Stage.NO_STROKE_CODE)
    first = min(d for d, _ in stroke)
    n = len(stroke)
    if not any(criteria.matches_any(c, criteria.inclusion) for _, c in stroke):
        return LabelOutcome(Label.NEGATIVE, Stage.NOT_SPECIFIC, first, n)
    if criteria.exclude_noncrypto and any(criteria.matches_any(c, criteria.noncrypto_specific) for _, c in stroke):
        return LabelOutcome(Label.NEGATIVE, Stage.CO_OCCURRING, first, n)
    if criteria.count_mode == "refined":
        counted = criteria.inclusion | criteria.noncrypto_specific
        n = sum(1 for _, c in stroke if criteria.matches_any(c, counted))
    if n < criteria.min_stroke_code_instances:
        return LabelOutcome(Label.NEGATIVE, Stage.SINGLE_STROKE_CODE, first, n)
    return LabelOutcome(Label.POSITIVE, None, first, n)


@dataclass(frozen=True)
class PredictionWindow:
    start: date
    end: date

    @property
    def n_days(self) -> int:
        return (self.end - self.start).days + 1


def prediction_window(record: PatientRecord, outcome: LabelOutcome) -> PredictionWindow | None:
    """Up to ten years ending at record end, or one month before the first stroke code.

    Returns None when that leaves an empty window (the record is excluded).
    """
    if outcome.first_event_date is None:
        end = record.record_end
    else:
        end = outcome.first_event_date - timedelta(days=MONTH_DAYS)
    start = max(record.record_start, end - timedelta(days=WINDOW_DAYS - 1))
    if end < record.record_start or end < start:
        return None
    return PredictionWindow(start, end)


@dataclass
class LabelingResult:
    outcomes: dict[str, LabelOutcome]
    windows: dict[str, PredictionWindow]
    excluded: dict[str, str] = field(default_factory=dict)

    def stage_counts(self) -> dict[str, int]:
        counts = {s.value: 0 for s in Stage}
        counts[Label.POSITIVE.value] = 0
        for o in self.outcomes.values():
            counts[o.rejection_stage.value if o.rejection_stage else Label.POSITIVE.value] += 1
        return counts


def label_cohort(records: Iterable[PatientRecord], criteria: CodeCriteria) -> LabelingResult:
    res = LabelingResult({}, {})
    for r in records:
        o = label_record(r, criteria)
        res.outcomes[r.patient_id] = o
        w = prediction_window(r, o)
        if w is None:
            res.excluded[r.patient_id] = "stroke code within one month of record start"
        else:
            res.windows[r.patient_id] = w
    return res


LABEL_COLUMNS = ("patient_id", "label", "stage", "first_event_date", "window_start", "window_end")


def write_labels_csv(result: LabelingResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_COLUMNS)
        for pid in sorted(result.outcomes):
            o = result.outcomes[pid]
            win = result.windows.get(pid)
            w.writerow(
                [
                    pid,
                    o.label.value,
                    o.rejection_stage.value if o.rejection_stage else "",
                    o.first_event_date.isoformat() if o.first_event_date else "",
                    win.start.isoformat() if win else "",
                    win.end.isoformat() if win else "",
                ]
            )


def read_labels_csv(path: str | Path) -> LabelingResult:
    res = LabelingResult({}, {})
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pid = row["patient_id"]
            fe = date.fromisoformat(row["first_event_date"]) if row["first_event_date"] else None
            stage = Stage(row["stage"]) if row["stage"] else None
            res.outcomes[pid] = LabelOutcome(Label(row["label"]), stage, fe)
            if row["window_start"]:
                res.windows[pid] = PredictionWindow(date.fromisoformat(row["window_start"]), date.fromisoformat(row["window_end"]))
            else:
                res.excluded[pid] = "stroke code within one month of record start"
    return res
