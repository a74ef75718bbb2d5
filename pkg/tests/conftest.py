from __future__ import annotations

from datetime import date, timedelta

import numpy as np
import pytest

from latentrisk.cohort import CodedConcept, PatientRecord
from latentrisk.forest import HyperParams, LabeledDataset, fit_forest

ACCEPTANCE_LINES: list[str] = []

START = date(2010, 1, 1)
END = date(2020, 12, 31)


def record(pid, events=(), start=START, end=END, measurements=None, snapshots=(), demographics=None, birth=None):
    """Build a PatientRecord from (day offset, code) pairs."""
    ev = tuple(sorted((start + timedelta(days=d), CodedConcept(c)) for d, c in events))
    return PatientRecord(
        patient_id=pid,
        record_start=start,
        record_end=end,
        condition_events=ev,
        measurements=measurements or {},
        med_snapshots=tuple(snapshots),
        demographics=demographics or {},
        birth_date=birth,
    )


# Twelve hand-built records for the stroke-code labeling rules. Expected
# outcomes are derived by hand from the code lists:
#   coincidence: I63.50 1/2, I63.30 2/2, I63.40 1/1, I63.8 1/1 (removed);
#                I63.9 1/6, I63.52 0/2, G43.609 0/1, I67.848 0/1 (kept)
LABEL_FIXTURE = [
    ("R01", [(100, "I10"), (400, "I10"), (900, "I10")], "NoStrokeCode"),
    ("R02", [], "NoStrokeCode"),
    ("R03", [(1000, "I63.50"), (1010, "I63.50")], "NotSpecific"),
    ("R04", [(1500, "I63.50"), (1502, "I63.30")], "NotSpecific"),
    ("R05", [(2000, "I63.8"), (2001, "I63.40")], "NotSpecific"),
    ("R06", [(2500, "I63.9"), (2510, "I63.9"), (2520, "I63.30")], "CoOccurringNonCryptogenic"),
    ("R07", [(3000, "I63.52")], "SingleStrokeCode"),
    ("R08", [(3100, "I63.9"), (50, "G43.909")], "SingleStrokeCode"),
    ("R09", [(3200, "I63.9"), (3150, "I63.9")], "Positive"),
    ("R10", [(3300, "I63.9"), (3305, "G43.609")], "Positive"),
    ("R11", [(3400, "I63.9"), (3420, "I67.848")], "Positive"),
    ("R12", [(3500, "I63.52"), (3600, "I63.9")], "Positive"),
]
FIXTURE_REFINED = {"G43.609", "I63.52", "I63.9", "I67.848"}
FIXTURE_REMOVED = {"I63.30", "I63.40", "I63.50", "I63.8"}


@pytest.fixture
def label_fixture():
    return [record(pid, ev) for pid, ev, _ in LABEL_FIXTURE], {pid: stage for pid, _, stage in LABEL_FIXTURE}


def random_forest(seed: int, n: int = 150, k: int | None = None, n_trees: int = 5, max_depth: int | None = None):
    """Small random forest on a noisy interaction problem; returns (forest, X)."""
    rng = np.random.default_rng(seed)
    k = k or int(rng.integers(2, 13))
    X = rng.standard_normal((n, k))
    X[:, 0] = np.round(X[:, 0])
    y = (X[:, 0] + X[:, 1 % k] * X[:, -1] + rng.standard_normal(n) > 0).astype(int)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    hp = HyperParams(
        n_trees=n_trees,
        max_depth=max_depth or int(rng.integers(1, 7)),
        min_samples_leaf=int(rng.integers(1, 6)),
        max_features=float(rng.choice([0.5, 1.0])),
        seed=seed,
    )
    return fit_forest(LabeledDataset(X, y, np.arange(n)), hp), X


@pytest.fixture
def acceptance():
    def report(name: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
