import random
from dataclasses import replace
from datetime import date, timedelta

import pytest

from conftest import FIXTURE_REFINED, FIXTURE_REMOVED, record
from latentrisk.errors import ConfigError, InputError
from latentrisk.labeling import (
    CodeCriteria,
    Label,
    LabelOutcome,
    WINDOW_DAYS,
    Stage,
    label_cohort,
    label_record,
    prediction_window,
    preset,
    read_labels_csv,
    refine_inclusion_codes,
    write_labels_csv,
)

REF = preset("cryptogenic-reference")
CRYPTO = preset("cryptogenic")


def test_fixture_refinement_and_stages(label_fixture):
    records, expected = label_fixture
    refined, report = refine_inclusion_codes(records, CRYPTO)
    assert refined.inclusion == FIXTURE_REFINED
    removed = {e.code for e in report if not e.retained}
    assert removed == FIXTURE_REMOVED
    by_code = {e.code: e for e in report}
    assert (by_code["I63.50"].n_records, by_code["I63.50"].n_coincident) == (2, 1)
    assert (by_code["I63.9"].n_records, by_code["I63.9"].n_coincident) == (6, 1)
    res = label_cohort(records, refined)
    assert {pid: (o.rejection_stage or Label.POSITIVE).value for pid, o in res.outcomes.items()} == expected
    counts = res.stage_counts()
    assert sum(counts.values()) == len(records)
    assert counts == {"NoStrokeCode": 2, "NotSpecific": 3, "CoOccurringNonCryptogenic": 1, "SingleStrokeCode": 2, "Positive": 4}


def test_half_coincident_code_removed():
    recs = [
        record("A", [(10, "I63.9"), (20, "I63.30")]),
        record("B", [(10, "I63.9"), (20, "I63.10")]),
        record("C", [(10, "I63.9")]),
        record("D", [(10, "I63.9"), (20, "I10")]),
    ]
    refined, report = refine_inclusion_codes(recs, CRYPTO)
    entry = next(e for e in report if e.code == "I63.9")
    assert entry.coincidence == 0.5 and not entry.retained
    assert "I63.9" not in refined.inclusion


def test_boundary_coincidence_is_kept():
    recs = [record(f"R{i}", [(10, "I63.9")] + ([(20, "I63.40")] if i < 3 else [])) for i in range(10)]
    refined, report = refine_inclusion_codes(recs, CRYPTO)
    assert next(e for e in report if e.code == "I63.9").coincidence == 0.3
    assert "I63.9" in refined.inclusion


def test_vacuous_threshold_keeps_everything(label_fixture):
    records, _ = label_fixture
    refined, report = refine_inclusion_codes(records, replace(CRYPTO, coincidence_threshold=1.0))
    assert all(e.retained for e in report)
    assert FIXTURE_REMOVED <= refined.inclusion


def test_unobserved_prefix_retained_undefined(label_fixture):
    records, _ = label_fixture
    crit = replace(CRYPTO, initial_inclusion=CRYPTO.initial_inclusion | {"I69.9"})
    refined, report = refine_inclusion_codes(records, crit)
    e = next(e for e in report if e.prefix == "I69.9")
    assert e.coincidence is None and e.retained and "I69.9" in refined.inclusion


def test_refinement_needs_records():
    with pytest.raises(InputError):
        refine_inclusion_codes([], CRYPTO)


def test_documented_outcomes():
    two = label_record(record("A", [(900, "I63.9"), (700, "I63.9")]), REF)
    assert two.positive and two.first_event_date == date(2010, 1, 1) + timedelta(days=700)
    co = label_record(record("B", [(900, "I63.9"), (700, "I63.9"), (800, "I63.3")]), REF)
    assert co.rejection_stage is Stage.CO_OCCURRING
    single = label_record(record("C", [(900, "I63.52")]), REF)
    assert single.rejection_stage is Stage.SINGLE_STROKE_CODE
    none = label_record(record("D", [(5, "I10")]), REF)
    assert none.rejection_stage is Stage.NO_STROKE_CODE and none.first_event_date is None


def test_general_preset_ignores_etiology():
    gen = preset("general-is")
    o = label_record(record("B", [(900, "I63.9"), (800, "I63.3")]), gen)
    assert o.positive
    assert label_record(record("C", [(900, "I63.3")]), gen).rejection_stage is Stage.SINGLE_STROKE_CODE


def test_exact_match_mode():
    crit = replace(REF, exact_match=True)
    assert label_record(record("A", [(1, "I63.9"), (2, "I63.9")]), crit).positive
    # G43.6 is only a prefix in the refined list, so G43.609 no longer matches it
    o = label_record(record("B", [(1, "G43.609"), (2, "G43.609")]), crit)
    assert o.rejection_stage is Stage.NO_STROKE_CODE


def test_negative_window_is_final_ten_years():
    r = record("A", start=date(2008, 1, 1), end=date(2019, 12, 31))
    w = prediction_window(r, label_record(r, REF))
    assert w.end == r.record_end
    assert w.start == date(2010, 1, 1) and w.n_days == WINDOW_DAYS


def test_positive_window_ends_one_month_before():
    start = date(2010, 1, 1)
    stroke = start + timedelta(days=1826)
    r = record("A", [(1826, "I63.9"), (1900, "I63.9")], start=start)
    o = label_record(r, REF)
    w = prediction_window(r, o)
    assert w.start == start and w.end == stroke - timedelta(days=30)
    assert w.end < stroke


def test_stroke_two_weeks_after_start_excluded():
    r = record("A", [(14, "I63.9"), (20, "I63.9")])
    res = label_cohort([r], REF)
    assert res.outcomes["A"].positive
    assert "A" in res.excluded and "A" not in res.windows


def test_outcome_invariant():
    with pytest.raises(ValueError):
        LabelOutcome(Label.POSITIVE)
    with pytest.raises(ValueError):
        LabelOutcome(Label.POSITIVE, Stage.NOT_SPECIFIC, date(2010, 1, 1))


def test_permutation_invariance(label_fixture):
    records, _ = label_fixture
    shuffled = records[:]
    random.Random(3).shuffle(shuffled)
    a, _ = refine_inclusion_codes(records, CRYPTO)
    b, rb = refine_inclusion_codes(shuffled, CRYPTO)
    assert a == b
    assert label_cohort(records, a).outcomes == label_cohort(shuffled, b).outcomes


def test_monotone_in_exclusion_set(label_fixture):
    records, _ = label_fixture
    base = replace(CRYPTO, refined_inclusion=frozenset(FIXTURE_REFINED))
    wider = replace(base, noncrypto_specific=base.noncrypto_specific | {"I67.8"})
    for r in records:
        if label_record(r, wider).positive:
            assert label_record(r, base).positive
    assert sum(label_record(r, wider).positive for r in records) < sum(label_record(r, base).positive for r in records)


def test_labels_csv_roundtrip(tmp_path, label_fixture):
    records, _ = label_fixture
    records.append(record("R13", [(10, "I63.9"), (11, "I63.9")]))
    res = label_cohort(records, refine_inclusion_codes(records, CRYPTO)[0])
    write_labels_csv(res, tmp_path / "l.csv")
    back = read_labels_csv(tmp_path / "l.csv")
    assert back.windows == res.windows and set(back.excluded) == {"R13"}
    assert {k: (o.label, o.rejection_stage, o.first_event_date) for k, o in back.outcomes.items()} == {
        k: (o.label, o.rejection_stage, o.first_event_date) for k, o in res.outcomes.items()
    }


def test_presets_and_criteria_io(tmp_path):
    assert REF.inclusion == {"G43.6", "I63.212", "I63.52", "I63.6", "I63.8", "I63.9", "I67.848"}
    assert CRYPTO.refined_inclusion is None and CRYPTO.inclusion == {"G43.6", "I63", "I67.8"}
    with pytest.raises(ConfigError):
        preset("nope")
    with pytest.raises(ConfigError):
        replace(CRYPTO, coincidence_threshold=1.5)
    REF.save(tmp_path / "c.json")
    assert CodeCriteria.load(tmp_path / "c.json") == REF
