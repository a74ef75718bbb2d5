from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentrisk.cohort import Kind
from latentrisk.curves import Curveset
from latentrisk.errors import InputError, SchemaError
from latentrisk.sampling import (
    IDENTITY,
    LOG_OFFSET,
    DataMatrix,
    StandardizationStats,
    apply_standardization,
    assemble_matrix,
    sample_times,
    standardize,
)

D0 = date(2010, 1, 1)


def window(n_days):
    return (D0, D0 + timedelta(days=n_days - 1))


def test_forced_ten_year_window():
    rng = np.random.default_rng(0)
    w = window(3653)
    final_start = w[1] - timedelta(days=364)
    counts = []
    for _ in range(2000):
        ds = sample_times(w, 1.0, True, rng)
        assert sum(d >= final_start for d in ds) == 1
        assert all(w[0] <= d <= w[1] for d in ds)
        counts.append(len(ds))
    assert abs(np.mean(counts) - 3653 / 365.25) < 4 * 3 / np.sqrt(2000)


def test_forced_short_window_has_exactly_one():
    rng = np.random.default_rng(1)
    for _ in range(200):
        assert len(sample_times(window(182), 1.0, True, rng)) == 1


def test_unforced_short_window_zero_probability():
    rng = np.random.default_rng(2)
    w = (D0, D0 + timedelta(days=round(0.1 * 365.25) - 1))
    years = (w[1] - w[0]).days / 365.25 + 1 / 365.25
    zeros = sum(len(sample_times(w, 1.0, False, rng)) == 0 for _ in range(100_000))
    assert abs(zeros / 100_000 - np.exp(-years)) < 0.01


def test_sample_times_errors_and_order():
    with pytest.raises(InputError):
        sample_times((D0, D0 - timedelta(days=1)))
    with pytest.raises(InputError):
        sample_times(window(10), density=0)
    ds = sample_times(window(20000), 1.0, False, 3)
    assert ds == sorted(ds)
    assert sample_times(window(5000), 1.0, True, 9) == sample_times(window(5000), 1.0, True, 9)


def cs(pid, m=3, t=10, start=D0, base=0.0):
    return Curveset(pid, start, base + np.arange(m * t, dtype=float).reshape(m, t))


def test_assemble_single_column():
    c = cs("A")
    X = assemble_matrix([(c, [D0 + timedelta(days=4)])])
    assert X.values.shape == (3, 1)
    assert np.array_equal(X.values[:, 0], c.matrix[:, 4])


def test_assemble_order_and_metadata():
    a, b = cs("A"), cs("B", base=100.0)
    da = [D0 + timedelta(days=7), D0 + timedelta(days=1)]
    db = [D0 + timedelta(days=3)]
    X = assemble_matrix([(a, da), (b, db)])
    assert X.values.shape == (3, 3)
    assert X.patient_ids == ("A", "A", "B")
    assert X.dates == (D0 + timedelta(days=1), D0 + timedelta(days=7), D0 + timedelta(days=3))
    assert np.array_equal(X.column(2).values, b.matrix[:, 3])


def test_assemble_duplicate_dates_and_errors():
    a = cs("A")
    X = assemble_matrix([(a, [D0, D0])])
    assert np.array_equal(X.values[:, 0], X.values[:, 1])
    with pytest.raises(InputError):
        assemble_matrix([(a, [D0 + timedelta(days=10)])])
    with pytest.raises(InputError):
        assemble_matrix([(a, [])])
    with pytest.raises(SchemaError):
        assemble_matrix([(a, [D0]), (cs("B", m=4), [D0])])


def dm(values):
    values = np.asarray(values, dtype=float)
    n = values.shape[1]
    return DataMatrix(values, tuple(f"p{i}" for i in range(n)), (D0,) * n)


def test_binary_row_unchanged():
    X, stats = standardize(dm([[0, 1, 1, 0]]), [Kind.MEDICATION])
    assert np.array_equal(X.values, [[0, 1, 1, 0]])
    assert stats.tags == (IDENTITY,)


def test_measurement_row_scaled():
    rng = np.random.default_rng(0)
    row = rng.normal(50, 7, size=500)
    X, stats = standardize(dm([row]), [Kind.MEASUREMENT])
    assert abs(X.values[0].mean()) < 1e-12
    assert abs(X.values[0].std(ddof=1) - 0.5) < 1e-12
    assert stats.tags == ("CenterScale2SD",)


def test_condition_row_log_scaled():
    row = np.array([0.0, 0.05, 1.0, 3.0, 0.5])
    X, stats = standardize(dm([row]), [Kind.CONDITION])
    y = np.log(row + LOG_OFFSET)
    assert np.allclose(X.values[0], (y - y.mean()) / (2 * y.std(ddof=1)), atol=1e-14)
    assert stats.tags == ("LogCenterScale2SD",) and stats.offset[0] == LOG_OFFSET


def test_constant_row_identity_fallback():
    X, stats = standardize(dm([[3.0, 3.0, 3.0]]), [Kind.MEASUREMENT])
    assert np.array_equal(X.values, [[3.0, 3.0, 3.0]])
    assert stats.tags == (IDENTITY,)


def test_non_finite_and_negative_inputs():
    with pytest.raises(InputError):
        standardize(dm([[1.0, np.nan]]), [Kind.MEASUREMENT])
    with pytest.raises(InputError):
        standardize(dm([[1.0, -1.0]]), [Kind.CONDITION])
    with pytest.raises(SchemaError):
        standardize(dm([[1.0, 2.0]]), [Kind.CONDITION, Kind.CONDITION])


def test_replay_and_no_clipping():
    rng = np.random.default_rng(4)
    V = np.vstack([rng.exponential(1, 50), rng.normal(size=50), rng.integers(0, 2, 50)])
    kinds = [Kind.CONDITION, Kind.MEASUREMENT, Kind.DEMOGRAPHIC]
    X, stats = standardize(dm(V), kinds)
    assert np.array_equal(apply_standardization(dm(V), stats).values, X.values)
    far = dm([[1e6], [1e6], [1.0]])
    out = apply_standardization(far, stats).values[:, 0]
    assert out[1] == (1e6 - stats.mean[1]) / (2 * stats.sd[1])
    with pytest.raises(SchemaError):
        apply_standardization(dm(V[:2]), stats)
    ident = StandardizationStats.identity(3)
    assert np.array_equal(apply_standardization(dm(V), ident).values, V)


def test_stats_and_matrix_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    V = np.vstack([rng.exponential(1, 20), rng.normal(size=20)])
    X, stats = standardize(dm(V), [Kind.CONDITION, Kind.MEASUREMENT])
    X.save(tmp_path / "x.bin", tmp_path / "x.json", stats)
    back = DataMatrix.load(tmp_path / "x.bin", tmp_path / "x.json")
    assert np.array_equal(back.values, X.values) and back.patient_ids == X.patient_ids and back.dates == X.dates
    import json

    s2 = StandardizationStats.from_dict(json.loads((tmp_path / "x.json").read_text())["standardization"])
    assert s2.tags == stats.tags and np.array_equal(s2.sd, stats.sd)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 60), st.integers(0, 2**31))
def test_standardized_rows_have_half_sd(n, seed):
    rng = np.random.default_rng(seed)
    V = np.vstack([rng.exponential(2, n), rng.normal(10, 3, n), rng.integers(0, 2, n).astype(float)])
    kinds = [Kind.CONDITION, Kind.MEASUREMENT, Kind.MEDICATION]
    X, stats = standardize(dm(V), kinds)
    for i, tag in enumerate(stats.tags):
        if tag == IDENTITY:
            assert X.values[i].tobytes() == V[i].tobytes()
        else:
            assert abs(X.values[i].mean()) < 1e-9
            assert abs(X.values[i].std(ddof=1) - 0.5) < 1e-9
