import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gasforecast.pipeline import (
    COLUMNS, FEATURES, TARGET, SchemaError, ScalingError, TensorDataset, apply_scaler,
    boxplot_bounds, build_dataset, clean, drop_missing, fit_record_scaler, fit_scaler,
    flatten_3d, generate_synthetic, inverse_scale, load_csv, load_reference_series,
    parse_csv_text, records_matrix, records_to_csv, reshape_3d, split_indices,
    train_test_split, write_csv, zscore_outliers,
)
from gasforecast.tensor import Tensor

from oracles import r7_quantile

HEADER = ",".join(COLUMNS)


def _row(date="2010-01", **over):
    vals = dict(zip(FEATURES, [0.1, 0.4, 30.0, 15.0, 1.3, 7.5e7, 80000.0, 5500.0, 1.0e7]))
    vals[TARGET] = 65.0
    vals.update(over)
    return ",".join([date] + ["" if vals[c] is None else str(vals[c]) for c in (*FEATURES, TARGET)])


# loading

def test_load_empty_data_section(tmp_path):
    path = tmp_path / "e.csv"
    path.write_text(HEADER + "\n")
    assert load_csv(path) == []


def test_non_numeric_cell_is_missing_and_row_kept():
    recs = parse_csv_text(HEADER + "\n" + _row(gdp_per_capita_usd="n/a") + "\n")
    assert len(recs) == 1
    assert recs[0].gdp_per_capita_usd is None
    assert not recs[0].is_complete()


def test_header_order_insensitive():
    cols = list(reversed(COLUMNS))
    line = _row().split(",")
    line = list(reversed(line))
    recs = parse_csv_text(",".join(cols) + "\n" + ",".join(line) + "\n")
    assert recs[0].date == "2010-01" and recs[0].gasoline_consumption_ml_day == 65.0


def test_bad_date_is_missing():
    assert parse_csv_text(HEADER + "\n" + _row(date="2010-13") + "\n")[0].date is None


def test_schema_error_lists_diff():
    text = HEADER.replace("vehicles_count", "cars") + "\n"
    with pytest.raises(SchemaError) as info:
        parse_csv_text(text)
    assert info.value.missing == ["vehicles_count"]
    assert info.value.unknown == ["cars"]


def test_unreadable_file(tmp_path):
    with pytest.raises(OSError):
        load_csv(tmp_path / "nope.csv")


def test_round_trip_preserves_values_exactly(tmp_path):
    recs = generate_synthetic(seed=3, n_months=24)
    write_csv(recs, tmp_path / "a.csv")
    assert load_csv(tmp_path / "a.csv") == recs
    assert records_to_csv(load_csv(tmp_path / "a.csv")) == (tmp_path / "a.csv").read_text()


# missing rows

def test_drop_missing_cases():
    recs = generate_synthetic(seed=1, n_months=12)[:5]
    kept, ids, report = drop_missing(recs)
    assert kept == recs and report.dropped_missing == []
    recs[2] = dataclasses.replace(recs[2], gdp_per_capita_usd=None)
    kept, ids, report = drop_missing(recs)
    assert len(kept) == 4 and report.dropped_missing == [2] and ids == [0, 1, 3, 4]
    blank = [dataclasses.replace(r, vehicles_count=None) for r in recs]
    kept, _, report = drop_missing(blank)
    assert kept == [] and report.notes


def test_drop_missing_forecast_mode_keeps_missing_target():
    rec = dataclasses.replace(generate_synthetic(n_months=12)[0], gasoline_consumption_ml_day=None)
    assert drop_missing([rec], require_target=True)[0] == []
    assert drop_missing([rec], require_target=False)[0] == [rec]


# box-plot fences

def test_boxplot_one_to_hundred():
    b = boxplot_bounds(np.arange(1, 101))
    assert (b.q1, b.median, b.q3) == (25.75, 50.5, 75.25)
    assert b.q1 == r7_quantile(range(1, 101), 0.25)


def test_boxplot_constant_series():
    b = boxplot_bounds([4.0] * 6)
    assert b.lower == b.upper == 4.0


def test_boxplot_with_extreme_value():
    b = boxplot_bounds([0, 10, 20, 30, 1000])
    assert (b.q1, b.median, b.q3) == (10.0, 20.0, 30.0)
    assert b.upper == 60.0 and b.lower == -20.0


def test_boxplot_too_few():
    with pytest.raises(ValueError):
        boxplot_bounds([1.0, 2.0, 3.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=4, max_size=40))
def test_boxplot_matches_r7_oracle(values):
    b = boxplot_bounds(values)
    for got, q in ((b.q1, 0.25), (b.median, 0.5), (b.q3, 0.75)):
        assert got == pytest.approx(r7_quantile(values, q), abs=1e-6)


# z-scores

def test_zscore_planted_value():
    data = np.random.default_rng(0).normal(size=(100, 1))
    data[37, 0] = 50.0
    keep, flagged, _ = zscore_outliers(data, ["x"])
    # independent check: only the planted row exceeds 3 population std devs
    z = (data[:, 0] - data[:, 0].mean()) / data[:, 0].std()
    assert list(np.flatnonzero(np.abs(z) > 3)) == [37]
    assert [r for r, _, _ in flagged] == [37]
    assert keep.sum() == 99


def test_zscore_constant_and_infinite_threshold():
    keep, flagged, skipped = zscore_outliers(np.ones((5, 1)), ["c"])
    assert keep.all() and flagged == [] and skipped == ["c"]
    data = np.random.default_rng(1).normal(size=(30, 2))
    data[0, 1] = 1e3
    assert zscore_outliers(data, ["a", "b"], threshold=np.inf)[0].all()


# clean

def _planted(records, row, column, sigmas):
    col = records_matrix(records, (column,))[:, 0]
    recs = list(records)
    recs[row] = dataclasses.replace(recs[row], **{column: float(col.mean() + sigmas * col.std())})
    return recs


@pytest.mark.parametrize("column", ["road_distance_km", "inflation_rate_pct", TARGET])
def test_clean_removes_planted_outlier_only(column):
    base = generate_synthetic(seed=42, n_months=180)
    assert clean(base)[0] == base
    recs = _planted(base, 90, column, 10.0)
    kept, report = clean(recs)
    assert report.dropped_rows() == {90}
    assert kept == base[:90] + base[91:]
    assert report.balanced()


def test_clean_idempotent_and_report_json():
    recs = _planted(generate_synthetic(seed=7, n_months=120), 5, "gdp_per_capita_usd", 12.0)
    recs[8] = dataclasses.replace(recs[8], vehicles_count=None)
    once, report = clean(recs)
    twice, report2 = clean(once)
    assert twice == once
    assert report2.dropped_rows() == set()
    doc = json.loads(json.dumps(report.to_dict()))
    assert doc["rows_in"] == 120 and doc["rows_out"] == len(once)
    assert doc["dropped_missing"] == [8]


def test_report_balances_on_messy_input():
    recs = generate_synthetic(seed=2, n_months=60)
    recs = _planted(recs, 10, TARGET, 15.0)
    recs = _planted(recs, 20, "road_distance_km", -9.0)
    recs[30] = dataclasses.replace(recs[30], date=None)
    kept, report = clean(recs)
    assert report.balanced()
    assert report.rows_out == len(kept) == 57


# scaling

def test_minmax_and_standard_examples():
    p = fit_scaler(np.array([[2.0], [4.0], [6.0]]), ["a"], "minmax")
    assert apply_scaler(np.array([[2.0], [4.0], [6.0]]), p).ravel().tolist() == [0.0, 0.5, 1.0]
    p = fit_scaler(np.array([[0.0], [10.0]]), ["a"], "standard")
    assert apply_scaler(np.array([[0.0], [10.0]]), p).ravel().tolist() == [-1.0, 1.0]


@pytest.mark.parametrize("mode", ["minmax", "standard"])
def test_inverse_round_trip(mode):
    data = np.random.default_rng(3).normal(50, 20, size=(40, 3))
    p = fit_scaler(data, ["a", "b", "c"], mode)
    scaled = apply_scaler(data, p)
    for j, name in enumerate("abc"):
        assert np.max(np.abs(inverse_scale(scaled[:, j], p, name) - data[:, j])) < 1e-12


def test_scaler_errors():
    with pytest.raises(ScalingError):
        fit_scaler(np.ones((3, 1)), ["a"], "minmax")
    with pytest.raises(ScalingError):
        fit_scaler(np.ones((3, 1)), ["a"], "standard")
    with pytest.raises(ValueError):
        fit_scaler(np.arange(3.0).reshape(3, 1), ["a"], "robust")


# shapes and splits

def test_reshape_3d():
    X = np.arange(45.0).reshape(5, 9)
    X3 = reshape_3d(X)
    assert X3.shape == (5, 1, 9)
    assert np.array_equal(X3.data.ravel(), X.ravel())
    assert np.array_equal(flatten_3d(X3).data, X)
    assert reshape_3d(np.zeros((0, 9))).shape == (0, 1, 9)


def test_build_dataset_shapes_and_target_scaled():
    recs = generate_synthetic(seed=1, n_months=36)
    ds = build_dataset(recs, fit_record_scaler(recs))
    assert ds.X.shape == (36, 1, 9) and ds.y.shape == (36,)
    assert ds.y.data.min() == 0.0 and ds.y.data.max() == 1.0
    assert ds.feature_names == FEATURES and len(ds.dates) == 36
    with pytest.raises(ValueError):
        TensorDataset(ds.X, Tensor(np.zeros(3)), FEATURES, ds.scaler)


def test_chronological_split():
    train, test = split_indices(10, 0.2)
    assert test.tolist() == [8, 9] and train.tolist() == list(range(8))


def test_shuffled_split_deterministic_and_partition():
    a = split_indices(50, 0.3, seed=4, mode="shuffled")
    b = split_indices(50, 0.3, seed=4, mode="shuffled")
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert len(a[1]) == 15
    assert sorted(np.concatenate(a).tolist()) == list(range(50))


def test_split_errors_and_dataset_split():
    for frac in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            split_indices(10, frac)
    recs = generate_synthetic(seed=1, n_months=20)
    ds = build_dataset(recs, fit_record_scaler(recs))
    tr, te = train_test_split(ds, 0.25)
    assert len(tr) == 15 and len(te) == 5
    assert te.dates == tuple(r.date for r in recs[15:])
    assert train_test_split(recs, 0.25)[1] == recs[15:]


# synthetic and reference data

def test_synthetic_deterministic_bytes():
    assert records_to_csv(generate_synthetic(42)) == records_to_csv(generate_synthetic(42))
    assert records_to_csv(generate_synthetic(42)) != records_to_csv(generate_synthetic(43))


def test_synthetic_calibration_and_completeness():
    recs = generate_synthetic(seed=42, n_months=180)
    assert len(recs) == 180 and recs[0].date == "2007-01" and recs[-1].date == "2021-12"
    assert all(r.is_complete() for r in recs)
    median = float(np.median([r.gasoline_consumption_ml_day for r in recs]))
    assert 60.0 <= median <= 72.0


def test_synthetic_needs_a_year():
    with pytest.raises(ValueError):
        generate_synthetic(n_months=11)


def test_reference_series_endpoints():
    rows = load_reference_series()
    assert [r.year for r in rows] == list(range(2007, 2032))
    by_year = {r.year: r for r in rows}
    assert by_year[2007].actual == 64.5 and by_year[2021].actual == 99.8
    assert all(r.actual is None for r in rows if r.year > 2021)
