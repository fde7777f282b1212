import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lvicl.errors import DataError, DimensionError, InsufficientDataError, ParseError
from lvicl.tsio import (
    SeriesDataset,
    Window,
    channel_split,
    chronological_split,
    denormalize,
    load_csv,
    load_m4_style,
    make_synthetic,
    make_windows,
    norm_record,
    normalize,
    patchify,
    save_csv,
    seasonal_period,
    split_windows,
    window_count,
)


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_plain_csv(tmp_path):
    ds = load_csv(write(tmp_path, "1,2\n3,4\n5,6\n"))
    assert ds.values.shape == (3, 2)
    assert ds.values[:, 1].tolist() == [2.0, 4.0, 6.0]


def test_load_csv_drops_timestamp_column(tmp_path):
    text = "date,a,b\n2020-01-01 00:00,1,2\n2020-01-01 01:00,3,4\n"
    ds = load_csv(write(tmp_path, text))
    assert ds.values.tolist() == [[1.0, 2.0], [3.0, 4.0]]
    assert ds.columns == ("a", "b")


def test_load_csv_numeric_timestamp_header_dropped(tmp_path):
    ds = load_csv(write(tmp_path, "t,x\n0,5\n1,6\n"))
    assert ds.values.tolist() == [[5.0], [6.0]]


def test_load_ett_style_seven_vars(tmp_path):
    cols = ["HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"]
    rows = [",".join(["date", *cols])]
    for i in range(5):
        rows.append(",".join([f"2016-07-01 0{i}:00:00", *(str(i + j * 0.5) for j in range(7))]))
    ds = load_csv(write(tmp_path, "\n".join(rows) + "\n"))
    assert ds.num_vars == 7


def test_load_csv_parse_error_location(tmp_path):
    with pytest.raises(ParseError) as info:
        load_csv(write(tmp_path, "a,b\n1,2\n3,oops\n"))
    assert (info.value.row, info.value.column) == (3, 2)


def test_load_csv_empty(tmp_path):
    with pytest.raises(DataError):
        load_csv(write(tmp_path, ""))


def test_load_m4_style(tmp_path):
    series = load_m4_style(write(tmp_path, "V1,V2,V3,V4\nY1,1,2,3\nY2,4,5,,\n"))
    assert [s.name for s in series] == ["Y1", "Y2"]
    assert series[1].values[:, 0].tolist() == [4.0, 5.0]


def test_csv_round_trip(tmp_path):
    ds = make_synthetic(50, 2, seed=3)
    back = load_csv(save_csv(ds, tmp_path / "s.csv"))
    assert np.array_equal(back.values, ds.values)


def test_split_hand_case():
    ds = chronological_split(SeriesDataset("x", np.arange(100.0)), (0.6, 0.2, 0.2))
    assert ds.boundaries == (60, 80)


def test_split_ett_proportions():
    T = 8545 + 2881 + 2881
    ratios = (8545 / T, 2881 / T, 2881 / T)
    ds = chronological_split(SeriesDataset("ett", np.zeros(T)), ratios)
    train, val, test = (ds.split(s).shape[0] for s in ("train", "val", "test"))
    assert (train, val, test) == (8545, 2881, 2881)


def test_split_too_short():
    with pytest.raises(InsufficientDataError):
        chronological_split(SeriesDataset("x", np.zeros(20)), (0.7, 0.1, 0.2), min_length=5)


def test_split_ratio_validation():
    with pytest.raises(DataError):
        chronological_split(SeriesDataset("x", np.zeros(20)), (0.5, 0.1, 0.1))


def test_channel_split_single_and_round_trip():
    one = channel_split(SeriesDataset("x", np.arange(5.0)))
    assert len(one) == 1 and one[0].values.tolist() == [0, 1, 2, 3, 4]
    values = np.random.default_rng(0).standard_normal((30, 7))
    parts = channel_split(SeriesDataset("x", values))
    assert [p.channel for p in parts] == list(range(7))
    assert np.array_equal(np.stack([p.values for p in parts], axis=1), values)


def test_window_count_scales_with_vars():
    ds1 = chronological_split(SeriesDataset("a", np.zeros((100, 1))), (0.6, 0.2, 0.2))
    ds3 = chronological_split(SeriesDataset("b", np.zeros((100, 3))), (0.6, 0.2, 0.2))
    assert len(split_windows(ds3, "train", 8, 4)) == 3 * len(split_windows(ds1, "train", 8, 4))


def test_make_windows_hand_cases():
    assert len(make_windows(np.arange(10.0), 4, 2, 1)) == 5
    assert len(make_windows(np.arange(6.0), 4, 2, 1)) == 1
    assert make_windows(np.arange(5.0), 4, 2, 1) == []


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 10), st.integers(1, 10), st.integers(1, 5))
def test_window_count_matches_enumeration(n, T_h, T_f, stride):
    brute = sum(1 for s in range(0, n, stride) if s + T_h + T_f <= n)
    assert window_count(n, T_h, T_f, stride) == brute
    assert len(make_windows(np.arange(float(n)), T_h, T_f, stride)) == brute


def test_windows_never_cross_split_boundaries():
    ds = chronological_split(make_synthetic(300, 2, seed=1), (0.6, 0.2, 0.2), min_length=30)
    for split in ("train", "val", "test"):
        lo, hi = ds.split_range(split)
        for w in split_windows(ds, split, 20, 10, 3):
            assert lo <= w.start and w.end <= hi
            assert np.array_equal(w.history, ds.values[w.start : w.start + 20, w.channel])


def test_normalize_hand_case():
    w = normalize(Window(np.array([1.0, 2.0, 3.0]), np.array([4.0])))
    assert w.record.mean == 2.0
    assert w.record.std == pytest.approx(math.sqrt(2 / 3), abs=1e-15)
    assert np.allclose(w.history, [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-12)


def test_normalize_constant_history_is_degenerate():
    w = normalize(Window(np.full(4, 7.0), np.array([8.0])))
    assert w.degenerate
    assert w.history.tolist() == [0.0] * 4
    assert w.target.tolist() == [1.0]


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, 12, elements=st.floats(-1e3, 1e3)),
    arrays(np.float64, 5, elements=st.floats(-1e3, 1e3)),
)
def test_normalize_round_trip_and_moments(history, target):
    w = normalize(Window(history, target))
    assert np.allclose(denormalize(w.history, w.record), history, rtol=0, atol=1e-9)
    assert np.allclose(denormalize(w.target, w.record), target, rtol=0, atol=1e-9)
    if not w.degenerate and np.std(history) > 1e-6:
        assert abs(np.mean(w.history)) < 1e-9
        assert abs(np.std(w.history) - 1.0) < 1e-9


def test_norm_stats_use_history_only():
    rec = norm_record(np.array([1.0, 3.0]))
    w = normalize(Window(np.array([1.0, 3.0]), np.array([100.0]), record=rec))
    assert w.record == rec


def test_patchify_cases():
    assert patchify(np.zeros(672), 96).shape == (7, 96)
    x = np.arange(8.0)
    assert np.array_equal(patchify(x, 8), x[None])
    with pytest.raises(DimensionError):
        patchify(np.zeros(10), 3)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8))
def test_patchify_flatten_round_trip(k, P):
    x = np.random.default_rng(k * 10 + P).standard_normal(k * P)
    p = patchify(x, P)
    assert np.array_equal(p.reshape(-1), x)
    for i in range(k):
        assert np.array_equal(p[i], x[i * P : (i + 1) * P])


def test_synthetic_is_seeded():
    a, b = make_synthetic(200, 3, seed=5), make_synthetic(200, 3, seed=5)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, make_synthetic(200, 3, seed=6).values)
    assert a.frequency == "hourly" and seasonal_period(a.frequency) == 24


def test_seasonal_period_labels():
    assert seasonal_period("monthly") == 12
    assert seasonal_period("period=7") == 7
    assert seasonal_period("unknown") == 1
