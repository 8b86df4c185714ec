import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foil.data import (
    RawSeries,
    SplitSpec,
    WindowArrays,
    dump_windows_jsonl,
    fit_stats,
    load_csv,
    make_windows,
    revin_denormalize,
    revin_normalize,
    window_anchors,
    window_arrays,
    write_csv,
    zero_mean_normalize,
)
from foil.errors import ConfigError, DataError


def _series(values, target=-1):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    d = values.shape[1]
    return RawSeries(values, target % d, tuple(f"c{i}" for i in range(d)))


def test_load_small_csv(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("x1,y\n1,2\n3,4\n5,6\n")
    s = load_csv(p, "y")
    assert s.length == 3 and s.n_features == 2
    assert s.target == 1
    np.testing.assert_array_equal(s.values[:, 1], [2, 4, 6])


def test_non_numeric_cell_names_row_and_column(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("x1,y\nabc,2\n")
    with pytest.raises(DataError, match=r"row 2.*'x1'"):
        load_csv(p, "y")


def test_ett_style_csv_passes_dates_through(tmp_path):
    cols = ["HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"]
    rows = [",".join(["date"] + cols)]
    for i in range(5):
        rows.append(",".join([f"2016-07-01 0{i}:00:00"] + [str(i + j) for j in range(7)]))
    p = tmp_path / "ett.csv"
    p.write_text("\n".join(rows) + "\n")
    s = load_csv(p, "OT")
    assert s.n_features == 7
    assert s.target == cols.index("OT")
    assert s.timestamps[0] == "2016-07-01 00:00:00"


def test_missing_value_and_missing_target_are_rejected(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("x1,y\n1,\n")
    with pytest.raises(DataError):
        load_csv(p, "y")
    p.write_text("x1,y\n1,2\n")
    with pytest.raises(DataError, match="target"):
        load_csv(p, "z")
    with pytest.raises(DataError):
        load_csv(tmp_path / "absent.csv", "y")


def test_headerless_csv(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("1,2\n3,4\n")
    s = load_csv(p, "c1", has_header=False)
    assert s.target == 1


def test_csv_round_trip(tmp_path):
    s = _series(np.arange(12.0).reshape(4, 3) / 7)
    write_csv(s, tmp_path / "s.csv")
    back = load_csv(tmp_path / "s.csv", "c2")
    assert back.values.tobytes() == s.values.tobytes()


def test_normalize_train_column_population_sigma():
    s = _series([[1.0], [2.0], [3.0], [100.0]])
    n = zero_mean_normalize(s, SplitSpec(3, 3, 4))
    expected = [-np.sqrt(1.5), 0.0, np.sqrt(1.5)]  # (x - 2) / sqrt(2/3)
    np.testing.assert_allclose(n.values[:3, 0], expected, atol=1e-12)
    np.testing.assert_allclose(n.values[:3, 0], [-1.2247, 0, 1.2247], atol=1e-4)


def test_constant_column_normalizes_to_zero():
    s = _series(np.full((5, 1), 3.0))
    n = zero_mean_normalize(s, SplitSpec(4, 5, 5))
    assert np.all(n.values == 0)


def test_standardized_column_is_unchanged():
    v = np.array([-1.0, 1.0, -1.0, 1.0])
    n = zero_mean_normalize(_series(v), SplitSpec(4, 4, 4))
    np.testing.assert_allclose(n.values[:, 0], v, atol=1e-12)


def test_normalization_ignores_non_train_rows():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(20, 2))
    split = SplitSpec(10, 15, 20)
    m1, s1 = fit_stats(v, split)
    v2 = v.copy()
    v2[10:] = rng.normal(size=(10, 2)) * 50
    m2, s2 = fit_stats(v2, split)
    assert m1.tobytes() == m2.tobytes() and s1.tobytes() == s2.tobytes()


def test_denormalize_target():
    s = _series([[1.0, 10.0], [3.0, 30.0]])
    n = zero_mean_normalize(s, SplitSpec(2, 2, 2))
    np.testing.assert_allclose(n.denormalize_target(n.values[:, 1]), [10.0, 30.0])


def test_five_step_series_windows():
    s = _series(np.arange(5.0))
    w = make_windows(s, 2, 1)
    # 0-based anchors 1, 2, 3 (1-based 2, 3, 4)
    assert [x.t for x in w] == [1, 2, 3]
    np.testing.assert_array_equal(w[0].X[:, 0], [0, 1])
    np.testing.assert_array_equal(w[0].Y, [2])


def test_window_too_long_is_empty():
    s = _series(np.arange(5.0))
    assert make_windows(s, 4, 2) == []


def test_count_for_96_96_on_1000_steps():
    assert len(window_anchors(1000, 96, 96, (0, 1000))) == 809


def test_window_contents_match_definition():
    rng = np.random.default_rng(1)
    s = _series(rng.normal(size=(30, 3)))
    for w in make_windows(s, 4, 3):
        np.testing.assert_array_equal(w.X, s.values[w.t - 3 : w.t + 1])
        np.testing.assert_array_equal(w.Y, s.values[w.t + 1 : w.t + 4, s.target])


def test_labels_never_leave_their_split():
    s = _series(np.arange(100.0))
    split = SplitSpec(60, 80, 100)
    for part in ("train", "val", "test"):
        lo, hi = split.bounds(part)
        w = window_arrays(s, 5, 3, split, part)
        assert np.all(w.t + 1 >= lo) and np.all(w.t + 3 < hi)


def test_lookback_reaches_back_only_when_allowed():
    split = SplitSpec(60, 80, 100)
    back = window_anchors(100, 5, 3, split.bounds("val"))
    inside = window_anchors(100, 5, 3, split.bounds("val"), reach_back=False)
    assert back[0] == 59 and inside[0] == 64
    assert len(inside) == 20 - 5 - 3 + 1


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, 120),
    st.integers(1, 20),
    st.integers(1, 20),
    st.integers(0, 60),
)
def test_window_count_inside_split(split_len, lookback, horizon, start):
    length = start + split_len + 10
    n = len(window_anchors(length, lookback, horizon, (start, start + split_len), reach_back=False))
    assert n == max(split_len - lookback - horizon + 1, 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(10, 80), st.integers(1, 6), st.integers(1, 6))
def test_anchors_strictly_increasing(length, lookback, horizon):
    a = window_anchors(length, lookback, horizon, (0, length))
    assert np.all(np.diff(a) == 1)


def test_split_parse_and_validation():
    sp = SplitSpec.parse("0.7:0.1:0.2", 1000)
    assert (sp.train_end, sp.val_end, sp.end) == (700, 800, 1000)
    for bad in ("0.7:0.1", "a:b:c", "0.8:0.3:0.1"):
        with pytest.raises(ConfigError):
            SplitSpec.parse(bad, 100)
    with pytest.raises(ConfigError):
        SplitSpec(50, 40, 100)


def test_revin_hand_example():
    X = np.array([[1.0, 7.0], [3.0, 7.0]])  # target column 0
    Xn, stats = revin_normalize(X)
    np.testing.assert_allclose(Xn[:, 0], [-1.0, 1.0])
    np.testing.assert_allclose(revin_denormalize(np.array([0.5]), stats, 0), [2.5])


def test_revin_constant_window():
    X = np.full((4, 2), 5.0)
    Xn, stats = revin_normalize(X)
    assert np.all(Xn == 0)
    np.testing.assert_allclose(revin_denormalize(np.zeros(3), stats, 1), [5.0] * 3)


def test_revin_round_trip_batch():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(6, 8, 3)) * 4 + 2
    Xn, stats = revin_normalize(X)
    Y = rng.normal(size=(6, 5))
    mean, std = stats
    Yn = (Y - mean[:, 0, 2:3]) / std[:, 0, 2:3]
    np.testing.assert_allclose(revin_denormalize(Yn, stats, 2), Y, atol=1e-10)


def test_sample_dump_is_one_record_per_window(tmp_path):
    s = _series(np.arange(10.0))
    w = window_arrays(s, 3, 2)
    dump_windows_jsonl(w, tmp_path / "w.jsonl")
    lines = (tmp_path / "w.jsonl").read_text().splitlines()
    assert len(lines) == len(w)
    rec = json.loads(lines[0])
    assert rec["t"] == 2 and rec["Y"] == [3.0, 4.0]


def test_window_arrays_samples_round_trip():
    s = _series(np.arange(20.0).reshape(10, 2))
    w = window_arrays(s, 3, 2)
    back = WindowArrays.from_samples(w.samples())
    assert back.X.tobytes() == w.X.tobytes() and back.t.tolist() == w.t.tolist()


def test_raw_series_rejects_bad_input():
    with pytest.raises(DataError):
        RawSeries(np.array([[1.0, np.nan]]), 0, ("a", "b"))
    with pytest.raises(DataError):
        RawSeries(np.ones((3, 2)), 2, ("a", "b"))
