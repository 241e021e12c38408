import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from timeexpert import fixtures
from timeexpert.data import (
    AnomalySpec,
    Dataset,
    Series,
    SplitSpec,
    dominant_period,
    inject_anomaly,
    load_csv,
    make_windows,
    save_csv,
    standardize,
    synth_series,
    unstandardize,
)
from timeexpert.errors import ConfigError, EmptySplit, InvalidArgument, MissingFile, NonNumericCell, ParseError


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# ---- CSV --------------------------------------------------------------------------

def test_load_small_csv(tmp_path):
    p = _write(tmp_path, "date,a,b\n2016-07-01 00:00:00,1,2\n2016-07-01 01:00:00,3,4.5\n2016-07-01 02:00:00,-1,0\n")
    s = load_csv(p)
    assert (s.length, s.num_channels) == (3, 2)
    assert s.channels == ["a", "b"]
    assert s.timestamps[1] == "2016-07-01 01:00:00"
    np.testing.assert_array_equal(s.values, [[1, 2], [3, 4.5], [-1, 0]])


def test_load_na_cell_reports_location(tmp_path):
    p = _write(tmp_path, "date,a,b\nt0,1,2\nt1,NA,4\n")
    with pytest.raises(ParseError) as err:
        load_csv(p)
    assert (err.value.row, err.value.col) == (3, 2)


def test_load_empty_and_text_cells(tmp_path):
    with pytest.raises(ParseError) as err:
        load_csv(_write(tmp_path, "date,a,b\nt0,1,\n"))
    assert (err.value.row, err.value.col) == (2, 3)
    with pytest.raises(NonNumericCell) as err:
        load_csv(_write(tmp_path, "date,a\nt0,1\nt1,abc\n", "x.csv"))
    assert (err.value.row, err.value.col) == (3, 2)


def test_load_missing_file(tmp_path):
    with pytest.raises(MissingFile):
        load_csv(tmp_path / "nope.csv")


def test_fixtures_load():
    etth = load_csv(fixtures.ETTH1_EXCERPT)
    assert (etth.length, etth.num_channels) == (2880, 7)
    assert etth.channels[-1] == "OT"
    sine = load_csv(fixtures.SINUSOID)
    assert sine.num_channels == 1 and sine.length == 2000


def test_csv_round_trip(tmp_path):
    s = synth_series([24], noise=0.3, length=50, channels=2, seed=1)
    save_csv(s, tmp_path / "s.csv")
    back = load_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.values, s.values)
    assert back.timestamps == s.timestamps


# ---- standardize --------------------------------------------------------------------

def test_standardize_hand_case():
    s = Series("x", np.array([1.0, 2.0, 3.0, 4.0, 100.0]), ["a"])
    z, mu, sigma = standardize(s, 4)
    assert mu[0] == 2.5
    assert abs(sigma[0] - np.sqrt(1.25)) < 1e-12
    np.testing.assert_allclose(z.values[:4, 0], (np.arange(1, 5) - 2.5) / (np.sqrt(1.25) + 1e-5))
    np.testing.assert_allclose(unstandardize(z.values, mu, sigma), s.values)


def test_standardize_constant_train():
    s = Series("x", np.full((6, 1), 4.0), ["a"])
    z, _, sigma = standardize(s, 4)
    assert sigma[0] == 0.0
    np.testing.assert_array_equal(z.values, 0.0)


def test_standardize_uses_train_only():
    s = Series("x", np.concatenate([np.zeros(10), np.ones(10) * 50]), ["a"])
    _, mu, _ = standardize(s, 10)
    assert mu[0] == 0.0


# ---- splits and windows ----------------------------------------------------------------

def test_split_boundaries():
    assert SplitSpec("ett").boundaries(100) == {"train": (0, 60), "val": (60, 80), "test": (80, 100)}
    b = SplitSpec("general").boundaries(1000)
    assert b["train"] == (0, 700) and b["test"] == (800, 1000)
    with pytest.raises(ConfigError):
        SplitSpec("custom", (0.5, 0.5, 0.5))
    with pytest.raises(ConfigError):
        SplitSpec("weird")


def test_window_count_example():
    ws = make_windows(np.arange(200.0), None, 96, 96)
    assert len(ws) == 9
    np.testing.assert_array_equal(ws.inputs[0, :, 0], np.arange(96))
    np.testing.assert_array_equal(ws.targets[-1, :, 0], np.arange(104, 200))


def test_stride_equal_horizon_gives_disjoint_targets():
    ws = make_windows(np.arange(500.0), None, 48, 24, stride=24)
    flat = ws.targets[:, :, 0].ravel()
    assert len(np.unique(flat)) == len(flat)


def test_short_split_rejected():
    with pytest.raises(EmptySplit):
        make_windows(np.arange(150.0), None, 96, 96)
    with pytest.raises(EmptySplit):
        make_windows(np.arange(300.0), SplitSpec("ett"), 96, 96, part="val")


def _brute_windows(t, lookback, horizon, stride, start, end):
    usable = [a for a in range(t + 1)
              if a - lookback >= 0 and a + horizon <= t and start <= a and a + horizon <= end]
    return usable[::stride]


@settings(max_examples=200, deadline=None)
@given(st.integers(20, 400), st.integers(1, 60), st.integers(1, 60), st.integers(1, 7),
       st.sampled_from(["train", "val", "test"]), st.sampled_from(["ett", "general"]))
def test_windows_match_brute_force(t, lookback, horizon, stride, part, protocol):
    split = SplitSpec(protocol)
    start, end = split.boundaries(t)[part]
    expect = _brute_windows(t, lookback, horizon, stride, start, end)
    values = np.arange(float(t))
    if not expect:
        with pytest.raises(EmptySplit):
            make_windows(values, split, lookback, horizon, stride, part)
        return
    ws = make_windows(values, split, lookback, horizon, stride, part)
    assert ws.anchors.tolist() == expect
    for (x, y), a in zip(ws, expect):
        np.testing.assert_array_equal(x[:, 0], values[a - lookback:a])
        np.testing.assert_array_equal(y[:, 0], values[a:a + horizon])
        assert start <= a and a + horizon <= end


def test_dataset_prepare_standardizes_on_train():
    s = load_csv(fixtures.ETTH1_EXCERPT)
    ds = Dataset.prepare(s, SplitSpec("ett"))
    train = ds.series.values[:1728]
    np.testing.assert_allclose(train.mean(0), 0.0, atol=1e-9)
    np.testing.assert_allclose(train.std(0), 1.0, atol=1e-4)
    assert len(ds.windows("test", 96, 96)) == 576 - 96 + 1


# ---- synthetic ------------------------------------------------------------------------

def test_synth_exact_cycles():
    s = synth_series([24], noise=0.0, length=48, seed=3)
    np.testing.assert_allclose(s.values[24:], s.values[:24], atol=1e-6)


def test_synth_pure_noise_moments():
    s = synth_series([24], amplitudes=[0.0], noise=2.0, length=10_000, seed=5)
    assert abs(s.values.std() / 2.0 - 1.0) < 0.1


def test_synth_seeded():
    a = synth_series([24, 168], noise=0.1, length=300, channels=3, seed=9)
    b = synth_series([24, 168], noise=0.1, length=300, channels=3, seed=9)
    c = synth_series([24, 168], noise=0.1, length=300, channels=3, seed=10)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_dominant_period():
    s = synth_series([24], noise=0.0, length=480, seed=0)
    assert abs(dominant_period(s.values[:, 0]) - 24) < 1e-9


# ---- anomalies -----------------------------------------------------------------------

def test_zero_imputation_region():
    s = synth_series([24], noise=0.1, length=100, channels=2, seed=1)
    out, mask = inject_anomaly(s, AnomalySpec("zero_imputation", 10, 10))
    np.testing.assert_array_equal(out.values[10:20], 0.0)
    expect = np.zeros((100, 2), bool)
    expect[10:20] = True
    np.testing.assert_array_equal(mask, expect)


def test_outlier_elevates_region_by_magnitude():
    x = np.random.default_rng(0).normal(size=5000)
    x = (x - x.mean()) / x.std()
    out, mask = inject_anomaly(x, AnomalySpec("abrupt_outlier", 100, 50, magnitude=5.0))
    np.testing.assert_allclose(out[100:150] - x[100:150], 5.0)
    assert mask.sum() == 50


def test_zero_length_is_identity():
    s = synth_series([24], noise=0.2, length=60, seed=2)
    for kind in ("abrupt_outlier", "periodicity_deviation", "zero_imputation"):
        out, mask = inject_anomaly(s, AnomalySpec(kind, 30, 0))
        np.testing.assert_array_equal(out.values, s.values)
        assert not mask.any()


def test_periodicity_deviation_changes_shape_but_keeps_residual():
    clean = synth_series([24], noise=0.0, length=240, seed=4)
    out, _ = inject_anomaly(clean, AnomalySpec("periodicity_deviation", 100, 36, period=24))
    region = out.values[100:136, 0]
    assert np.max(np.abs(region - clean.values[100:136, 0])) > 0.5
    # the replacement is itself a unit-amplitude sinusoid at 1.5x frequency
    spec = np.abs(np.fft.rfft(region - region.mean(), n=36 * 8))
    freqs = np.fft.rfftfreq(36 * 8)
    assert abs(freqs[np.argmax(spec)] - 1.5 / 24) < 0.01
    assert np.max(np.abs(region)) <= 1.0 + 1e-6


def test_anomaly_out_of_range_and_bad_kind():
    with pytest.raises(InvalidArgument):
        inject_anomaly(np.zeros(10), AnomalySpec("zero_imputation", 8, 5))
    with pytest.raises(ConfigError):
        AnomalySpec("spike", 0, 1)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["abrupt_outlier", "periodicity_deviation", "zero_imputation"]),
       st.integers(0, 150), st.integers(0, 50), st.one_of(st.none(), st.integers(0, 2)), st.integers(0, 1000))
def test_off_mask_cells_bit_exact(kind, pos, length, channel, seed):
    s = synth_series([24, 7], noise=0.3, length=200, channels=3, seed=seed)
    out, mask = inject_anomaly(s, AnomalySpec(kind, pos, length, channel=channel))
    assert np.array_equal(out.values[~mask], s.values[~mask])
    assert mask.sum() == length * (3 if channel is None else 1)
