import math

import numpy as np
import pytest
from scipy import stats

from windseq.data import (GapError, Normalizer, SeriesTable, ingest, make_windows, synth_farm,
                          time_features, write_series_csv)
from windseq.graph import FarmLayout, build_knn

LAYOUT = FarmLayout(("a", "b"), np.array([[0.0, 0.0], [100.0, 0.0]]))


def write_rows(path, rows, header="timestamp,turbine_id,speed,power"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


def hourly_rows(hours, turbines=("a", "b"), skip=()):
    rows = []
    for h in range(hours):
        for j, tid in enumerate(turbines):
            if (tid, h) in skip:
                continue
            rows.append(f"2021-03-01T{h:02d}:00:00,{tid},{5.0 + h + j},{100.0 * h + j}")
    return rows


# ---------------------------------------------------------------- ingest

def test_ingest_complete_table(tmp_path):
    t = ingest(write_rows(tmp_path / "s.csv", hourly_rows(5)), LAYOUT)
    assert t.speed.shape == (2, 5) and t.power.shape == (2, 5)
    assert t.speed[1, 3] == 5.0 + 3 + 1
    assert t.power[0, 4] == 400.0
    assert t.mode == "power"


def test_single_missing_hour_is_the_neighbour_mean(tmp_path):
    t = ingest(write_rows(tmp_path / "s.csv", hourly_rows(5, skip={("a", 2)})), LAYOUT)
    assert t.speed[0, 2] == (t.speed[0, 1] + t.speed[0, 3]) / 2
    assert t.power[0, 2] == (t.power[0, 1] + t.power[0, 3]) / 2


def test_three_hour_gap_is_interpolated(tmp_path):
    skip = {("b", 2), ("b", 3), ("b", 4)}
    t = ingest(write_rows(tmp_path / "s.csv", hourly_rows(7, skip=skip)), LAYOUT)
    np.testing.assert_allclose(t.speed[1], 6.0 + np.arange(7), rtol=0, atol=1e-12)


def test_long_gap_names_the_interval(tmp_path):
    skip = {("a", h) for h in range(2, 6)}
    path = write_rows(tmp_path / "s.csv", hourly_rows(9, skip=skip))
    with pytest.raises(GapError, match=r"4-hour gap for a from 2021-03-01T02:00:00 to 2021-03-01T05:00:00"):
        ingest(path, LAYOUT)


def test_long_gap_with_split_drops_hours_and_labels_segments(tmp_path):
    skip = {("a", h) for h in range(2, 6)}
    t = ingest(write_rows(tmp_path / "s.csv", hourly_rows(9, skip=skip)), LAYOUT, allow_split=True)
    assert t.n_hours == 5
    assert t.segment.tolist() == [0, 0, 1, 1, 1]
    assert not np.isnan(t.speed).any()


def test_unknown_turbine(tmp_path):
    path = write_rows(tmp_path / "s.csv", hourly_rows(3) + ["2021-03-01T03:00:00,zz,5,5"])
    with pytest.raises(ValueError, match="unknown turbine_id 'zz'"):
        ingest(path, LAYOUT)


def test_non_monotone_timestamps(tmp_path):
    rows = hourly_rows(3) + ["2021-03-01T01:00:00,a,5,5"]
    with pytest.raises(ValueError, match="non-monotone"):
        ingest(write_rows(tmp_path / "s.csv", rows), LAYOUT)


def test_negative_power_is_clipped(tmp_path):
    rows = ["2021-03-01T00:00:00,a,3,-2", "2021-03-01T00:00:00,b,3,1",
            "2021-03-01T01:00:00,a,3,4", "2021-03-01T01:00:00,b,3,1"]
    t = ingest(write_rows(tmp_path / "s.csv", rows), LAYOUT)
    assert t.power[0, 0] == 0.0


def test_speed_only_file(tmp_path):
    rows = [r.rsplit(",", 1)[0] for r in hourly_rows(4)]
    t = ingest(write_rows(tmp_path / "s.csv", rows, "timestamp,turbine_id,speed"), LAYOUT)
    assert t.mode == "speed" and t.power is None
    assert t.target is t.speed


def test_until_discards_later_rows(tmp_path):
    t = ingest(write_rows(tmp_path / "s.csv", hourly_rows(6)), LAYOUT, until="2021-03-01T03:00:00")
    assert t.n_hours == 4


def test_series_csv_round_trip(tmp_path):
    lay, tab = synth_farm(3, 2, seed=1)
    write_series_csv(tab, tmp_path / "s.csv")
    back = ingest(tmp_path / "s.csv", lay)
    np.testing.assert_array_equal(back.speed, tab.speed)
    np.testing.assert_array_equal(back.power, tab.power)
    np.testing.assert_array_equal(back.timestamps, tab.timestamps)


# ---------------------------------------------------------------- time features

def test_midnight_jan_first():
    f = time_features(np.datetime64("2021-01-01T00:00:00"))
    assert f.shape == (8,)
    assert f[0] == 0.0 and f[1] == 1.0
    assert f[4:].tolist() == [1.0, 0.0, 0.0, 0.0]


def test_six_am_is_quarter_turn():
    f = time_features(np.datetime64("2021-05-05T06:00:00"))
    assert f[0] == pytest.approx(1.0, abs=1e-15)
    assert f[1] == pytest.approx(0.0, abs=1e-15)
    assert f[4:].tolist() == [0.0, 1.0, 0.0, 0.0]


def test_june_and_december_solstice_are_roughly_opposite():
    jun = time_features(np.datetime64("2021-06-21T12:00:00"))
    dec = time_features(np.datetime64("2021-12-21T12:00:00"))
    # direct phase oracle: day-of-year angle of each date
    for f, doy in ((jun, 171.5), (dec, 354.5)):
        assert f[2] == pytest.approx(math.sin(2 * math.pi * doy / 365), abs=1e-12)
        assert f[3] == pytest.approx(math.cos(2 * math.pi * doy / 365), abs=1e-12)
    assert np.dot(jun[2:4], dec[2:4]) < -0.99


def test_unit_circle_and_one_hot(rng):
    ts = np.datetime64("2020-01-01T00:00:00") + rng.integers(0, 3 * 8760, 500) * np.timedelta64(1, "h")
    f = time_features(ts)
    np.testing.assert_allclose(f[:, 0] ** 2 + f[:, 1] ** 2, 1.0, atol=1e-15)
    np.testing.assert_allclose(f[:, 2] ** 2 + f[:, 3] ** 2, 1.0, atol=1e-15)
    assert (f[:, 4:].sum(axis=1) == 1.0).all()


def test_southern_hemisphere_shifts_seasons():
    ts = np.datetime64("2021-01-15T00:00:00")
    assert time_features(ts, "south")[4:].tolist() == [0.0, 0.0, 1.0, 0.0]


# ---------------------------------------------------------------- normalizer

def test_normalizer_round_trip(rng):
    tab = SeriesTable(("a", "b", "c"), np.datetime64("2021-01-01") + np.arange(50) * np.timedelta64(1, "h"),
                      rng.uniform(0, 20, (3, 50)), rng.uniform(0, 2000, (3, 50)))
    norm = Normalizer.fit(tab)
    np.testing.assert_allclose(norm.speed_inverse(norm.speed(tab.speed)), tab.speed, rtol=0, atol=1e-12)
    np.testing.assert_allclose(norm.target_inverse(norm.target(tab.power)), tab.power, rtol=1e-15)
    z = norm.speed(tab.speed)
    np.testing.assert_allclose(z.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=1), 1.0, atol=1e-12)
    assert norm.target(tab.power).max() == 1.0
    back = Normalizer.from_dict(norm.to_dict())
    np.testing.assert_array_equal(back.speed_std, norm.speed_std)


def test_constant_speed_rejected():
    tab = SeriesTable(("a",), np.datetime64("2021-01-01") + np.arange(5) * np.timedelta64(1, "h"),
                      np.full((1, 5), 4.0), np.ones((1, 5)))
    with pytest.raises(ValueError, match="constant wind speed"):
        Normalizer.fit(tab)


# ---------------------------------------------------------------- windows

def small_table(rng, n=4, T=10):
    ts = np.datetime64("2021-02-01T00:00:00") + np.arange(T) * np.timedelta64(1, "h")
    return SeriesTable(tuple(f"t{i}" for i in range(n)), ts, rng.uniform(1, 15, (n, T)),
                       rng.uniform(0, 2000, (n, T)))


def test_window_count_per_turbine(rng):
    tab = small_table(rng)
    lay = FarmLayout(tab.turbine_ids, rng.uniform(0, 1000, (4, 2)))
    ws = make_windows(tab, build_knn(lay, 2), Normalizer.fit(tab), 4, 2)
    assert len(ws) == 4 * 5
    assert np.bincount(ws.turbines).tolist() == [5] * 4


def test_k_one_uses_only_own_series(rng):
    tab = small_table(rng)
    lay = FarmLayout(tab.turbine_ids, rng.uniform(0, 1000, (4, 2)))
    norm = Normalizer.fit(tab)
    ws = make_windows(tab, build_knn(lay, 1), norm, 4, 2)
    for s in ws.samples():
        t = s.origin
        np.testing.assert_array_equal(s.input[0], norm.speed(tab.speed)[s.turbine_index, t - 3:t + 1])
        assert s.input.shape == (1 + 8, 4)


def test_windows_match_direct_indexing(rng):
    tab = small_table(rng, n=6, T=30)
    lay = FarmLayout(tab.turbine_ids, rng.uniform(0, 1000, (6, 2)))
    nbr = build_knn(lay, 3)
    norm = Normalizer.fit(tab)
    ws = make_windows(tab, nbr, norm, 5, 3)
    tf = time_features(tab.timestamps)
    for s in ws.samples():
        i, t = s.turbine_index, s.origin
        for c, j in enumerate(nbr[i]):
            raw = s.input[c] * norm.speed_std[j] + norm.speed_mean[j]
            np.testing.assert_allclose(raw, tab.speed[j, t - 4:t + 1], rtol=1e-15, atol=1e-13)
        np.testing.assert_array_equal(s.input[3:].T, tf[t - 4:t + 1])
        # targets denormalise back to the raw power within one ulp
        raw_targets = s.targets * norm.target_scale[i]
        np.testing.assert_array_max_ulp(raw_targets, tab.power[i, t + 1:t + 4], maxulp=1)
        assert s.y_current * norm.target_scale[i] == pytest.approx(tab.power[i, t], rel=1e-15)


def test_windows_respect_segments(rng):
    tab = small_table(rng, n=2, T=12)
    tab.segment = np.array([0] * 6 + [1] * 6)
    lay = FarmLayout(tab.turbine_ids, rng.uniform(0, 1000, (2, 2)))
    ws = make_windows(tab, build_knn(lay, 1), Normalizer.fit(tab), 3, 2)
    # per segment of 6: 6 - 3 - 2 + 1 = 2 origins
    assert ws.origins[:4].tolist() == [2, 3, 8, 9]


def test_too_short_series(rng):
    tab = small_table(rng, T=5)
    lay = FarmLayout(tab.turbine_ids, rng.uniform(0, 1000, (4, 2)))
    with pytest.raises(ValueError, match="too short"):
        make_windows(tab, build_knn(lay, 1), Normalizer.fit(tab), 4, 2)


def test_power_history_channel(rng):
    tab = small_table(rng)
    lay = FarmLayout(tab.turbine_ids, rng.uniform(0, 1000, (4, 2)))
    norm = Normalizer.fit(tab)
    ws = make_windows(tab, build_knn(lay, 2), norm, 4, 2, power_history=True)
    assert ws.channels == 2 + 1 + 8
    s = next(ws.samples())
    np.testing.assert_array_equal(s.input[2], norm.target(tab.power)[0, 0:4])


# ---------------------------------------------------------------- synthetic farm

def test_synth_is_deterministic():
    a = synth_farm(5, 3, seed=11)
    b = synth_farm(5, 3, seed=11)
    np.testing.assert_array_equal(a[1].speed, b[1].speed)
    np.testing.assert_array_equal(a[1].power, b[1].power)
    np.testing.assert_array_equal(a[0].coords, b[0].coords)
    c = synth_farm(5, 3, seed=12)
    assert not np.array_equal(a[1].speed, c[1].speed)


def test_synth_degenerate_field_gives_identical_series():
    _, tab = synth_farm(6, 4, seed=2, spatial_corr_length=math.inf, noise_level=0.0)
    assert (tab.speed == tab.speed[0]).all()


def test_synth_power_is_within_rated_and_curves_differ():
    _, tab = synth_farm(8, 20, seed=3)
    assert (tab.speed >= 0).all()
    assert (tab.power >= 0).all() and (tab.power <= 3000).all()
    # same speed maps to different power on different turbines
    ratio = tab.power.max(axis=1)
    assert len(np.unique(np.round(ratio))) == 8


def test_synth_lag_one_autocorrelation_matches_ar_coefficient():
    _, tab = synth_farm(3, 120, seed=4, ar_coef=0.8)
    for x in tab.speed:
        x = x - x.mean()
        r1 = float(np.dot(x[:-1], x[1:]) / np.dot(x, x))
        assert abs(r1 - 0.8) < 0.05


def test_synth_correlation_decays_with_distance():
    rhos = []
    for seed in range(5):
        lay, tab = synth_farm(16, 30, seed=seed, spatial_corr_length=800.0)
        c = np.corrcoef(tab.speed)
        d = np.linalg.norm(lay.coords[:, None] - lay.coords[None], axis=-1)
        iu = np.triu_indices(16, 1)
        rhos.append(stats.spearmanr(d[iu], c[iu]).statistic)
    assert all(r < 0 for r in rhos)
    assert np.mean(rhos) < -0.3


def test_synth_rejects_bad_sizes():
    with pytest.raises(ValueError):
        synth_farm(0, 10, seed=1)
    with pytest.raises(ValueError):
        synth_farm(3, 1, seed=1)
