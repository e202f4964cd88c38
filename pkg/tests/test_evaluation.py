import math

import numpy as np
import pytest

from windseq.autodiff import Tape, Tensor
from windseq.data import Normalizer, SeriesTable, make_windows, synth_farm
from windseq.evaluation import (MLPForecaster, acf, evaluate, evaluate_forecaster,
                                horizon_metrics, persistence_baseline, read_metrics_csv, rnn_baseline,
                                write_acf_csv, write_metrics_csv)
from windseq.graph import build_knn
from windseq.model import Checkpoint, ModelConfig, Seq2Seq, init_params
from windseq.training import mse_loss


def table_of(target, speed=None):
    target = np.atleast_2d(np.asarray(target, dtype=float))
    n, T = target.shape
    ts = np.datetime64("2021-04-01T00:00:00") + np.arange(T) * np.timedelta64(1, "h")
    speed = np.tile(np.linspace(3, 9, T), (n, 1)) if speed is None else speed
    return SeriesTable(tuple(f"t{i}" for i in range(n)), ts, speed, target)


@pytest.fixture(scope="module")
def farm():
    lay, tab = synth_farm(5, 6, seed=9)
    nbr = build_knn(lay, 3)
    norm = Normalizer.fit(tab)
    return lay, tab, nbr, norm, make_windows(tab, nbr, norm, 8, 4, annual=False)


# ---------------------------------------------------------------- metrics

def test_perfect_forecaster_scores_zero(farm):
    *_, w = farm
    m = evaluate_forecaster(w, lambda b: b.targets)
    assert (m.mae == 0).all() and (m.rmse == 0).all() and (m.mae_raw == 0).all()
    assert (m.counts == len(w)).all()


def test_zero_forecaster_scores_mean_target(farm):
    _, tab, _, norm, w = farm
    m = evaluate_forecaster(w, lambda b: np.zeros_like(b.targets))
    for h in range(4):
        actual = tab.power[w.turbines, w.origins + h + 1]
        assert m.mae_raw[h] == pytest.approx(np.abs(actual).mean(), rel=1e-12)


def test_metrics_match_scalar_loop(rng):
    pred, actual = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
    cap = rng.uniform(1, 3, 7)
    m = horizon_metrics(pred, actual, cap)
    for h in range(3):
        a = s = an = sn = 0.0
        for i in range(7):
            e = pred[i, h] - actual[i, h]
            a += abs(e)
            s += e * e
            an += abs(e) / cap[i]
            sn += (e / cap[i]) ** 2
        assert m.mae_raw[h] == pytest.approx(a / 7, abs=1e-12)
        assert m.rmse_raw[h] == pytest.approx(math.sqrt(s / 7), abs=1e-12)
        assert m.mae[h] == pytest.approx(an / 7, abs=1e-12)
        assert m.rmse[h] == pytest.approx(math.sqrt(sn / 7), abs=1e-12)
        assert m.rmse[h] >= m.mae[h]


def test_metric_shape_errors():
    with pytest.raises(ValueError, match="must match"):
        horizon_metrics(np.zeros((2, 3)), np.zeros((2, 2)), np.ones(2))
    with pytest.raises(ValueError, match="no samples"):
        horizon_metrics(np.zeros((0, 3)), np.zeros((0, 3)), np.ones(0))
    m = horizon_metrics(np.zeros((1, 2)), np.ones((1, 2)), np.ones(1))
    with pytest.raises(ValueError):
        m.select("mape")


def test_evaluate_agrees_with_loss(farm):
    lay, tab, nbr, norm, _ = farm
    cfg = ModelConfig(5, k=3, m=8, horizon=4, hidden=6, embed_dim=3, head_hidden=4,
                      annual_features=False)
    params = init_params(cfg, 4)
    ck = Checkpoint(cfg, params, norm, lay.digest(), nbr.digest())
    m = evaluate(ck, tab, lay)
    w = make_windows(tab, nbr, norm, 8, 4, annual=False)
    tape = Tape(record=False)
    model = Seq2Seq(cfg)
    batch = w.batch()
    loss = mse_loss(tape, model.forward(tape, {k: Tensor(v) for k, v in params.items()}, batch),
                    batch.targets).item()
    assert float(np.mean(m.rmse ** 2)) == pytest.approx(loss, rel=1e-10)
    m4 = evaluate(ck, tab, lay, threads=4)
    np.testing.assert_array_equal(m4.mae, m.mae)


def test_evaluate_rejects_other_farm(farm):
    lay, tab, nbr, norm, _ = farm
    cfg = ModelConfig(5, k=3, m=8, horizon=4, hidden=6, annual_features=False)
    ck = Checkpoint(cfg, init_params(cfg), norm, "0" * 16, nbr.digest())
    with pytest.raises(ValueError, match=f"{'0' * 16}.*{lay.digest()}"):
        evaluate(ck, tab, lay)


# ---------------------------------------------------------------- persistence

def test_persistence_constant_series():
    m = persistence_baseline(table_of(np.full((2, 30), 400.0)), 4, 6)
    assert (m.mae == 0).all() and (m.rmse == 0).all()


def test_persistence_saw_tooth():
    a = 150.0
    y = 500.0 + a * np.array([1 if t % 2 else -1 for t in range(40)]) / 2
    m = persistence_baseline(table_of(y), 3, 4)
    assert m.mae_raw[0] == pytest.approx(a)
    assert m.mae_raw[1] == 0.0
    assert m.rmse_raw[0] == pytest.approx(a)


def test_persistence_matches_direct_loop(rng):
    y = rng.uniform(0, 100, (3, 25))
    m = persistence_baseline(table_of(y), 5, 3, capacity=np.array([100.0, 50.0, 80.0]))
    for h in range(3):
        errs = [abs(y[i, t] - y[i, t + h + 1]) / c
                for i, c in enumerate((100.0, 50.0, 80.0)) for t in range(4, 25 - 3)]
        assert m.mae[h] == pytest.approx(np.mean(errs), abs=1e-12)


def test_persistence_ignores_training_data(rng):
    y = rng.uniform(0, 100, (2, 60))
    a = table_of(y).take_hours(slice(30, None))
    y2 = y.copy()
    y2[:, :30] = 0.0
    b = table_of(y2).take_hours(slice(30, None))
    ma, mb = persistence_baseline(a, 6, 4), persistence_baseline(b, 6, 4)
    np.testing.assert_array_equal(ma.mae, mb.mae)
    np.testing.assert_array_equal(ma.rmse_raw, mb.rmse_raw)


def test_persistence_uses_evaluation_origins(farm):
    _, tab, _, _, w = farm
    m = persistence_baseline(tab, 8, 4)
    assert m.counts[0] == len(w)


# ---------------------------------------------------------------- MLP

def test_mlp_zero_width_rejected():
    with pytest.raises(ValueError, match="hidden width"):
        MLPForecaster(k=3, m=4, horizon=2, hidden=0)


def test_mlp_matched_width_tracks_budget():
    mlp = MLPForecaster.matched(6, 48, 12, 24529)
    n = sum(v.size for v in mlp.init_params().values())
    assert abs(n - 24529) <= 6 * 48 + 1 + 1 + 12


def test_mlp_sees_speed_window_and_current_value(farm):
    *_, w = farm
    mlp = MLPForecaster(3, 8, 4, 5)
    b = w.batch([0, 1])
    f = mlp.features(b)
    assert f.shape == (2, 8 * 3 + 1)
    np.testing.assert_array_equal(f[:, -1], b.y_current)
    np.testing.assert_array_equal(f[0, :3], b.inputs[0, 0, :3])


# ---------------------------------------------------------------- ACF

def test_acf_lag_zero_and_bands():
    x = np.random.default_rng(0).normal(size=400)
    r = acf(x, 10)
    assert r.r[0] == 1.0
    assert r.ci95 == pytest.approx(1.959963984540054 / 20, abs=1e-12)
    assert r.ci99 == pytest.approx(2.5758293035489004 / 20, abs=1e-12)
    assert (np.abs(r.r) <= 1).all()


def test_acf_matches_definition(rng):
    x = rng.normal(size=50)
    r = acf(x, 5).r
    d = x - x.mean()
    for lag in range(6):
        assert r[lag] == pytest.approx(np.dot(d[: 50 - lag], d[lag:]) / np.dot(d, d), abs=1e-14)


def test_acf_white_noise_is_inside_bands():
    x = np.random.default_rng(2024).normal(size=10_000)
    r = acf(x, 50)
    assert (np.abs(r.r[1:]) < 3 / math.sqrt(10_000)).all()


def test_acf_errors():
    with pytest.raises(ValueError, match="constant"):
        acf(np.ones(20), 3)
    with pytest.raises(ValueError, match="too short"):
        acf(np.arange(4.0), 3)


# ---------------------------------------------------------------- files

def test_metrics_csv_round_trip(tmp_path):
    rows = {"PER": np.array([0.1, 0.2]), "ours": np.array([0.05, 1 / 3])}
    write_metrics_csv(rows, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "method,h1,h2"
    back = read_metrics_csv(tmp_path / "m.csv")
    np.testing.assert_array_equal(back["ours"], rows["ours"])
    with pytest.raises(ValueError, match="different horizons"):
        write_metrics_csv({"a": np.zeros(2), "b": np.zeros(3)}, tmp_path / "x.csv")


def test_acf_csv(tmp_path):
    r = acf(np.sin(np.arange(100.0)), 2)
    write_acf_csv(r, tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "lag,r,ci95,ci99"
    assert lines[1].startswith("0,1.0,")
    assert len(lines) == 4


@pytest.fixture(scope="module")
def bench_rnn(bench):
    from conftest import BENCH_TRAIN

    cap = bench.table.power.max(axis=1)
    per = persistence_baseline(bench.test_table, bench.model_config.m,
                               bench.model_config.horizon, capacity=cap)
    rnn, _ = rnn_baseline(bench.train_table, bench.test_table, bench.neighbors,
                          bench.model_config, BENCH_TRAIN, capacity=cap)
    return per, rnn


@pytest.mark.slow
def test_benchmark_rnn_beats_persistence_beyond_one_hour(bench_rnn):
    per, rnn = bench_rnn
    assert (rnn.mae[1:] < per.mae[1:]).all()
    assert rnn.rmse[0] < per.rmse[0]


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason=(
    "squared-error training targets the conditional mean; with power pinned at 0 or rated for "
    "long stretches the last value is exactly right there, and one-hour MAE ends up "
    "0.1261 for the RNN vs 0.1257 for persistence"))
def test_benchmark_rnn_beats_persistence_one_hour_mae(bench_rnn):
    per, rnn = bench_rnn
    assert rnn.mae[0] < per.mae[0]
