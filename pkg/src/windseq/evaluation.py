"""Per-horizon error metrics, baselines and autocorrelation diagnostics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from statistics import NormalDist
from typing import Callable, Mapping

import numpy as np

from . import _kernels
from .autodiff import Tape, Tensor
from .data import Batch, Normalizer, SeriesTable, WindowSet, make_windows, spans_a_year
from .graph import FarmLayout, NeighborIndex, build_knn
from .model import Checkpoint, ModelConfig, Seq2Seq, as_leaves, parameter_count
from .training import TrainConfig, TrainResult, chronological_split, predict_windows, train


@dataclass
class HorizonMetrics:
    """MAE and RMSE for horizons 1..H in raw units and scaled by capacity."""

    mae: np.ndarray
    rmse: np.ndarray
    mae_raw: np.ndarray
    rmse_raw: np.ndarray
    counts: np.ndarray

    @property
    def horizon(self) -> int:
        return self.mae.shape[0]

    def select(self, metric: str = "mae", units: str = "normalized") -> np.ndarray:
        if metric not in ("mae", "rmse") or units not in ("normalized", "raw"):
            raise ValueError(f"unknown metric/units {metric!r}/{units!r}")
        return getattr(self, metric if units == "normalized" else f"{metric}_raw")


def horizon_metrics(pred: np.ndarray, actual: np.ndarray, capacity: np.ndarray) -> HorizonMetrics:
    """Aggregate errors per column of ``pred``/``actual`` (samples x horizons).

    Both arrays are in raw units; ``capacity`` gives each row's scale for the
    normalised variant.
    """
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape or pred.ndim != 2:
        raise ValueError(f"prediction {pred.shape} and actual {actual.shape} must match (S, H)")
    s = pred.shape[0]
    if s == 0:
        raise ValueError("no samples to evaluate")
    ones = np.ones(s)
    abs_raw, sq_raw = _kernels.horizon_errors(pred, actual, ones)
    abs_n, sq_n = _kernels.horizon_errors(pred, actual, 1.0 / np.asarray(capacity, dtype=np.float64))
    return HorizonMetrics(abs_n / s, np.sqrt(sq_n / s), abs_raw / s, np.sqrt(sq_raw / s),
                          np.full(pred.shape[1], s, dtype=np.int64))


def _score_windows(windows: WindowSet, pred_norm: np.ndarray, capacity=None) -> HorizonMetrics:
    scale = windows.normalizer.target_scale[windows.turbines]
    actual = windows.all_targets() * scale[:, None]
    pred = pred_norm * scale[:, None]
    cap = scale if capacity is None else np.asarray(capacity, dtype=np.float64)[windows.turbines]
    return horizon_metrics(pred, actual, cap)


def evaluate_forecaster(windows: WindowSet, forecaster: Callable[[Batch], np.ndarray],
                        capacity=None, batch_size: int = 512) -> HorizonMetrics:
    """Score any callable mapping a :class:`Batch` to normalised forecasts."""
    parts = []
    for i in range(0, len(windows), batch_size):
        parts.append(forecaster(windows.batch(np.arange(i, min(i + batch_size, len(windows))))))
    return _score_windows(windows, np.concatenate(parts, axis=0), capacity)


def evaluate(checkpoint: Checkpoint, table: SeriesTable, layout: FarmLayout,
             capacity=None, threads: int = 1) -> HorizonMetrics:
    """Rolling-origin (stride 1) evaluation over every turbine and admissible origin.

    ``capacity`` defaults to the checkpoint's per-turbine target scale, so the
    normalised squared errors are on the training loss scale.
    """
    cfg = checkpoint.config
    neighbors = build_knn(layout, cfg.k)
    checkpoint.check_farm(layout.digest(), neighbors.digest())
    windows = make_windows(table, neighbors, checkpoint.normalizer, cfg.m, cfg.horizon,
                           hemisphere=checkpoint.hemisphere, **cfg.window_options())
    model = Seq2Seq(cfg)
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            pred = predict_windows(model, checkpoint.params, windows, pool=pool)
    else:
        pred = predict_windows(model, checkpoint.params, windows)
    return _score_windows(windows, pred, capacity)


# --------------------------------------------------------------------------
# baselines
# --------------------------------------------------------------------------

def persistence_baseline(table: SeriesTable, m: int, horizon: int, capacity=None) -> HorizonMetrics:
    """Last observed value held for every horizon, over the same origins as
    :func:`evaluate` with window length ``m``."""
    y = table.target
    seg = table.segment
    T = table.n_hours
    t = np.arange(m - 1, T - horizon, dtype=np.int64)
    t = t[(seg[t - m + 1] == seg[t]) & (seg[t + horizon] == seg[t])]
    if t.size == 0:
        raise ValueError(f"series too short for m={m}, horizon={horizon}")
    n = table.n_turbines
    turbines = np.repeat(np.arange(n), t.size)
    origins = np.tile(t, n)
    ahead = origins[:, None] + np.arange(1, horizon + 1)[None, :]
    actual = y[turbines[:, None], ahead]
    pred = np.repeat(y[turbines, origins][:, None], horizon, axis=1)
    cap = y.max(axis=1) if capacity is None else np.asarray(capacity, dtype=np.float64)
    return horizon_metrics(pred, actual, cap[turbines])


@dataclass
class MLPForecaster:
    """Flattened neighbour-speed window plus current value -> tanh layer -> all horizons."""

    k: int
    m: int
    horizon: int
    hidden: int

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError(f"MLP hidden width must be >= 1, got {self.hidden}")

    @property
    def n_inputs(self) -> int:
        return self.m * self.k + 1

    @classmethod
    def matched(cls, k: int, m: int, horizon: int, budget: int) -> "MLPForecaster":
        """Width chosen so the parameter count is close to ``budget``."""
        n_in = m * k + 1
        width = max(1, round((budget - horizon) / (n_in + 1 + horizon)))
        return cls(k, m, horizon, int(width))

    def init_params(self, seed: int = 0) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        a, b = 1.0 / math.sqrt(self.n_inputs), 1.0 / math.sqrt(self.hidden)
        return {
            "W1": rng.uniform(-a, a, (self.n_inputs, self.hidden)),
            "b1": np.zeros(self.hidden),
            "W2": rng.uniform(-b, b, (self.hidden, self.horizon)),
            "b2": np.zeros(self.horizon),
        }

    def features(self, batch: Batch) -> np.ndarray:
        speed = batch.inputs[:, :, : self.k]  # (m, B, k)
        flat = speed.transpose(1, 0, 2).reshape(speed.shape[1], -1)
        return np.concatenate([flat, batch.y_current[:, None]], axis=1)

    def forward(self, tape: Tape, leaves, batch: Batch) -> Tensor:
        x = Tensor(self.features(batch))
        a = tape.tanh(tape.add_row(tape.matmul(x, leaves["W1"]), leaves["b1"]))
        return tape.add_row(tape.matmul(a, leaves["W2"]), leaves["b2"])

    def predict(self, params: Mapping[str, np.ndarray], batch: Batch) -> np.ndarray:
        tape = Tape(record=False)
        return self.forward(tape, as_leaves(params, frozen=params.keys()), batch).values.copy()


def _fit_baseline(model, train_table, neighbors, m, horizon, cfg, **kw):
    tr_tab, va_tab = chronological_split(train_table, cfg.val_fraction)
    norm = Normalizer.fit(tr_tab)
    tr = make_windows(tr_tab, neighbors, norm, m, horizon, **kw)
    va = make_windows(va_tab, neighbors, norm, m, horizon, **kw)
    return train(tr, va, model, cfg), norm


def _score_model(model, params, norm, test_table, neighbors, m, horizon, capacity, **kw):
    windows = make_windows(test_table, neighbors, norm, m, horizon, **kw)
    return _score_windows(windows, predict_windows(model, params, windows), capacity)


def mlp_baseline(train_table: SeriesTable, test_table: SeriesTable, neighbors: NeighborIndex,
                 m: int, horizon: int, cfg: TrainConfig, hidden: int | None = None,
                 capacity=None, hemisphere: str = "north") -> tuple[HorizonMetrics, TrainResult]:
    """Train the MLP baseline; ``hidden=None`` matches the default GRU model's size."""
    if hidden is None:
        budget = parameter_count(ModelConfig(train_table.n_turbines, k=neighbors.k, m=m,
                                             horizon=horizon))
        model = MLPForecaster.matched(neighbors.k, m, horizon, budget)
    else:
        model = MLPForecaster(neighbors.k, m, horizon, hidden)
    res, norm = _fit_baseline(model, train_table, neighbors, m, horizon, cfg,
                              hemisphere=hemisphere)
    metrics = _score_model(model, res.params, norm, test_table, neighbors, m, horizon,
                           capacity, hemisphere=hemisphere)
    return metrics, res


def rnn_baseline(train_table: SeriesTable, test_table: SeriesTable, neighbors: NeighborIndex,
                 model_cfg: ModelConfig, cfg: TrainConfig, capacity=None,
                 hemisphere: str = "north") -> tuple[HorizonMetrics, TrainResult]:
    """The encoder-decoder harness with vanilla tanh cells in place of GRUs."""
    mc = replace(model_cfg, cell="rnn")
    if mc.annual_features is None:
        mc = replace(mc, annual_features=spans_a_year(train_table))
    model = Seq2Seq(mc)
    kw = dict(mc.window_options(), hemisphere=hemisphere)
    res, norm = _fit_baseline(model, train_table, neighbors, mc.m, mc.horizon, cfg, **kw)
    metrics = _score_model(model, res.params, norm, test_table, neighbors, mc.m, mc.horizon,
                           capacity, **kw)
    return metrics, res


# --------------------------------------------------------------------------
# autocorrelation
# --------------------------------------------------------------------------

@dataclass
class AcfResult:
    r: np.ndarray  # lags 0..max_lag
    ci95: float
    ci99: float
    n: int


def acf(series, max_lag: int) -> AcfResult:
    """Sample autocorrelation with white-noise bands ``z_{a/2} / sqrt(T)``."""
    x = np.asarray(series, dtype=np.float64).ravel()
    if max_lag < 0:
        raise ValueError("max_lag must be >= 0")
    if x.shape[0] <= max_lag + 1:
        raise ValueError(f"series of length {x.shape[0]} too short for max_lag={max_lag}")
    if not np.isfinite(x).all():
        raise ValueError("series contains NaN/Inf")
    if np.ptp(x) == 0:
        raise ValueError("constant series has no autocorrelation (zero variance)")
    r = _kernels.acf(x, max_lag)
    n = x.shape[0]
    z = NormalDist()
    return AcfResult(r, z.inv_cdf(0.975) / math.sqrt(n), z.inv_cdf(0.995) / math.sqrt(n), n)


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------

def write_metrics_csv(rows: Mapping[str, np.ndarray], path) -> None:
    """One row per method, columns ``h1..hH``."""
    rows = dict(rows)
    if not rows:
        raise ValueError("no metric rows to write")
    H = {len(v) for v in rows.values()}
    if len(H) != 1:
        raise ValueError(f"metric rows have different horizons: {sorted(H)}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method"] + [f"h{h}" for h in range(1, H.pop() + 1)])
        for name, vals in rows.items():
            w.writerow([name] + [repr(float(v)) for v in vals])


def read_metrics_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        return {row[0]: np.array([float(v) for v in row[1:]]) for row in reader}


def write_acf_csv(result: AcfResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lag", "r", "ci95", "ci99"])
        for lag, r in enumerate(result.r):
            w.writerow([lag, repr(float(r)), repr(result.ci95), repr(result.ci99)])
