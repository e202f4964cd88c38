"""Loss, Adam, gradient clipping and the mini-batch training loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import NonFiniteError, Tape, Tensor
from .data import Normalizer, SeriesTable, WindowSet, make_windows, spans_a_year
from .graph import NeighborIndex
from .model import ModelConfig, Seq2Seq, as_leaves

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 200
    patience: int = 10
    seed: int = 0
    val_fraction: float = 0.1
    clip_norm: float = 5.0
    shard_size: int = 32
    threads: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        for name in ("batch_size", "patience", "shard_size", "threads"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite. ``result`` holds the best parameters seen so far."""

    def __init__(self, msg: str, result: "TrainResult"):
        super().__init__(msg)
        self.result = result


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def mse_loss(tape: Tape, forecasts: Tensor, targets) -> Tensor:
    """Mean squared error over every sample and horizon.

    Maximising a unit-variance Gaussian log-likelihood of the targets is the
    same as minimising this.
    """
    targets = targets if isinstance(targets, Tensor) else Tensor(targets)
    if forecasts.shape != targets.shape:
        raise ValueError(f"forecast shape {forecasts.shape} != target shape {targets.shape}")
    d = tape.sub(forecasts, targets)
    return tape.mean(tape.mul(d, d))


def mse(forecasts, targets) -> float:
    f, t = np.asarray(forecasts, dtype=np.float64), np.asarray(targets, dtype=np.float64)
    if f.shape != t.shape:
        raise ValueError(f"forecast shape {f.shape} != target shape {t.shape}")
    return float(np.mean((f - t) ** 2))


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------

class Adam:
    """Adam with bias-corrected moments. Updates parameter arrays in place."""

    def __init__(self, params: Mapping[str, np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
             lr: float | None = None) -> None:
        for k, g in grads.items():
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter {k!r}")
            if g.shape != params[k].shape:
                raise ValueError(f"gradient shape {g.shape} != parameter {k!r} shape {params[k].shape}")
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[k] -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


# --------------------------------------------------------------------------
# gradients over sharded batches
# --------------------------------------------------------------------------

def _shard_grad(model: Seq2Seq, params, frozen, windows: WindowSet, sel):
    batch = windows.batch(sel)
    tape = Tape()
    leaves = as_leaves(params, frozen)
    loss = mse_loss(tape, model.forward(tape, leaves, batch), batch.targets)
    names = [k for k in params if k not in frozen]
    grads = tape.backward(loss, [leaves[k] for k in names])
    return loss.item(), dict(zip(names, grads))


def batch_gradient(model, params, frozen, windows: WindowSet, sel, shard_size: int = 32, pool=None):
    """Loss and gradient of the batch mean, reduced over fixed-size shards.

    The shard partition depends only on ``shard_size``, and shard results are
    summed in shard order, so the result does not depend on thread count.
    """
    sel = np.asarray(sel)
    shards = [sel[i:i + shard_size] for i in range(0, sel.shape[0], shard_size)]
    if pool is None:
        results = [_shard_grad(model, params, frozen, windows, s) for s in shards]
    else:
        results = list(pool.map(lambda s: _shard_grad(model, params, frozen, windows, s), shards))
    n = sel.shape[0]
    loss = 0.0
    total: dict[str, np.ndarray] = {}
    for s, (l_s, g_s) in zip(shards, results):
        w = s.shape[0] / n
        loss += w * l_s
        for k, g in g_s.items():
            total[k] = w * g if k not in total else total[k] + w * g
    return loss, total


def predict_windows(model: Seq2Seq, params, windows: WindowSet, batch_size: int = 512,
                    pool=None) -> np.ndarray:
    """Normalised forecasts for every window, in window order."""
    chunks = [np.arange(i, min(i + batch_size, len(windows)))
              for i in range(0, len(windows), batch_size)]

    def run(sel):
        return model.predict(params, windows.batch(sel))

    parts = list(pool.map(run, chunks)) if pool is not None else [run(c) for c in chunks]
    if not parts:
        return np.zeros((0, model.config.horizon))
    return np.concatenate(parts, axis=0)


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    wall_seconds: float


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def train(train_set: WindowSet, val_set: WindowSet, model, cfg: TrainConfig,
          params: dict[str, np.ndarray] | None = None, frozen: Sequence[str] = (),
          on_epoch: Callable[[EpochRecord, dict], None] | None = None) -> TrainResult:
    """Adam on the windowed MSE with early stopping on validation MSE.

    ``model`` is a :class:`~windseq.model.Seq2Seq` or anything with the same
    ``init_params``/``forward``/``predict`` surface. Batches are reshuffled
    each epoch from a generator seeded by ``cfg.seed``. The parameters with
    the lowest validation MSE are returned.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation window sets must be non-empty")
    params = model.init_params(cfg.seed) if params is None else {
        k: v.copy() for k, v in params.items()}
    frozen = frozenset(frozen)
    trainable = {k: v for k, v in params.items() if k not in frozen}
    opt = Adam(trainable, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    val_targets = val_set.all_targets()
    result = TrainResult(params={k: v.copy() for k, v in params.items()})
    best, bad = math.inf, 0

    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(train_set))
            running, seen = 0.0, 0
            try:
                for i in range(0, order.shape[0], cfg.batch_size):
                    sel = order[i:i + cfg.batch_size]
                    loss, grads = batch_gradient(model, params, frozen, train_set, sel,
                                                 cfg.shard_size, pool)
                    clip_grad_norm(grads, cfg.clip_norm)
                    opt.step(params, grads)
                    running += loss * sel.shape[0]
                    seen += sel.shape[0]
                val = mse(predict_windows(model, params, val_set, pool=pool), val_targets)
            except (NonFiniteError, FloatingPointError) as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", result) from exc
            train_mse = running / seen
            if not (math.isfinite(val) and math.isfinite(train_mse)):
                raise TrainingDiverged(f"epoch {epoch}: non-finite loss", result)
            rec = EpochRecord(epoch, train_mse, val, time.perf_counter() - t0)
            result.history.append(rec)
            if on_epoch is not None:
                on_epoch(rec, params)
            log.info("epoch %d train_mse=%.6f val_mse=%.6f (%.1fs)", epoch, train_mse, val,
                     rec.wall_seconds)
            if val < best:
                best, bad = val, 0
                result.params = {k: v.copy() for k, v in params.items()}
                result.best_epoch = epoch
            else:
                bad += 1
                if bad >= cfg.patience:
                    result.stopped_early = True
                    break
    finally:
        if pool is not None:
            pool.shutdown()
    return result


def chronological_split(table: SeriesTable, val_fraction: float) -> tuple[SeriesTable, SeriesTable]:
    """Leading hours for training, trailing ``val_fraction`` for validation."""
    cut = int(round(table.n_hours * (1.0 - val_fraction)))
    return table.take_hours(slice(0, cut)), table.take_hours(slice(cut, None))


@dataclass
class FitResult:
    train: TrainResult
    normalizer: Normalizer
    model_config: ModelConfig


def fit(table: SeriesTable, neighbors: NeighborIndex, model_cfg: ModelConfig, cfg: TrainConfig,
        frozen: Sequence[str] = (), params=None, hemisphere: str = "north",
        on_epoch=None) -> FitResult:
    """Split ``table`` in time, scale on the training part, and train.

    An unset ``model_cfg.annual_features`` is resolved from the length of
    ``table``; the returned ``model_config`` carries the resolved value.
    """
    if model_cfg.annual_features is None:
        model_cfg = replace(model_cfg, annual_features=spans_a_year(table))
    train_tab, val_tab = chronological_split(table, cfg.val_fraction)
    norm = Normalizer.fit(train_tab)
    kw = dict(model_cfg.window_options(), hemisphere=hemisphere)
    try:
        tr = make_windows(train_tab, neighbors, norm, model_cfg.m, model_cfg.horizon, **kw)
        va = make_windows(val_tab, neighbors, norm, model_cfg.m, model_cfg.horizon, **kw)
    except ValueError as exc:
        raise ValueError(f"empty train/validation split: {exc}") from None
    result = train(tr, va, Seq2Seq(model_cfg), cfg, params=params, frozen=frozen,
                   on_epoch=on_epoch)
    return FitResult(result, norm, model_cfg)


def write_log_csv(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mse", "wall_seconds"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_mse), repr(r.val_mse), f"{r.wall_seconds:.3f}"])
