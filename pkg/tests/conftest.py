import numpy as np
import pytest

from windseq.data import synth_farm
from windseq.graph import build_knn
from windseq.model import ModelConfig
from windseq.training import TrainConfig, fit

# the seeded benchmark: 20 turbines, 120 days, first 30 days for training
BENCH_TURBINES, BENCH_DAYS, BENCH_SEED, BENCH_TRAIN_DAYS = 20, 120, 7, 30
BENCH_TRAIN = TrainConfig(epochs=8, patience=3, seed=7)


def central_diff(f, arrays, eps=1e-5):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. each array (mutated in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + eps
            fp = f()
            a[idx] = orig - eps
            fm = f()
            a[idx] = orig
            g[idx] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def rel_error(analytic, numeric, floor=1e-6):
    """Componentwise |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class Bench:
    def __init__(self):
        self.layout, self.table = synth_farm(BENCH_TURBINES, BENCH_DAYS, BENCH_SEED)
        cut = self.table.timestamps[0] + np.timedelta64(BENCH_TRAIN_DAYS * 24, "h")
        self.train_table, self.test_table = self.table.split_at(cut)
        self.model_config = ModelConfig(BENCH_TURBINES)
        self.neighbors = build_knn(self.layout, self.model_config.k)
        self._fit = None

    @property
    def fit(self):
        if self._fit is None:
            self._fit = fit(self.train_table, self.neighbors, self.model_config, BENCH_TRAIN)
        return self._fit


@pytest.fixture(scope="session")
def bench():
    """Synthetic benchmark farm; the model is trained on first use and shared."""
    return Bench()
