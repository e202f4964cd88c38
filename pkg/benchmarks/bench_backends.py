"""Time the hot kernels and one training epoch under the numba and numpy backends.

    python3 benchmarks/bench_backends.py [--repeat 20] [--epoch]
"""
import argparse
import time

import numpy as np

from windseq import _kernels
from windseq.data import Normalizer, make_windows, synth_farm
from windseq.graph import build_knn
from windseq.model import ModelConfig, Seq2Seq
from windseq.training import TrainConfig, train


def kernel_cases(rng):
    B, H = 128, 48
    a = [rng.normal(size=(B, H)) for _ in range(4)]
    b = rng.normal(size=H)
    h = rng.normal(size=(B, H))
    z = rng.uniform(size=(B, H))
    speed = rng.normal(size=(20, 2880))
    nbrs = rng.integers(0, 20, size=(20, 6))
    turbines = rng.integers(0, 20, size=512)
    origins = rng.integers(48, 2880, size=512)
    p, t, s = rng.normal(size=(5000, 12)), rng.normal(size=(5000, 12)), rng.uniform(1, 2, 5000)
    return {
        "sigmoid": (rng.normal(size=(B, 3 * H)),),
        "gru_gates": (a[0], a[1], a[2], a[3], b, b, h),
        "gru_blend": (a[0], a[1], b, z, h),
        "gru_back_blend": (a[0], z, np.tanh(a[1]), h),
        "gru_back_reset": (a[0], z, h, a[1]),
        "gather_windows": (speed, nbrs, turbines, origins, 48, np.empty((48, 512, 6))),
        "horizon_errors": (p, t, s),
        "acf": (rng.normal(size=2880), 50),
    }


def best_of(fn, args, repeat):
    fn(*args)  # compile / warm up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def epoch_seconds(backend):
    _kernels.set_backend(backend)
    layout, table = synth_farm(20, 20, seed=7)
    cfg = ModelConfig(20)
    nb = build_knn(layout, cfg.k)
    norm = Normalizer.fit(table)
    tr_tab, va_tab = table.split_at(table.timestamps[400])
    tr = make_windows(tr_tab, nb, norm, cfg.m, cfg.horizon, annual=False)
    va = make_windows(va_tab, nb, norm, cfg.m, cfg.horizon, annual=False)
    t0 = time.perf_counter()
    train(tr, va, Seq2Seq(cfg), TrainConfig(epochs=1, seed=0))
    return time.perf_counter() - t0


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--epoch", action="store_true", help="also time one training epoch")
    args = ap.parse_args()
    if _kernels._NUMBA is None:
        raise SystemExit("numba is not importable; nothing to compare")

    cases = kernel_cases(np.random.default_rng(0))
    print(f"{'kernel':<16}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, call_args in cases.items():
        t_np = best_of(_kernels._NUMPY[name], call_args, args.repeat)
        t_nb = best_of(_kernels._NUMBA[name], call_args, args.repeat)
        print(f"{name:<16}{1e3 * t_np:>10.3f}{1e3 * t_nb:>10.3f}{t_np / t_nb:>8.1f}x")
    if args.epoch:
        before = _kernels.BACKEND
        try:
            t_np, t_nb = epoch_seconds("numpy"), epoch_seconds("numba")
        finally:
            _kernels.set_backend(before)
        print(f"{'train epoch':<16}{1e3 * t_np:>10.0f}{1e3 * t_nb:>10.0f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
