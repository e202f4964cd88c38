"""Hot numeric kernels with a numba and a pure-numpy implementation.

The numba path is used when numba imports cleanly and the environment flag
``WINDSEQ_NO_NUMBA`` is unset (or ``0``). Both paths compute the same
quantities; they may differ in the last ulp because ``exp``/``tanh`` come
from different libm builds.

Call :func:`set_backend` to switch at runtime (the benchmark does this).
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_ENV_FLAG = "WINDSEQ_NO_NUMBA"


def _env_disables_numba() -> bool:
    return os.environ.get(_ENV_FLAG, "0").strip().lower() not in ("", "0", "false", "no")


# --------------------------------------------------------------------------
# pure numpy
# --------------------------------------------------------------------------

def _np_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _np_gru_gates(xz, xr, hz, hr, bz, br, h):
    z = _np_sigmoid(xz + hz + bz)
    r = _np_sigmoid(xr + hr + br)
    return z, r, r * h


def _np_gru_blend(xc, rc, bc, z, h):
    c = np.tanh(xc + rc + bc)
    return c, h + z * (c - h)


def _np_gru_back_blend(g, z, c, h):
    daz = g * (c - h) * z * (1.0 - z)
    dac = g * z * (1.0 - c * c)
    dh = g * (1.0 - z)
    return daz, dac, dh


def _np_gru_back_reset(drh, r, h, dh):
    dar = drh * h * r * (1.0 - r)
    return dar, dh + drh * r


def _np_gather_windows(speed, nbrs, turbines, origins, m, out):
    # out: (m, B, k) filled with speed[nbrs[turbine], origin-m+1 .. origin]
    for b in range(turbines.shape[0]):
        rows = nbrs[turbines[b]]
        t0 = origins[b] - m + 1
        out[:, b, :] = speed[rows, t0:origins[b] + 1].T
    return out


def _np_horizon_errors(pred, actual, scale):
    err = (pred - actual) * scale[:, None]
    return np.abs(err).sum(axis=0), (err * err).sum(axis=0)


def _np_acf(x, max_lag):
    d = x - x.mean()
    denom = np.dot(d, d)
    n = d.shape[0]
    out = np.empty(max_lag + 1)
    for lag in range(max_lag + 1):
        out[lag] = np.dot(d[: n - lag], d[lag:]) / denom
    return out


# --------------------------------------------------------------------------
# numba
# --------------------------------------------------------------------------

if numba is not None:
    _jit = numba.njit(cache=True, nogil=True)

    @_jit
    def _nb_sig(v):
        if v >= 0.0:
            return 1.0 / (1.0 + np.exp(-v))
        e = np.exp(v)
        return e / (1.0 + e)

    @_jit
    def _nb_sigmoid(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        for i in range(flat.shape[0]):
            out[i] = _nb_sig(flat[i])
        return out.reshape(x.shape)

    @_jit
    def _nb_gru_gates(xz, xr, hz, hr, bz, br, h):
        B, H = h.shape
        z = np.empty((B, H))
        r = np.empty((B, H))
        rh = np.empty((B, H))
        for b in range(B):
            for j in range(H):
                zz = _nb_sig(xz[b, j] + hz[b, j] + bz[j])
                rr = _nb_sig(xr[b, j] + hr[b, j] + br[j])
                z[b, j] = zz
                r[b, j] = rr
                rh[b, j] = rr * h[b, j]
        return z, r, rh

    @_jit
    def _nb_gru_blend(xc, rc, bc, z, h):
        B, H = h.shape
        c = np.empty((B, H))
        hn = np.empty((B, H))
        for b in range(B):
            for j in range(H):
                cc = np.tanh(xc[b, j] + rc[b, j] + bc[j])
                c[b, j] = cc
                hn[b, j] = h[b, j] + z[b, j] * (cc - h[b, j])
        return c, hn

    @_jit
    def _nb_gru_back_blend(g, z, c, h):
        B, H = h.shape
        daz = np.empty((B, H))
        dac = np.empty((B, H))
        dh = np.empty((B, H))
        for b in range(B):
            for j in range(H):
                gg = g[b, j]
                zz = z[b, j]
                cc = c[b, j]
                daz[b, j] = gg * (cc - h[b, j]) * zz * (1.0 - zz)
                dac[b, j] = gg * zz * (1.0 - cc * cc)
                dh[b, j] = gg * (1.0 - zz)
        return daz, dac, dh

    @_jit
    def _nb_gru_back_reset(drh, r, h, dh):
        B, H = h.shape
        dar = np.empty((B, H))
        dh2 = np.empty((B, H))
        for b in range(B):
            for j in range(H):
                rr = r[b, j]
                dar[b, j] = drh[b, j] * h[b, j] * rr * (1.0 - rr)
                dh2[b, j] = dh[b, j] + drh[b, j] * rr
        return dar, dh2

    @_jit
    def _nb_gather_windows(speed, nbrs, turbines, origins, m, out):
        k = nbrs.shape[1]
        for b in range(turbines.shape[0]):
            t0 = origins[b] - m + 1
            for c in range(k):
                row = nbrs[turbines[b], c]
                for j in range(m):
                    out[j, b, c] = speed[row, t0 + j]
        return out

    @_jit
    def _nb_horizon_errors(pred, actual, scale):
        S, H = pred.shape
        abs_sum = np.zeros(H)
        sq_sum = np.zeros(H)
        for s in range(S):
            for h in range(H):
                e = (pred[s, h] - actual[s, h]) * scale[s]
                abs_sum[h] += abs(e)
                sq_sum[h] += e * e
        return abs_sum, sq_sum

    @_jit
    def _nb_acf(x, max_lag):
        n = x.shape[0]
        mean = 0.0
        for i in range(n):
            mean += x[i]
        mean /= n
        d = x - mean
        denom = 0.0
        for i in range(n):
            denom += d[i] * d[i]
        out = np.empty(max_lag + 1)
        for lag in range(max_lag + 1):
            acc = 0.0
            for i in range(n - lag):
                acc += d[i] * d[i + lag]
            out[lag] = acc / denom
        return out


_NUMPY = {
    "sigmoid": _np_sigmoid,
    "gru_gates": _np_gru_gates,
    "gru_blend": _np_gru_blend,
    "gru_back_blend": _np_gru_back_blend,
    "gru_back_reset": _np_gru_back_reset,
    "gather_windows": _np_gather_windows,
    "horizon_errors": _np_horizon_errors,
    "acf": _np_acf,
}

_NUMBA = None if numba is None else {
    "sigmoid": _nb_sigmoid,
    "gru_gates": _nb_gru_gates,
    "gru_blend": _nb_gru_blend,
    "gru_back_blend": _nb_gru_back_blend,
    "gru_back_reset": _nb_gru_back_reset,
    "gather_windows": _nb_gather_windows,
    "horizon_errors": _nb_horizon_errors,
    "acf": _nb_acf,
}

_active: dict = {}
BACKEND = "numpy"


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` kernels for the whole process."""
    global BACKEND
    if name == "numba":
        if _NUMBA is None:
            raise RuntimeError("numba backend requested but numba is not importable")
        table = _NUMBA
    elif name == "numpy":
        table = _NUMPY
    else:
        raise ValueError(f"unknown backend {name!r}; expected 'numba' or 'numpy'")
    _active.clear()
    _active.update(table)
    BACKEND = name


def default_backend() -> str:
    if _NUMBA is None or _env_disables_numba():
        return "numpy"
    return "numba"


set_backend(default_backend())


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function."""
    return _active["sigmoid"](np.ascontiguousarray(x, dtype=np.float64))


def gru_gates(xz, xr, hz, hr, bz, br, h):
    """Update gate, reset gate and reset-scaled state ``r*h``."""
    return _active["gru_gates"](xz, xr, hz, hr, bz, br, h)


def gru_blend(xc, rc, bc, z, h):
    """Candidate state and the blended next state ``h + z*(c - h)``."""
    return _active["gru_blend"](xc, rc, bc, z, h)


def gru_back_blend(g, z, c, h):
    return _active["gru_back_blend"](g, z, c, h)


def gru_back_reset(drh, r, h, dh):
    return _active["gru_back_reset"](drh, r, h, dh)


def gather_windows(speed, nbrs, turbines, origins, m):
    """Stack neighbour speed windows into an ``(m, B, k)`` array."""
    out = np.empty((m, turbines.shape[0], nbrs.shape[1]))
    return _active["gather_windows"](speed, nbrs, turbines, origins, m, out)


def horizon_errors(pred, actual, scale):
    """Per-horizon sums of absolute and squared scaled errors."""
    return _active["horizon_errors"](
        np.ascontiguousarray(pred, dtype=np.float64),
        np.ascontiguousarray(actual, dtype=np.float64),
        np.ascontiguousarray(scale, dtype=np.float64),
    )


def acf(x, max_lag):
    return _active["acf"](np.ascontiguousarray(x, dtype=np.float64), int(max_lag))
