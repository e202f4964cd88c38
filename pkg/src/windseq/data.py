"""Series ingestion, calendar features, scaling, sliding windows, synthetic farms."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import _kernels
from .graph import FarmLayout, NeighborIndex

HOUR = np.timedelta64(1, "h")
TIME_FEATURE_DIM = 8
SEASONS = ("winter", "spring", "summer", "autumn")


class GapError(ValueError):
    """A run of missing hours is too long to interpolate."""


# --------------------------------------------------------------------------
# tables
# --------------------------------------------------------------------------

@dataclass
class SeriesTable:
    """Aligned hourly wind speed and power, one row per turbine.

    ``segment`` labels contiguous gap-free stretches; it only has more than one
    value when ingestion was allowed to split around long gaps. ``power`` is
    ``None`` in speed-forecast mode, where speed is also the forecast target.
    """

    turbine_ids: tuple[str, ...]
    timestamps: np.ndarray  # datetime64[s], (T,)
    speed: np.ndarray  # (N, T)
    power: np.ndarray | None = None
    segment: np.ndarray | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[s]")
        self.speed = np.asarray(self.speed, dtype=np.float64)
        if self.power is not None:
            self.power = np.asarray(self.power, dtype=np.float64)
            if self.power.shape != self.speed.shape:
                raise ValueError(f"power {self.power.shape} and speed {self.speed.shape} differ")
        if self.speed.shape != (len(self.turbine_ids), self.timestamps.shape[0]):
            raise ValueError(
                f"speed shape {self.speed.shape} does not match "
                f"{len(self.turbine_ids)} turbines x {self.timestamps.shape[0]} hours"
            )
        if self.segment is None:
            self.segment = np.zeros(self.timestamps.shape[0], dtype=np.int64)
        if self.timestamps.size > 1 and not (np.diff(self.timestamps) > np.timedelta64(0, "s")).all():
            raise ValueError("timestamps must be strictly increasing")

    @property
    def n_turbines(self) -> int:
        return len(self.turbine_ids)

    @property
    def n_hours(self) -> int:
        return self.timestamps.shape[0]

    @property
    def target(self) -> np.ndarray:
        return self.speed if self.power is None else self.power

    @property
    def mode(self) -> str:
        return "speed" if self.power is None else "power"

    def take_hours(self, mask_or_slice) -> "SeriesTable":
        ts = self.timestamps[mask_or_slice]
        seg = self.segment[mask_or_slice]
        return SeriesTable(
            self.turbine_ids,
            ts,
            self.speed[:, mask_or_slice],
            None if self.power is None else self.power[:, mask_or_slice],
            seg,
        )

    def split_at(self, when) -> tuple["SeriesTable", "SeriesTable"]:
        """Hours strictly before ``when`` and hours from ``when`` on."""
        cut = int(np.searchsorted(self.timestamps, np.datetime64(when, "s")))
        return self.take_hours(slice(0, cut)), self.take_hours(slice(cut, None))

    def until(self, when) -> "SeriesTable":
        """Hours up to and including ``when``."""
        cut = int(np.searchsorted(self.timestamps, np.datetime64(when, "s"), side="right"))
        return self.take_hours(slice(0, cut))


def parse_timestamp(text: str) -> np.datetime64:
    s = text.strip().replace(" ", "T")
    if s.endswith("Z"):
        s = s[:-1]
    return np.datetime64(s, "s")


def format_timestamp(ts: np.datetime64) -> str:
    return str(np.datetime64(ts, "s"))


def ingest(path, layout: FarmLayout, allow_split: bool = False, max_gap: int = 3,
           until=None) -> SeriesTable:
    """Read ``timestamp,turbine_id,speed[,power]`` rows into a dense table.

    Runs of at most ``max_gap`` missing hours are filled by linear
    interpolation. Longer runs (and missing hours at either end) raise
    :class:`GapError` unless ``allow_split``, in which case those hours are
    dropped and the table is split into segments. Rows stamped after
    ``until`` are discarded before any interpolation.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or ())
        missing = {"timestamp", "turbine_id", "speed"} - cols
        if missing:
            raise ValueError(f"{path}: missing series columns {sorted(missing)}")
        has_power = "power" in cols
        rows = list(reader)
    if until is not None:
        cutoff = np.datetime64(until, "s")
        rows = [r for r in rows if parse_timestamp(r["timestamp"]) <= cutoff]
        if not rows:
            raise ValueError(f"{path}: no rows at or before {format_timestamp(cutoff)}")
    return _densify(rows, layout, has_power, allow_split, max_gap, str(path))


def _densify(rows, layout, has_power, allow_split, max_gap, source) -> SeriesTable:
    n = layout.n
    per: list[list[tuple]] = [[] for _ in range(n)]
    last: dict[int, np.datetime64] = {}
    for lineno, row in enumerate(rows, start=2):
        tid = row["turbine_id"].strip()
        try:
            i = layout.index_of(tid)
        except KeyError:
            raise ValueError(f"{source}:{lineno}: unknown turbine_id {tid!r}") from None
        ts = parse_timestamp(row["timestamp"])
        if ts.astype("int64") % 3600:
            raise ValueError(f"{source}:{lineno}: timestamp {ts} is not on the hour")
        if i in last and ts <= last[i]:
            raise ValueError(
                f"{source}:{lineno}: non-monotone timestamps for {tid}: {ts} after {last[i]}"
            )
        last[i] = ts
        spd = _cell(row.get("speed"))
        pwr = _cell(row.get("power")) if has_power else math.nan
        if spd < 0:
            raise ValueError(f"{source}:{lineno}: negative wind speed {spd} for {tid}")
        per[i].append((ts, spd, pwr))

    absent = [layout.turbine_ids[i] for i in range(n) if not per[i]]
    if absent:
        raise ValueError(f"{source}: no rows for turbines {absent}")

    t0 = min(p[0][0] for p in per)
    t1 = max(p[-1][0] for p in per)
    T = int((t1 - t0) // HOUR) + 1
    stamps = t0 + np.arange(T) * HOUR
    speed = np.full((n, T), np.nan)
    power = np.full((n, T), np.nan)
    for i, recs in enumerate(per):
        idx = np.array([(r[0] - t0) // HOUR for r in recs], dtype=np.int64)
        speed[i, idx] = [r[1] for r in recs]
        power[i, idx] = [r[2] for r in recs]
    if has_power:
        np.clip(power, 0.0, None, out=power)

    bad = np.zeros(T, dtype=bool)
    gaps = []
    arrays = [speed, power] if has_power else [speed]
    for arr in arrays:
        for i in range(n):
            for a, b in _nan_runs(arr[i]):
                interior = a > 0 and b < T
                if interior and b - a <= max_gap:
                    arr[i, a:b] = np.interp(np.arange(a, b), [a - 1, b], [arr[i, a - 1], arr[i, b]])
                else:
                    bad[a:b] = True
                    gaps.append((layout.turbine_ids[i], stamps[a], stamps[b - 1], b - a))
    if gaps and not allow_split:
        tid, s, e, length = gaps[0]
        raise GapError(
            f"{source}: {length}-hour gap for {tid} from {format_timestamp(s)} "
            f"to {format_timestamp(e)} exceeds {max_gap} hours (use allow_split)"
        )
    keep = ~bad
    if not keep.any():
        raise GapError(f"{source}: no usable hours remain after removing gaps")
    starts = np.zeros(T, dtype=np.int64)
    starts[1:] = bad[:-1] & keep[1:]
    segment = np.cumsum(starts)
    table = SeriesTable(
        layout.turbine_ids,
        stamps[keep],
        speed[:, keep],
        power[:, keep] if has_power else None,
        segment[keep] - segment[keep][0],
    )
    return table


def _cell(v) -> float:
    if v is None or not str(v).strip():
        return math.nan
    return float(v)


def _nan_runs(x: np.ndarray) -> list[tuple[int, int]]:
    isnan = np.isnan(x)
    if not isnan.any():
        return []
    edges = np.diff(np.concatenate([[0], isnan.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def write_series_csv(table: SeriesTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["timestamp", "turbine_id", "speed"] + ([] if table.power is None else ["power"])
        w.writerow(head)
        for t, ts in enumerate(table.timestamps):
            stamp = format_timestamp(ts)
            for i, tid in enumerate(table.turbine_ids):
                row = [stamp, tid, repr(float(table.speed[i, t]))]
                if table.power is not None:
                    row.append(repr(float(table.power[i, t])))
                w.writerow(row)


# --------------------------------------------------------------------------
# calendar features
# --------------------------------------------------------------------------

# day-of-year and season columns of the calendar features
ANNUAL_COLUMNS = slice(2, TIME_FEATURE_DIM)


def spans_a_year(table: SeriesTable) -> bool:
    """True when the table covers at least one full annual cycle."""
    if table.n_hours == 0:
        return False
    return bool(table.timestamps[-1] - table.timestamps[0] >= np.timedelta64(365, "D"))


def time_features(timestamps, hemisphere: str = "north") -> np.ndarray:
    """Hour-of-day and day-of-year phases plus a meteorological-season one-hot.

    Columns: hour sin, hour cos, year sin, year cos, winter, spring, summer,
    autumn. Seasons are DJF/MAM/JJA/SON, shifted by two for the southern
    hemisphere. A scalar timestamp gives a vector of 8.
    """
    scalar = np.ndim(timestamps) == 0
    ts = np.atleast_1d(np.asarray(timestamps, dtype="datetime64[s]"))
    secs_in_day = (ts - ts.astype("datetime64[D]")).astype(np.int64)
    hour = secs_in_day / 3600.0
    year_start = ts.astype("datetime64[Y]")
    year_len = ((year_start + np.timedelta64(1, "Y")).astype("datetime64[D]")
                - year_start.astype("datetime64[D]")).astype(np.float64)
    day = (ts - year_start.astype("datetime64[s]")).astype(np.int64) / 86400.0
    month = (ts.astype("datetime64[M]") - year_start.astype("datetime64[M]")).astype(np.int64)
    shift = {"north": 0, "south": 2}[hemisphere]
    season = (((month + 1) % 12) // 3 + shift) % 4

    out = np.zeros((ts.shape[0], TIME_FEATURE_DIM))
    ha = 2.0 * np.pi * hour / 24.0
    ya = 2.0 * np.pi * day / year_len
    out[:, 0] = np.sin(ha)
    out[:, 1] = np.cos(ha)
    out[:, 2] = np.sin(ya)
    out[:, 3] = np.cos(ya)
    out[np.arange(ts.shape[0]), 4 + season] = 1.0
    return out[0] if scalar else out


# --------------------------------------------------------------------------
# scaling
# --------------------------------------------------------------------------

@dataclass
class Normalizer:
    """Per-turbine z-score for speed, per-turbine max scaling for the target."""

    speed_mean: np.ndarray
    speed_std: np.ndarray
    target_scale: np.ndarray

    @classmethod
    def fit(cls, table: SeriesTable) -> "Normalizer":
        mean = table.speed.mean(axis=1)
        std = table.speed.std(axis=1)
        scale = table.target.max(axis=1)
        flat = [table.turbine_ids[i] for i in np.flatnonzero(~(std > 0))]
        if flat:
            raise ValueError(f"constant wind speed series for {flat}; cannot standardise")
        dead = [table.turbine_ids[i] for i in np.flatnonzero(~(scale > 0))]
        if dead:
            raise ValueError(f"target series never positive for {dead}; cannot scale")
        return cls(mean, std, scale)

    def speed(self, x: np.ndarray) -> np.ndarray:
        return (x - self.speed_mean[:, None]) / self.speed_std[:, None]

    def speed_inverse(self, z: np.ndarray) -> np.ndarray:
        return z * self.speed_std[:, None] + self.speed_mean[:, None]

    def target(self, y: np.ndarray) -> np.ndarray:
        return y / self.target_scale[:, None]

    def target_inverse(self, y: np.ndarray) -> np.ndarray:
        return y * self.target_scale[:, None]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("speed_mean", "speed_std", "target_scale")}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(*(np.asarray(d[k], dtype=np.float64)
                     for k in ("speed_mean", "speed_std", "target_scale")))


# --------------------------------------------------------------------------
# windows
# --------------------------------------------------------------------------

@dataclass
class WindowSample:
    turbine_index: int
    input: np.ndarray  # (channels, m)
    y_current: float
    targets: np.ndarray  # (horizon,)
    origin: int = 0


@dataclass
class Batch:
    inputs: np.ndarray  # (m, B, channels)
    y_current: np.ndarray  # (B,)
    targets: np.ndarray  # (B, horizon)
    future_time: np.ndarray  # (horizon, B, 8)
    turbines: np.ndarray  # (B,)
    origins: np.ndarray  # (B,)

    def __len__(self) -> int:
        return self.turbines.shape[0]


@dataclass
class WindowSet:
    """All admissible (turbine, origin) windows of a table, gathered lazily.

    Origins ``t`` satisfy: ``[t-m+1, t+horizon]`` lies inside one segment.
    With ``annual=False`` the day-of-year and season inputs are held at zero.
    With ``require_targets=False`` only the input span must exist and targets
    past the table end come back as NaN (forecasting from the latest hour).
    Ordering is by turbine index, then origin.
    """

    table: SeriesTable
    neighbors: NeighborIndex
    normalizer: Normalizer
    m: int
    horizon: int
    power_history: bool = False
    hemisphere: str = "north"
    require_targets: bool = True
    annual: bool = True
    turbines: np.ndarray = field(init=False)
    origins: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.m < 1 or self.horizon < 1:
            raise ValueError(f"window length m={self.m} and horizon={self.horizon} must be >= 1")
        if len(self.neighbors) != self.table.n_turbines:
            raise ValueError(
                f"neighbour index covers {len(self.neighbors)} turbines, "
                f"table has {self.table.n_turbines}"
            )
        self._z = np.ascontiguousarray(self.normalizer.speed(self.table.speed))
        self._y = np.ascontiguousarray(self.normalizer.target(self.table.target))
        self._tf = time_features(self.table.timestamps, self.hemisphere)
        # calendar features for hours past the table end, so a forecast from
        # the last hour still has future time inputs
        last = self.table.timestamps[-1] if self.table.n_hours else np.datetime64(0, "s")
        ahead = last + (np.arange(1, self.horizon + 1) * HOUR).astype("timedelta64[s]")
        self._tf_ahead = np.concatenate([self._tf, time_features(ahead, self.hemisphere)])
        if not self.annual:
            self._tf[:, ANNUAL_COLUMNS] = 0.0
            self._tf_ahead[:, ANNUAL_COLUMNS] = 0.0
        ahead_needed = self.horizon if self.require_targets else 0
        valid = self.valid_origins(self.m, ahead_needed)
        if valid.size == 0:
            raise ValueError(
                f"series too short: need at least m + horizon = {self.m + ahead_needed} "
                f"contiguous hours, have {self.table.n_hours}"
            )
        n = self.table.n_turbines
        self.turbines = np.repeat(np.arange(n, dtype=np.int64), valid.size)
        self.origins = np.tile(valid, n)

    def valid_origins(self, m: int, horizon: int) -> np.ndarray:
        seg = self.table.segment
        T = seg.shape[0]
        t = np.arange(m - 1, T - horizon, dtype=np.int64)
        if t.size == 0:
            return t
        ok = (seg[t - m + 1] == seg[t]) & (seg[t + horizon] == seg[t])
        return t[ok]

    @property
    def channels(self) -> int:
        return self.neighbors.k + int(self.power_history) + TIME_FEATURE_DIM

    def __len__(self) -> int:
        return self.turbines.shape[0]

    def batch(self, sel=None, origins=None, turbines=None) -> Batch:
        if origins is None:
            sel = np.arange(len(self)) if sel is None else np.asarray(sel)
            turbines = self.turbines[sel]
            origins = self.origins[sel]
        turbines = np.asarray(turbines, dtype=np.int64)
        origins = np.asarray(origins, dtype=np.int64)
        m, tau = self.m, self.horizon
        parts = [_kernels.gather_windows(self._z, self.neighbors.neighbors, turbines, origins, m)]
        steps = origins[None, :] - m + 1 + np.arange(m)[:, None]  # (m, B)
        if self.power_history:
            parts.append(self._y[turbines[None, :], steps][..., None])
        parts.append(self._tf[steps])
        inputs = np.concatenate(parts, axis=2)
        ahead = origins[None, :] + np.arange(1, tau + 1)[:, None]  # (tau, B)
        future_time = self._tf_ahead[ahead]
        T = self.table.n_hours
        targets = np.full((turbines.shape[0], tau), np.nan)
        inside = ahead < T
        if inside.all():
            targets = self._y[turbines[None, :], ahead].T
        else:
            cl = np.minimum(ahead, T - 1)
            targets = np.where(inside, self._y[turbines[None, :], cl], np.nan).T
        return Batch(
            inputs=inputs,
            y_current=self._y[turbines, origins],
            targets=np.ascontiguousarray(targets),
            future_time=future_time,
            turbines=turbines,
            origins=origins,
        )

    def all_targets(self) -> np.ndarray:
        """Normalised targets of every window, (len, horizon)."""
        ahead = self.origins[:, None] + np.arange(1, self.horizon + 1)[None, :]
        return self._y[self.turbines[:, None], ahead]

    def samples(self) -> Iterator[WindowSample]:
        for s in range(len(self)):
            b = self.batch([s])
            yield WindowSample(
                turbine_index=int(b.turbines[0]),
                input=b.inputs[:, 0, :].T.copy(),
                y_current=float(b.y_current[0]),
                targets=b.targets[0].copy(),
                origin=int(b.origins[0]),
            )


def make_windows(table, neighbors, normalizer, m, horizon, **kw) -> WindowSet:
    """Sliding windows of length ``m`` with ``horizon`` targets for every turbine."""
    return WindowSet(table, neighbors, normalizer, m, horizon, **kw)


# --------------------------------------------------------------------------
# synthetic farm
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PowerCurve:
    midpoint: float  # m/s at half rated power
    width: float  # logistic scale, m/s
    rated: float  # kW

    def __call__(self, v: np.ndarray) -> np.ndarray:
        s = _kernels.sigmoid((np.asarray(v, dtype=np.float64) - self.midpoint) / self.width)
        s0 = 1.0 / (1.0 + math.exp(self.midpoint / self.width))
        return self.rated * np.clip((s - s0) / (1.0 - s0), 0.0, 1.0)


def synth_farm(
    n_turbines: int,
    days: int,
    seed: int,
    spatial_corr_length: float = 800.0,
    noise_level: float = 0.8,
    *,
    ar_coef: float = 0.9,
    mean_speed: float = 8.0,
    regional_std: float = 1.0,
    local_std: float = 2.0,
    diurnal_amp: float = 3.0,
    seasonal_amp: float = 1.5,
    spacing: float = 500.0,
    start: str = "2021-01-01T00:00:00",
    coords: np.ndarray | None = None,
    curves: list[PowerCurve] | None = None,
) -> tuple[FarmLayout, SeriesTable]:
    """Deterministic synthetic farm.

    Speed = mean + regional AR(1) + diurnal and seasonal sinusoids + a local
    AR(1) field whose cross-turbine correlation is ``exp(-d / L)`` + white
    noise of std ``noise_level``. Power runs each speed through a per-turbine
    logistic power curve.
    """
    if n_turbines < 1:
        raise ValueError(f"n_turbines must be >= 1, got {n_turbines}")
    if days < 2:
        raise ValueError(f"days must be >= 2, got {days}")
    if not spatial_corr_length > 0:
        raise ValueError("spatial_corr_length must be positive")
    if noise_level < 0:
        raise ValueError("noise_level must be >= 0")
    if not -1.0 < ar_coef < 1.0:
        raise ValueError("ar_coef must lie in (-1, 1)")
    rng = np.random.default_rng(seed)
    n, T = int(n_turbines), int(days) * 24

    if coords is None:
        side = math.ceil(math.sqrt(n))
        grid = np.array([(i % side, i // side) for i in range(n)], dtype=np.float64)
        coords = (grid + rng.uniform(-0.2, 0.2, size=(n, 2))) * spacing
    else:
        coords = np.asarray(coords, dtype=np.float64).reshape(n, 2)
        rng.uniform(size=(n, 2))  # keep the stream aligned with the default path
    width = len(str(n - 1))
    layout = FarmLayout(tuple(f"T{i:0{width}d}" for i in range(n)), coords)

    phi = ar_coef
    innov = math.sqrt(1.0 - phi * phi)
    regional = _ar1(rng.standard_normal(T), phi) * regional_std

    if math.isinf(spatial_corr_length):
        factor = np.ones((n, 1))
    else:
        d = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
        w, v = np.linalg.eigh(np.exp(-d / spatial_corr_length))
        factor = v * np.sqrt(np.clip(w, 0.0, None))
    shocks = factor @ rng.standard_normal((factor.shape[1], T))
    local = np.empty((n, T))
    local[:, 0] = shocks[:, 0]
    for t in range(1, T):
        local[:, t] = phi * local[:, t - 1] + innov * shocks[:, t]
    local *= local_std

    stamps = np.datetime64(start, "s") + (np.arange(T) * HOUR).astype("timedelta64[s]")
    tf = time_features(stamps)
    # diurnal peak mid-afternoon, seasonal peak early January
    hour_angle = np.arctan2(tf[:, 0], tf[:, 1])
    diurnal = diurnal_amp * np.cos(hour_angle - 2.0 * np.pi * 15.0 / 24.0)
    seasonal = seasonal_amp * tf[:, 3]
    noise = noise_level * rng.standard_normal((n, T))
    speed = np.clip(mean_speed + regional + diurnal + seasonal + local + noise, 0.0, None)

    if curves is None:
        curves = [
            PowerCurve(float(rng.uniform(7.5, 10.5)), float(rng.uniform(0.9, 1.6)),
                       float(rng.uniform(1500.0, 3000.0)))
            for _ in range(n)
        ]
    elif len(curves) != n:
        raise ValueError(f"{len(curves)} power curves for {n} turbines")
    power = np.stack([curves[i](speed[i]) for i in range(n)])
    return layout, SeriesTable(layout.turbine_ids, stamps, speed, power)


def _ar1(shocks: np.ndarray, phi: float) -> np.ndarray:
    """Unit-variance stationary AR(1) driven by ``shocks``."""
    out = np.empty_like(shocks)
    out[0] = shocks[0]
    innov = math.sqrt(1.0 - phi * phi)
    for t in range(1, shocks.shape[0]):
        out[t] = phi * out[t - 1] + innov * shocks[t]
    return out
