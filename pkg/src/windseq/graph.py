"""Turbine layout and k-nearest-neighbour channel sets."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_M = 6_371_008.8


@dataclass(frozen=True)
class FarmLayout:
    """Turbine identifiers and planar coordinates (metres or any consistent unit)."""

    turbine_ids: tuple[str, ...]
    coords: np.ndarray  # (N, 2): easting, northing

    def __post_init__(self):
        ids = tuple(str(t) for t in self.turbine_ids)
        coords = np.array(self.coords, dtype=np.float64).reshape(-1, 2)
        if not ids:
            raise ValueError("layout needs at least one turbine")
        if len(set(ids)) != len(ids):
            dup = sorted({t for t in ids if ids.count(t) > 1})
            raise ValueError(f"duplicate turbine ids: {dup}")
        if coords.shape[0] != len(ids):
            raise ValueError(f"{len(ids)} turbine ids but {coords.shape[0]} coordinate rows")
        if not np.isfinite(coords).all():
            raise ValueError("turbine coordinates must be finite")
        coords.flags.writeable = False
        object.__setattr__(self, "turbine_ids", ids)
        object.__setattr__(self, "coords", coords)

    @property
    def n(self) -> int:
        return len(self.turbine_ids)

    def index_of(self, turbine_id: str) -> int:
        try:
            return self.turbine_ids.index(turbine_id)
        except ValueError:
            raise KeyError(f"unknown turbine_id {turbine_id!r}") from None

    def digest(self) -> str:
        h = hashlib.sha256()
        for tid, (x, y) in zip(self.turbine_ids, self.coords):
            h.update(f"{tid},{x!r},{y!r}\n".encode())
        return h.hexdigest()[:16]

    @classmethod
    def from_latlon(cls, turbine_ids, lat, lon) -> "FarmLayout":
        """Project latitude/longitude (degrees) onto a local equirectangular plane."""
        lat = np.radians(np.asarray(lat, dtype=np.float64))
        lon = np.radians(np.asarray(lon, dtype=np.float64))
        lat0 = lat.mean()
        x = EARTH_RADIUS_M * (lon - lon.mean()) * math.cos(lat0)
        y = EARTH_RADIUS_M * (lat - lat0)
        return cls(tuple(turbine_ids), np.column_stack([x, y]))


def read_layout_csv(path, latlon: bool = False) -> FarmLayout:
    """Read ``turbine_id,x,y`` rows. With ``latlon`` x is longitude and y latitude."""
    ids, xs, ys = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"turbine_id", "x", "y"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing layout columns {sorted(missing)}")
        for row in reader:
            ids.append(row["turbine_id"].strip())
            xs.append(float(row["x"]))
            ys.append(float(row["y"]))
    if latlon:
        return FarmLayout.from_latlon(ids, lat=ys, lon=xs)
    return FarmLayout(tuple(ids), np.column_stack([xs, ys]) if ids else np.zeros((0, 2)))


def write_layout_csv(layout: FarmLayout, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["turbine_id", "x", "y"])
        for tid, (x, y) in zip(layout.turbine_ids, layout.coords):
            w.writerow([tid, repr(float(x)), repr(float(y))])


@dataclass(frozen=True)
class NeighborIndex:
    """Per-turbine neighbour lists, self first, then by distance then index."""

    k: int
    neighbors: np.ndarray  # (N, k) int64
    distances: np.ndarray  # (N, k)

    def __post_init__(self):
        self.neighbors.flags.writeable = False
        self.distances.flags.writeable = False

    def __getitem__(self, i: int) -> list[int]:
        return [int(j) for j in self.neighbors[i]]

    def __len__(self) -> int:
        return self.neighbors.shape[0]

    def digest(self) -> str:
        h = hashlib.sha256(f"k={self.k};".encode())
        h.update(np.ascontiguousarray(self.neighbors, dtype="<i8").tobytes())
        return h.hexdigest()[:16]


def build_knn(layout: FarmLayout, k: int) -> NeighborIndex:
    """k nearest turbines by Euclidean distance, the turbine itself always first.

    The remaining k-1 slots are filled by ascending distance; equal distances
    (including duplicate coordinates) go to the lower turbine index.
    """
    n = layout.n
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ValueError(f"k must be a positive integer, got {k!r}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of turbines ({n})")
    xy = layout.coords
    dx = xy[:, None, 0] - xy[None, :, 0]
    dy = xy[:, None, 1] - xy[None, :, 1]
    d2 = dx * dx + dy * dy
    # self goes first regardless of coincident neighbours
    d2[np.arange(n), np.arange(n)] = -1.0
    cols = np.broadcast_to(np.arange(n), (n, n))
    order = np.lexsort((cols, d2), axis=-1)[:, :k]
    dist = np.sqrt(np.take_along_axis(np.maximum(d2, 0.0), order, axis=1))
    return NeighborIndex(int(k), order.astype(np.int64), dist)


def write_neighbors_csv(layout: FarmLayout, index: NeighborIndex, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["turbine_id", "rank", "neighbor_id", "distance"])
        for i, tid in enumerate(layout.turbine_ids):
            for rank, (j, d) in enumerate(zip(index.neighbors[i], index.distances[i])):
                w.writerow([tid, rank, layout.turbine_ids[j], repr(float(d))])
