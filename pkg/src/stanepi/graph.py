"""Attributed location graph: nodes, gravity-style edge weights, windows.

Edge weights follow ``p_i^alpha * p_j^beta * exp(-d_ij / r)`` with great-circle
distances; the adjacency mask keeps pairs at or above a threshold ``tau`` plus
forced self-loops.  Node feature vectors concatenate a sliding window of
per-day static and dynamic features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EARTH_RADIUS_KM = 6371.0
STATIC_FEATURE_COUNT = 4  # latitude, longitude, population, density


class ValidationError(ValueError):
    """Input data violates a documented precondition."""


class ConfigError(ValueError):
    """A hyperparameter is outside its legal range."""


@dataclass(frozen=True)
class Location:
    """One spatial unit (county, state, ...) with its static attributes."""

    id: str
    name: str
    latitude: float
    longitude: float
    population: float
    density: float

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValidationError(f"location {self.id!r}: latitude {self.latitude} out of range")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValidationError(f"location {self.id!r}: longitude {self.longitude} out of range")
        if self.population < 1:
            raise ValidationError(f"location {self.id!r}: population must be >= 1")
        if self.density < 0:
            raise ValidationError(f"location {self.id!r}: density must be >= 0")

    @property
    def static_features(self) -> np.ndarray:
        return np.array(
            [self.latitude, self.longitude, self.population, self.density],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class LocationGraph:
    """Immutable weighted location graph with an adjacency mask."""

    locations: tuple[Location, ...]
    weights: np.ndarray  # N x N, symmetric, nonnegative
    mask: np.ndarray  # N x N bool; diagonal always True
    tau: float
    alpha: float
    beta: float
    r: float
    index: dict[str, int] = field(repr=False, default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.locations)

    def static_matrix(self) -> np.ndarray:
        return np.stack([loc.static_features for loc in self.locations])


def haversine_distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in km between (lat, lon) points in degrees."""
    lat1, lon1 = a
    lat2, lon2 = b
    for lat, lon in ((lat1, lon1), (lat2, lon2)):
        if not -90.0 <= lat <= 90.0 or not -180.0 <= lon <= 180.0:
            raise ValidationError(f"coordinates ({lat}, {lon}) out of range")
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    h = math.sin(dp / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def edge_weight(p_i: float, p_j: float, d_ij: float, alpha: float, beta: float, r: float) -> float:
    """Gravity-style weight p_i^alpha * p_j^beta * exp(-d_ij / r).

    The proportionality constant is fixed at 1: it is absorbed by the mask
    threshold and by attention normalization downstream.
    """
    if r <= 0:
        raise ConfigError(f"distance scale r must be positive, got {r}")
    if p_i < 1 or p_j < 1:
        raise ValidationError("populations must be >= 1")
    if d_ij < 0:
        raise ValidationError("distance must be >= 0")
    return p_i**alpha * p_j**beta * math.exp(-d_ij / r)


def _connected(mask: np.ndarray) -> bool:
    # union-find over the undirected unmasked pairs
    n = mask.shape[0]
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i in range(n):
        for j in range(i + 1, n):
            if mask[i, j]:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[ri] = rj
    root = find(0)
    return all(find(i) == root for i in range(n))


def connectivity_threshold(weights: np.ndarray) -> float:
    """Largest mask threshold that keeps the graph connected.

    Binary search over the sorted distinct off-diagonal weights; this is the
    bottleneck weight of the maximum spanning tree.  A single-node graph
    returns 0.
    """
    n = weights.shape[0]
    if n <= 1:
        return 0.0
    off = weights[~np.eye(n, dtype=bool)]
    candidates = np.unique(off)
    lo, hi = 0, len(candidates) - 1
    best = float(candidates[0])
    while lo <= hi:
        mid = (lo + hi) // 2
        tau = float(candidates[mid])
        if _connected(weights >= tau):
            best = tau
            lo = mid + 1
        else:
            hi = mid - 1
    return best


def build_graph(
    locations,
    alpha: float = 0.35,
    beta: float = 0.37,
    r: float = 30.0,
    tau: float | None = None,
    distances: dict[tuple[str, str], float] | None = None,
) -> LocationGraph:
    """Assemble the weighted location graph.

    ``tau=None`` selects the connectivity threshold automatically; ``tau=0``
    keeps every pair (the dense reading).  ``distances`` optionally overrides
    the haversine distances with precomputed km per unordered id pair.
    """
    locations = tuple(locations)
    if not locations:
        raise ValidationError("at least one location required")
    ids = [loc.id for loc in locations]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"duplicate location ids: {dup}")
    n = len(locations)
    weights = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i, n):
            a, b = locations[i], locations[j]
            if i == j:
                d = 0.0
            elif distances is not None:
                d = _lookup_distance(distances, a.id, b.id)
            else:
                d = haversine_distance((a.latitude, a.longitude), (b.latitude, b.longitude))
            w = edge_weight(a.population, b.population, d, alpha, beta, r)
            weights[i, j] = w
            weights[j, i] = w
    if tau is None:
        tau = connectivity_threshold(weights)
    mask = weights >= tau
    np.fill_diagonal(mask, True)
    index = {loc.id: i for i, loc in enumerate(locations)}
    return LocationGraph(
        locations=locations, weights=weights, mask=mask,
        tau=float(tau), alpha=alpha, beta=beta, r=r, index=index,
    )


def _lookup_distance(distances, id_a: str, id_b: str) -> float:
    if (id_a, id_b) in distances:
        return distances[(id_a, id_b)]
    if (id_b, id_a) in distances:
        return distances[(id_b, id_a)]
    raise ValidationError(f"distance override missing pair ({id_a!r}, {id_b!r})")


def load_distance_csv(path) -> dict[tuple[str, str], float]:
    """Read a `from_id,to_id,km` CSV into a distance override map."""
    import csv

    out: dict[tuple[str, str], float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"from_id", "to_id", "km"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValidationError(f"distance CSV must have header from_id,to_id,km, got {reader.fieldnames}")
        for row in reader:
            key = (row["from_id"], row["to_id"])
            km = float(row["km"])
            if km < 0:
                raise ValidationError(f"negative distance for pair {key}")
            rev = (key[1], key[0])
            for k in (key, rev):
                if k in out and out[k] != km:
                    raise ValidationError(f"conflicting distances for pair {key}")
            out[key] = km
    return out


def feature_window(dataset, node: int, t: int, window: int) -> np.ndarray:
    """Concatenated per-day [static; dynamic] features for days t-window+1..t.

    Days before the start of the series contribute zeros for the dynamic
    block and the location's true static features.  Result length is
    window * (4 + F_D).
    """
    n, total_days, f_dyn = dataset.dynamic.shape
    if not 0 <= node < n:
        raise ValidationError(f"node index {node} out of range for {n} locations")
    if window < 1:
        raise ValidationError(f"window length must be >= 1, got {window}")
    if not 0 <= t < total_days:
        raise ValidationError(f"day index {t} outside series of length {total_days}")
    static = dataset.locations[node].static_features
    blocks = []
    for day in range(t - window + 1, t + 1):
        dyn = dataset.dynamic[node, day] if day >= 0 else np.zeros(f_dyn)
        blocks.append(static)
        blocks.append(dyn)
    return np.concatenate(blocks)


def day_feature_matrix(dataset, t: int, window: int) -> np.ndarray:
    """Stack feature_window over all nodes into the day-t input matrix."""
    return np.stack(
        [feature_window(dataset, i, t, window) for i in range(dataset.dynamic.shape[0])]
    )
