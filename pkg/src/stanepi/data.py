"""Case-count dataset ingestion and a synthetic metapopulation generator.

All files are UTF-8 comma-separated CSV with `.` decimal separators:

* cases:   ``date,location_id,confirmed,recovered,deaths[,active]``
* static:  ``location_id,name,latitude,longitude,population,density``
* dynamic: ``date,location_id,hospitalizations,icu,code_01,...,code_48``

The in-memory dynamic feature schema is fixed at 52 columns: active cases,
total (cumulative) cases, hospitalizations, ICU stays, then the 48 diagnosis
code counts.
"""

from __future__ import annotations

import csv
import datetime as _dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import Location, ValidationError

CODE_COLUMNS = [f"code_{k:02d}" for k in range(1, 49)]
DYNAMIC_FEATURE_COUNT = 4 + len(CODE_COLUMNS)  # 52


class ReferentialError(ValidationError):
    """A file references a location id that is not in the static table."""


@dataclass
class EpiDataset:
    """Per-location daily series of epidemic counts plus dynamic features."""

    locations: list[Location]
    dates: list[str]
    infected: np.ndarray  # N x T active cases
    recovered: np.ndarray  # N x T cumulative recovered
    dynamic: np.ndarray  # N x T x F_D, column 0 == infected
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n, t = self.infected.shape
        if self.recovered.shape != (n, t):
            raise ValidationError("infected and recovered matrices must share shape")
        if self.dynamic.shape[:2] != (n, t):
            raise ValidationError("dynamic tensor must be N x T x F_D")
        if len(self.locations) != n or len(self.dates) != t:
            raise ValidationError("axis labels do not match matrix extents")
        if (self.infected < 0).any() or (self.recovered < 0).any():
            raise ValidationError("counts must be nonnegative")
        if not np.array_equal(self.dynamic[:, :, 0], self.infected):
            raise ValidationError("dynamic column 0 must equal active cases")

    @property
    def n_locations(self) -> int:
        return self.infected.shape[0]

    @property
    def n_days(self) -> int:
        return self.infected.shape[1]

    @property
    def location_ids(self) -> list[str]:
        return [loc.id for loc in self.locations]


def _date_axis(first: str, count: int) -> list[str]:
    start = _dt.date.fromisoformat(first)
    return [(start + _dt.timedelta(days=k)).isoformat() for k in range(count)]


def load_static_csv(path) -> list[Location]:
    locations = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        needed = {"location_id", "name", "latitude", "longitude", "population", "density"}
        if reader.fieldnames is None or not needed.issubset(reader.fieldnames):
            raise ValidationError(f"static CSV header must contain {sorted(needed)}")
        for row in reader:
            locations.append(
                Location(
                    id=row["location_id"],
                    name=row["name"],
                    latitude=float(row["latitude"]),
                    longitude=float(row["longitude"]),
                    population=float(row["population"]),
                    density=float(row["density"]),
                )
            )
    if not locations:
        raise ValidationError(f"static CSV {path} contains no locations")
    return locations


def load_dataset(
    cases_path,
    static_path,
    dynamic_path=None,
    recovered_lag: int = 14,
) -> EpiDataset:
    """Read the CSV triple into an EpiDataset.

    Active cases come from the ``active`` column when present, otherwise
    ``confirmed - recovered - deaths`` floored at 0.  Days before a
    location's first record are zero-filled.  An all-zero recovered column
    triggers the lagged-confirmed proxy (flagged in ``meta``).
    """
    locations = load_static_csv(static_path)
    index = {loc.id: i for i, loc in enumerate(locations)}
    n = len(locations)

    rows = []
    with open(cases_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        needed = {"date", "location_id", "confirmed", "recovered", "deaths"}
        if reader.fieldnames is None or not needed.issubset(reader.fieldnames):
            raise ValidationError(f"cases CSV header must contain {sorted(needed)}")
        has_active = "active" in reader.fieldnames
        for lineno, row in enumerate(reader, start=2):
            if row["location_id"] not in index:
                raise ReferentialError(
                    f"{cases_path}:{lineno}: unknown location id {row['location_id']!r}"
                )
            rows.append((lineno, row))
    if not rows:
        raise ValidationError(f"cases CSV {cases_path} contains no rows")

    dates = sorted({row["date"] for _, row in rows})
    axis = _date_axis(dates[0], (_dt.date.fromisoformat(dates[-1]) - _dt.date.fromisoformat(dates[0])).days + 1)
    day_of = {d: k for k, d in enumerate(axis)}
    t = len(axis)

    confirmed = np.zeros((n, t))
    recovered = np.zeros((n, t))
    deaths = np.zeros((n, t))
    active = np.full((n, t), np.nan)
    seen = np.zeros((n, t), dtype=bool)
    bad_rows = []
    for lineno, row in rows:
        i = index[row["location_id"]]
        if row["date"] not in day_of:
            raise ValidationError(f"{cases_path}:{lineno}: date {row['date']} off the daily axis")
        k = day_of[row["date"]]
        c, r, d = float(row["confirmed"]), float(row["recovered"]), float(row["deaths"])
        if min(c, r, d) < 0:
            bad_rows.append(lineno)
            continue
        confirmed[i, k], recovered[i, k], deaths[i, k] = c, r, d
        if has_active and row.get("active", "") != "":
            a = float(row["active"])
            if a < 0:
                bad_rows.append(lineno)
                continue
            active[i, k] = a
        seen[i, k] = True
    if bad_rows:
        raise ValidationError(f"{cases_path}: negative counts on rows {bad_rows}")

    # Zero-fill before each location's first record; gaps afterwards are errors.
    for i in range(n):
        recorded = np.flatnonzero(seen[i])
        if recorded.size == 0:
            continue
        first = recorded[0]
        missing = np.flatnonzero(~seen[i, first:]) + first
        if missing.size:
            raise ValidationError(
                f"location {locations[i].id!r} missing days after first record: "
                f"{[axis[k] for k in missing[:5]]}"
            )

    infected = np.where(np.isnan(active), np.maximum(confirmed - recovered - deaths, 0.0), active)

    meta = {"recovered_proxy": False}
    if not recovered.any():
        # lagged-confirmed proxy: R_t = confirmed_{t-lag} * (1 - case fatality)
        total_conf = confirmed[:, -1].sum()
        cfr = deaths[:, -1].sum() / total_conf if total_conf > 0 else 0.0
        lagged = np.zeros_like(confirmed)
        if recovered_lag < t:
            lagged[:, recovered_lag:] = confirmed[:, : t - recovered_lag]
        recovered = lagged * (1.0 - cfr)
        meta = {"recovered_proxy": True, "recovered_lag": recovered_lag, "cfr": cfr}

    dynamic = np.zeros((n, t, DYNAMIC_FEATURE_COUNT))
    dynamic[:, :, 0] = infected
    dynamic[:, :, 1] = confirmed
    if dynamic_path is not None:
        with open(dynamic_path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            needed = {"date", "location_id", "hospitalizations", "icu", *CODE_COLUMNS}
            if reader.fieldnames is None or not needed.issubset(reader.fieldnames):
                raise ValidationError(
                    "dynamic CSV header must contain date,location_id,hospitalizations,icu,code_01..code_48"
                )
            for lineno, row in enumerate(reader, start=2):
                if row["location_id"] not in index:
                    raise ReferentialError(
                        f"{dynamic_path}:{lineno}: unknown location id {row['location_id']!r}"
                    )
                if row["date"] not in day_of:
                    continue
                i, k = index[row["location_id"]], day_of[row["date"]]
                dynamic[i, k, 2] = float(row["hospitalizations"])
                dynamic[i, k, 3] = float(row["icu"])
                for c, col in enumerate(CODE_COLUMNS):
                    dynamic[i, k, 4 + c] = float(row[col])
        if (dynamic[:, :, 2:] < 0).any():
            raise ValidationError(f"{dynamic_path}: negative feature values")

    return EpiDataset(
        locations=locations, dates=axis, infected=infected,
        recovered=recovered, dynamic=dynamic, meta=meta,
    )


def save_dataset(dataset: EpiDataset, out_dir) -> dict[str, Path]:
    """Write cases/static/dynamic CSVs; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "cases": out / "cases.csv",
        "static": out / "static.csv",
        "dynamic": out / "dynamic.csv",
    }
    with open(paths["static"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["location_id", "name", "latitude", "longitude", "population", "density"])
        for loc in dataset.locations:
            w.writerow([loc.id, loc.name, repr(loc.latitude), repr(loc.longitude),
                        repr(loc.population), repr(loc.density)])
    with open(paths["cases"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "location_id", "confirmed", "recovered", "deaths", "active"])
        for k, date in enumerate(dataset.dates):
            for i, loc in enumerate(dataset.locations):
                confirmed = dataset.dynamic[i, k, 1]
                w.writerow([date, loc.id, repr(confirmed), repr(dataset.recovered[i, k]),
                            repr(0.0), repr(dataset.infected[i, k])])
    with open(paths["dynamic"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "location_id", "hospitalizations", "icu", *CODE_COLUMNS])
        for k, date in enumerate(dataset.dates):
            for i, loc in enumerate(dataset.locations):
                row = [date, loc.id]
                row.extend(repr(v) for v in dataset.dynamic[i, k, 2:])
                w.writerow(row)
    return paths


def split_dataset(dataset: EpiDataset, split_day: int) -> tuple[EpiDataset, EpiDataset]:
    """Split along the time axis: train = days [0, split), test = [split, T)."""
    t = dataset.n_days
    if not 0 < split_day < t:
        raise ValidationError(f"split day {split_day} outside (0, {t})")

    def piece(sl):
        return EpiDataset(
            locations=dataset.locations,
            dates=dataset.dates[sl],
            infected=dataset.infected[:, sl].copy(),
            recovered=dataset.recovered[:, sl].copy(),
            dynamic=dataset.dynamic[:, sl].copy(),
            meta=dict(dataset.meta),
        )

    return piece(slice(0, split_day)), piece(slice(split_day, t))


# ---------------------------------------------------------------------------
# synthetic metapopulation generator


@dataclass
class SynthConfig:
    """Knobs for the coupled-SIR synthetic dataset."""

    n_nodes: int = 10
    n_days: int = 120
    beta_range: tuple[float, float] = (0.15, 0.35)
    gamma_range: tuple[float, float] = (0.05, 0.12)
    coupling: float = 0.002
    noise: float = 0.02
    seed: int = 0
    population_range: tuple[float, float] = (2_000.0, 20_000.0)
    start_date: str = "2020-03-22"

    def __post_init__(self):
        for lo, hi in (self.beta_range, self.gamma_range):
            if not (0.0 < lo <= hi < 1.0):
                raise ValidationError("rate ranges must lie inside (0, 1)")
        if self.coupling < 0:
            raise ValidationError("coupling must be >= 0")
        if self.n_nodes < 1 or self.n_days < 2:
            raise ValidationError("need at least 1 node and 2 days")


def synthetic_locations(config: SynthConfig) -> list[Location]:
    """Deterministic random locations scattered over a regional box."""
    rng = np.random.default_rng([config.seed, 101])
    locations = []
    for i in range(config.n_nodes):
        lat = float(rng.uniform(32.0, 45.0))
        lon = float(rng.uniform(-110.0, -80.0))
        pop = float(rng.uniform(*config.population_range))
        density = float(pop / rng.uniform(50.0, 500.0))
        locations.append(
            Location(id=f"node{i:02d}", name=f"Node {i}", latitude=lat,
                     longitude=lon, population=pop, density=density)
        )
    return locations


def simulate_metapopulation(config: SynthConfig, graph) -> EpiDataset:
    """Coupled daily SIR over the graph; returns a full EpiDataset.

    Each node runs mass-action SIR with its own rates; mobility adds
    imported pressure ``coupling * sum_j w_ij I_j / N_j`` over the other
    nodes.  Dynamic features are lagged transforms of the active count plus
    seeded noise.
    """
    n = graph.n_nodes
    if n != config.n_nodes:
        raise ValidationError(f"graph has {n} nodes, config says {config.n_nodes}")
    t_days = config.n_days
    rng = np.random.default_rng([config.seed, 202])
    betas = rng.uniform(*config.beta_range, size=n)
    gammas = rng.uniform(*config.gamma_range, size=n)
    pops = np.array([loc.population for loc in graph.locations])
    i0 = np.maximum(1.0, np.round(pops * rng.uniform(0.0005, 0.004, size=n)))

    infected = np.zeros((n, t_days))
    recovered = np.zeros((n, t_days))
    infected[:, 0] = i0
    coupling_w = graph.weights.copy()
    np.fill_diagonal(coupling_w, 0.0)
    for k in range(1, t_days):
        cur_i = infected[:, k - 1]
        cur_r = recovered[:, k - 1]
        s = pops - cur_i - cur_r
        pressure = betas * cur_i / pops
        if config.coupling > 0:
            pressure = pressure + config.coupling * (coupling_w @ (cur_i / pops))
        new_inf = np.minimum(pressure * s, s)
        new_rec = gammas * cur_i
        infected[:, k] = cur_i + new_inf - new_rec
        recovered[:, k] = cur_r + new_rec

    dynamic = np.zeros((n, t_days, DYNAMIC_FEATURE_COUNT))
    dynamic[:, :, 0] = infected
    dynamic[:, :, 1] = infected + recovered  # cumulative ever-infected
    noise_rng = np.random.default_rng([config.seed, 303])

    def lagged(series, lag):
        out = np.zeros_like(series)
        if lag < series.shape[1]:
            out[:, lag:] = series[:, : series.shape[1] - lag]
        return out

    def noisy(base):
        if config.noise <= 0:
            return np.maximum(base, 0.0)
        jitter = noise_rng.normal(scale=config.noise, size=base.shape)
        return np.maximum(base * (1.0 + jitter), 0.0)

    dynamic[:, :, 2] = noisy(0.10 * lagged(infected, 2))  # hospitalizations
    dynamic[:, :, 3] = noisy(0.03 * lagged(infected, 4))  # icu
    for c in range(len(CODE_COLUMNS)):
        lag = c % 7
        scale = 0.01 + 0.002 * c
        dynamic[:, :, 4 + c] = noisy(scale * lagged(infected, lag))

    return EpiDataset(
        locations=list(graph.locations),
        dates=_date_axis(config.start_date, t_days),
        infected=infected,
        recovered=recovered,
        dynamic=dynamic,
        meta={"synthetic": True, "betas": betas.tolist(), "gammas": gammas.tolist(),
              "recovered_proxy": False},
    )


def restrict_to_active(dataset: EpiDataset) -> EpiDataset:
    """Keep only the active-case dynamic column (naive-GRU feature set)."""
    return EpiDataset(
        locations=dataset.locations,
        dates=list(dataset.dates),
        infected=dataset.infected.copy(),
        recovered=dataset.recovered.copy(),
        dynamic=dataset.dynamic[:, :, :1].copy(),
        meta=dict(dataset.meta),
    )
