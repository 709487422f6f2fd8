"""Absolute grid, station registry, window extraction and dataset splits.

Windows are stored channels-first, ``(K, 2h+1, 2h+1)``, so a batch of
windows stacks directly into the ``(N, C, H, W)`` layout used by the
network layers.
"""
from __future__ import annotations

import csv
import dataclasses
import enum
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np


class Channel(enum.IntEnum):
    RRC = 0  # rural/residential coal
    IDC = 1  # industrial coal
    IDO = 2  # industrial oil
    SVC = 3  # service coal
    TRN = 4  # transport oil
    ALT = 5  # altitude, m
    TEM = 6  # temperature, degC
    PCP = 7  # precipitation, mm


K = len(Channel)
EMISSION_CHANNELS = (Channel.RRC, Channel.IDC, Channel.IDO, Channel.SVC, Channel.TRN)
GEOGRAPHY_CHANNELS = (Channel.ALT, Channel.TEM, Channel.PCP)

AGE_GROUPS = tuple(f"{a}-{a + 4}" for a in range(25, 80, 5)) + ("80+",)

DEFAULT_HALF_EXTENTS = (10, 20, 30)


def parse_channel(name) -> Channel:
    if isinstance(name, Channel):
        return name
    try:
        return Channel[str(name).upper()]
    except KeyError:
        raise ValueError(f"unknown channel {name!r}") from None


def is_emission(channel) -> bool:
    return parse_channel(channel) in EMISSION_CHANNELS


@dataclass(frozen=True)
class Station:
    id: str
    row: int
    col: int
    city_id: str
    pm25: float


@dataclass(frozen=True)
class RawMonitor:
    """A monitor before gridding; coordinates are km from the grid origin."""

    id: str
    x_km: float
    y_km: float
    city_id: str
    pm25: float


@dataclass(frozen=True)
class World:
    """Immutable absolute grid.

    ``values`` has shape ``(K, rows, cols)``; ``population`` has shape
    ``(len(AGE_GROUPS), rows, cols)``. ``regions`` is an optional
    ``(rows, cols)`` array of region names.
    """

    values: np.ndarray
    population: np.ndarray
    stations: tuple
    city_population: dict
    cell_km: float = 10.0
    regions: np.ndarray | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 3 or values.shape[0] != K:
            raise ValueError(f"values must have shape (K={K}, rows, cols), got {values.shape}")
        pop = np.array(self.population, dtype=float)
        if pop.shape != (len(AGE_GROUPS),) + tuple(values.shape[1:]):
            raise ValueError(f"population shape {pop.shape} does not match grid {values.shape[1:]}")
        if np.any(values[list(EMISSION_CHANNELS)] < 0):
            raise ValueError("emission channels must be non-negative")
        if np.any(pop < 0):
            raise ValueError("population must be non-negative")
        values.setflags(write=False)
        pop.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "population", pop)
        stations = tuple(self.stations)
        seen = set()
        for s in stations:
            if not self.contains(s.row, s.col):
                raise ValueError(f"station {s.id} at ({s.row}, {s.col}) lies outside the grid")
            if (s.row, s.col) in seen:
                raise ValueError(f"more than one station in cell ({s.row}, {s.col})")
            seen.add((s.row, s.col))
        object.__setattr__(self, "stations", stations)
        object.__setattr__(self, "city_population", dict(self.city_population))
        if self.regions is not None:
            regions = np.asarray(self.regions, dtype=object)
            if regions.shape != values.shape[1:]:
                raise ValueError("region map shape does not match grid")
            regions.setflags(write=False)
            object.__setattr__(self, "regions", regions)

    @property
    def shape(self):
        return self.values.shape[1:]

    def contains(self, row, col) -> bool:
        rows, cols = self.values.shape[1:]
        return 0 <= row < rows and 0 <= col < cols

    def station(self, station_id: str) -> Station:
        for s in self.stations:
            if s.id == station_id:
                return s
        raise KeyError(station_id)

    def station_ids(self):
        return [s.id for s in self.stations]

    def with_channel_scaled(self, channel, factor: float) -> "World":
        """Copy of the world with one channel multiplied by ``factor``."""
        values = self.values.copy()
        values[int(parse_channel(channel))] *= factor
        return dataclasses.replace(self, values=values)


@dataclass
class DedupeReport:
    n_raw: int
    n_retained: int
    rejected: list = field(default_factory=list)


def dedupe_stations(raw_monitors, shape, cell_km=10.0):
    """Grid raw monitors and merge those sharing a cell.

    The merged station keeps the lexicographically first monitor id and
    city, and reads the mean of the co-located monitors. Monitors that
    fall outside the grid are dropped and listed in the report.

    Returns
    -------
    stations : list of Station
        Sorted by (row, col).
    report : DedupeReport
    """
    rows, cols = shape
    cells = {}
    rejected = []
    for m in raw_monitors:
        r = math.floor(m.y_km / cell_km)
        c = math.floor(m.x_km / cell_km)
        if not (0 <= r < rows and 0 <= c < cols):
            msg = f"monitor {m.id} at ({m.x_km} km, {m.y_km} km) maps to cell ({r}, {c}) outside {rows}x{cols} grid"
            warnings.warn(msg)
            rejected.append(msg)
            continue
        cells.setdefault((r, c), []).append(m)

    stations = []
    for (r, c), group in sorted(cells.items()):
        group = sorted(group, key=lambda m: m.id)
        reading = float(np.mean([m.pm25 for m in group]))
        stations.append(Station(group[0].id, r, c, group[0].city_id, reading))
    report = DedupeReport(n_raw=len(raw_monitors), n_retained=len(stations), rejected=rejected)
    return stations, report


@dataclass
class GridStack:
    """One station's window.

    ``raw`` is ``(K, 2h+1, 2h+1)``; outside-domain cells are exactly zero
    and ``mask`` is False there. The normalization fields are filled by
    :func:`normalize_stack`.
    """

    station_id: str
    half_extent: int
    raw: np.ndarray
    mask: np.ndarray
    normalized: np.ndarray | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    degenerate: np.ndarray | None = None

    @property
    def size(self):
        return 2 * self.half_extent + 1


def window_bounds(world_shape, row, col, h):
    """Slices of the world and of the window that overlap."""
    rows, cols = world_shape
    r0, r1 = row - h, row + h + 1
    c0, c1 = col - h, col + h + 1
    wr = slice(max(r0, 0), min(r1, rows))
    wc = slice(max(c0, 0), min(c1, cols))
    sr = slice(wr.start - r0, wr.stop - r0)
    sc = slice(wc.start - c0, wc.stop - c0)
    return (wr, wc), (sr, sc)


def extract_window(world: World, station, half_extent: int) -> GridStack:
    if isinstance(station, str):
        station = world.station(station)
    h = int(half_extent)
    if h < 0:
        raise ValueError("half_extent must be non-negative")
    n = 2 * h + 1
    raw = np.zeros((K, n, n))
    mask = np.zeros((n, n), dtype=bool)
    (wr, wc), (sr, sc) = window_bounds(world.shape, station.row, station.col, h)
    raw[:, sr, sc] = world.values[:, wr, wc]
    mask[sr, sc] = True
    return GridStack(station.id, h, raw, mask)


def _degenerate(std, mean):
    return std <= 1e-12 * np.maximum(1.0, np.abs(mean))


def normalize_stack(stack: GridStack) -> GridStack:
    """Standardize each channel over the window (population std)."""
    raw = stack.raw
    mean = raw.mean(axis=(1, 2))
    std = np.sqrt(((raw - mean[:, None, None]) ** 2).mean(axis=(1, 2)))
    degenerate = _degenerate(std, mean)
    safe = np.where(degenerate, 1.0, std)
    normalized = (raw - mean[:, None, None]) / safe[:, None, None]
    normalized[degenerate] = 0.0
    return dataclasses.replace(stack, normalized=normalized, mean=mean, std=std, degenerate=degenerate)


def normalize_batch(raw):
    """Vectorized :func:`normalize_stack` over ``(N, K, H, W)``.

    Returns ``(normalized, mean, std, degenerate)``.
    """
    mean = raw.mean(axis=(2, 3))
    std = np.sqrt(((raw - mean[..., None, None]) ** 2).mean(axis=(2, 3)))
    degenerate = _degenerate(std, mean)
    safe = np.where(degenerate, 1.0, std)
    normalized = (raw - mean[..., None, None]) / safe[..., None, None]
    normalized[degenerate] = 0.0
    return normalized, mean, std, degenerate


def extract_windows(world: World, stations, half_extent: int):
    """Raw windows ``(N, K, H, W)`` and masks ``(N, H, W)`` for many stations."""
    stacks = [extract_window(world, s, half_extent) for s in stations]
    return np.stack([s.raw for s in stacks]), np.stack([s.mask for s in stacks])


def compute_station_weights(stations, city_population) -> dict:
    """Population weights: city population shared equally by its stations,
    rescaled to mean 1."""
    counts = {}
    for s in stations:
        counts[s.city_id] = counts.get(s.city_id, 0) + 1
    raw = []
    for s in stations:
        if s.city_id not in city_population:
            raise ValueError(f"no population for city {s.city_id!r}")
        pop = float(city_population[s.city_id])
        if pop <= 0:
            raise ValueError(f"city {s.city_id!r} has non-positive population {pop}")
        raw.append(pop / counts[s.city_id])
    raw = np.asarray(raw)
    scaled = raw * (len(raw) / raw.sum())
    return {s.id: float(w) for s, w in zip(stations, scaled)}


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    val: tuple
    test: tuple
    seed: int


def split_sizes(n: int):
    """(train, val, test) sizes; val and test get round(n/5) each."""
    n_val = int(math.floor(n / 5 + 0.5))
    return n - 2 * n_val, n_val, n_val


def split_dataset(station_ids, seed: int) -> DatasetSplit:
    ids = list(station_ids)
    if len(ids) < 5:
        raise ValueError("need at least 5 stations to split 3:1:1")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train, n_val, _ = split_sizes(len(ids))
    return DatasetSplit(
        train=tuple(shuffled[:n_train]),
        val=tuple(shuffled[n_train:n_train + n_val]),
        test=tuple(shuffled[n_train + n_val:]),
        seed=seed,
    )


# --- world files -----------------------------------------------------------

class SchemaError(ValueError):
    """An input file does not follow its documented layout."""


def _fmt(x: float) -> str:
    return repr(float(x))


def write_world(world: World, directory) -> list:
    """Write the world as CSV files; returns the written paths."""
    os.makedirs(directory, exist_ok=True)
    rows, cols = world.shape
    written = []
    for ch in Channel:
        path = os.path.join(directory, f"{ch.name}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rows", "cols", "cell_km"])
            w.writerow([rows, cols, _fmt(world.cell_km)])
            w.writerow(["row", "col", "value"])
            grid = world.values[int(ch)]
            for r in range(rows):
                for c in range(cols):
                    w.writerow([r, c, _fmt(grid[r, c])])
        written.append(path)

    path = os.path.join(directory, "population.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "age_group", "count"])
        for r in range(rows):
            for c in range(cols):
                for m, group in enumerate(AGE_GROUPS):
                    count = world.population[m, r, c]
                    if count:
                        w.writerow([r, c, group, _fmt(count)])
    written.append(path)

    path = os.path.join(directory, "stations.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "row", "col", "city_id", "pm25_ugm3"])
        for s in world.stations:
            w.writerow([s.id, s.row, s.col, s.city_id, _fmt(s.pm25)])
    written.append(path)

    path = os.path.join(directory, "cities.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["city_id", "population"])
        for city in sorted(world.city_population):
            w.writerow([city, _fmt(world.city_population[city])])
    written.append(path)

    if world.regions is not None:
        path = os.path.join(directory, "regions.csv")
        write_region_map(world.regions, path)
        written.append(path)
    return written


def write_region_map(regions, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "region"])
        rows, cols = regions.shape
        for r in range(rows):
            for c in range(cols):
                if regions[r, c] is not None:
                    w.writerow([r, c, regions[r, c]])


def _expect_header(reader, expected, path):
    header = next(reader, None)
    if header != expected:
        raise SchemaError(f"{path}: expected header {expected}, got {header}")


def read_region_map(path, shape):
    regions = np.full(shape, None, dtype=object)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        _expect_header(reader, ["row", "col", "region"], path)
        for rec in reader:
            r, c = int(rec[0]), int(rec[1])
            if not (0 <= r < shape[0] and 0 <= c < shape[1]):
                raise SchemaError(f"{path}: cell ({r}, {c}) outside grid")
            regions[r, c] = rec[2]
    return regions


def read_world(directory) -> World:
    """Read a world directory written by :func:`write_world`.

    Raises ``FileNotFoundError`` for a missing file and :class:`SchemaError`
    for malformed content.
    """
    try:
        return _read_world(directory)
    except SchemaError:
        raise
    except (ValueError, IndexError, KeyError, StopIteration) as exc:
        raise SchemaError(f"{directory}: {exc}") from exc


def _read_world(directory) -> World:
    values = None
    cell_km = None
    for ch in Channel:
        path = os.path.join(directory, f"{ch.name}.csv")
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            _expect_header(reader, ["rows", "cols", "cell_km"], path)
            dims = next(reader)
            rows, cols, km = int(dims[0]), int(dims[1]), float(dims[2])
            if values is None:
                values = np.zeros((K, rows, cols))
                cell_km = km
            elif (rows, cols) != values.shape[1:] or km != cell_km:
                raise SchemaError(f"{path}: grid dimensions disagree with other channels")
            _expect_header(reader, ["row", "col", "value"], path)
            for rec in reader:
                values[int(ch), int(rec[0]), int(rec[1])] = float(rec[2])

    shape = values.shape[1:]
    population = np.zeros((len(AGE_GROUPS),) + tuple(shape))
    index = {g: i for i, g in enumerate(AGE_GROUPS)}
    path = os.path.join(directory, "population.csv")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        _expect_header(reader, ["row", "col", "age_group", "count"], path)
        for rec in reader:
            if rec[2] not in index:
                raise SchemaError(f"{path}: unknown age group {rec[2]!r}")
            population[index[rec[2]], int(rec[0]), int(rec[1])] = float(rec[3])

    stations = []
    path = os.path.join(directory, "stations.csv")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        _expect_header(reader, ["id", "row", "col", "city_id", "pm25_ugm3"], path)
        for rec in reader:
            stations.append(Station(rec[0], int(rec[1]), int(rec[2]), rec[3], float(rec[4])))

    cities = {}
    path = os.path.join(directory, "cities.csv")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        _expect_header(reader, ["city_id", "population"], path)
        for rec in reader:
            cities[rec[0]] = float(rec[1])

    regions = None
    path = os.path.join(directory, "regions.csv")
    if os.path.exists(path):
        regions = read_region_map(path, shape)
    return World(values, population, tuple(stations), cities, cell_km, regions)
