"""Desk-scale worlds with a known emission -> concentration kernel.

Concentration at a station is a distance-decayed sum of emissions over the
whole grid plus linear geography terms::

    c = sum_k beta_k * sum_ij exp(-d_ij / decay_km) * x_ijk
        + baseline + a_alt * ALT + a_tem * TEM + a_pcp * PCP

evaluated with the geography values of the station cell. Observations add
Gaussian noise proportional to the noiseless value.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from .grid import (AGE_GROUPS, EMISSION_CHANNELS, K, Channel, Station, World,
                   is_emission, parse_channel, window_bounds, write_world)

REGION_NAMES = ("JJJ", "YRD", "PRD", "OtherEast", "OtherCentral", "West", "Northeast")
# Fractional (row, col) seeds of the 7-region Voronoi map.
_REGION_SEEDS = ((0.30, 0.62), (0.55, 0.80), (0.85, 0.70), (0.45, 0.95),
                 (0.60, 0.50), (0.50, 0.15), (0.08, 0.85))

# Adult (25+) age structure, 12 five-year groups; illustrative.
DEFAULT_AGE_SHARES = np.array([0.115, 0.100, 0.118, 0.128, 0.122, 0.100,
                               0.095, 0.078, 0.057, 0.040, 0.027, 0.020])

# tce/yr over the default 60 x 60 grid
DEFAULT_NATIONAL_TOTALS = {
    Channel.RRC: 2.0e6,
    Channel.IDC: 8.0e7,
    Channel.IDO: 5.0e6,
    Channel.SVC: 1.0e6,
    Channel.TRN: 1.0e7,
}


@dataclass(frozen=True)
class OracleKernel:
    """Analytic concentration response.

    ``beta`` is per emission channel (RRC, IDC, IDO, SVC, TRN) in
    ug/m3 per tce/yr at zero distance. ``noise_frac`` is the observation
    noise std as a fraction of the noiseless concentration.
    ``saturation`` (ug/m3), when set, maps the emission term e to
    ``s * (1 - exp(-e / s))``. ``support_cells``, when set, limits the
    kernel to the square of that half-width around the receptor, so a
    model window of the same half-extent sees every contributing source.
    """

    beta: tuple = (8.8e-5, 4.3e-6, 3.3e-5, 6.0e-5, 6.0e-6)
    decay_km: float = 60.0
    geo_coef: tuple = (-0.004, 0.4, -0.01)
    baseline: float = 20.0
    noise_frac: float = 0.05
    saturation: float | None = None
    support_cells: int | None = None

    def __post_init__(self):
        if len(self.beta) != len(EMISSION_CHANNELS):
            raise ValueError("beta needs one value per emission channel")
        if any(b < 0 for b in self.beta):
            raise ValueError("beta must be non-negative")
        if self.decay_km <= 0:
            raise ValueError("decay_km must be positive")
        if len(self.geo_coef) != 3:
            raise ValueError("geo_coef needs (altitude, temperature, precipitation)")
        if self.support_cells is not None and self.support_cells < 0:
            raise ValueError("support_cells must be >= 0")

    def beta_of(self, channel) -> float:
        ch = parse_channel(channel)
        return self.beta[EMISSION_CHANNELS.index(ch)]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["beta"] = tuple(d["beta"])
        d["geo_coef"] = tuple(d["geo_coef"])
        return cls(**d)


def _blobs(shape, centers, sigmas, weights):
    rows, cols = shape
    r = np.arange(rows)[:, None]
    c = np.arange(cols)[None, :]
    out = np.zeros(shape)
    for (cr, cc), s, w in zip(centers, sigmas, weights):
        out += w * np.exp(-((r - cr) ** 2 + (c - cc) ** 2) / (2 * s * s))
    return out


def _corridors(shape, nodes, weights, width, n_links=2):
    """Gaussian tubes along segments joining each node to its nearest neighbours."""
    rows, cols = shape
    r = np.arange(rows)[:, None]
    c = np.arange(cols)[None, :]
    pts = np.asarray(nodes, dtype=float)
    out = np.zeros(shape)
    links = set()
    for i, p in enumerate(pts):
        d = np.hypot(*(pts - p).T)
        for j in np.argsort(d)[1:n_links + 1]:
            links.add((min(i, int(j)), max(i, int(j))))
    for i, j in sorted(links):
        a, b = pts[i], pts[j]
        ab = b - a
        t = np.clip(((r - a[0]) * ab[0] + (c - a[1]) * ab[1]) / max(ab @ ab, 1e-12), 0.0, 1.0)
        d2 = (r - a[0] - t * ab[0]) ** 2 + (c - a[1] - t * ab[1]) ** 2
        out += np.sqrt(weights[i] * weights[j]) * np.exp(-d2 / (2 * width * width))
    return out


def generate_world(seed, size=(60, 60), n_stations=300, kernel=None, *,
                   national_totals=None, total_population=1.0e8, cell_km=10.0,
                   n_cities_side=None, age_shares=None) -> World:
    """Random world with clustered log-normal emissions.

    Population is concentrated around city centers that also drive the
    residential, service and transport channels; industry has its own
    clusters. Stations occupy distinct cells sampled with probability
    proportional to population, and read the oracle concentration with
    seeded noise.
    """
    kernel = kernel or OracleKernel()
    rows, cols = size
    if n_stations > rows * cols:
        raise ValueError("more stations than cells")
    rng = np.random.default_rng(seed)
    totals = dict(DEFAULT_NATIONAL_TOTALS)
    totals.update({parse_channel(k): v for k, v in (national_totals or {}).items()})
    shares = np.asarray(DEFAULT_AGE_SHARES if age_shares is None else age_shares, dtype=float)
    shares = shares / shares.sum()

    scale = np.sqrt(rows * cols) / 60.0

    def centers(n):
        return list(zip(rng.uniform(0, rows, n), rng.uniform(0, cols, n)))

    cities = centers(max(3, int(round(14 * scale * scale))))
    city_w = rng.lognormal(0.0, 0.8, len(cities))
    density = _blobs(size, cities, rng.uniform(1.5, 3.5, len(cities)) * scale ** 0.5, city_w)
    density += 0.02 * density.max()

    def field(base):
        noisy = base * rng.lognormal(0.0, 0.5, size)
        return noisy

    values = np.zeros((K, rows, cols))
    # residential coal: diffuse, rural-leaning, wider halos around cities
    rural = _blobs(size, centers(len(cities)), rng.uniform(4, 8, len(cities)) * scale ** 0.5,
                   rng.lognormal(0, 0.6, len(cities)))
    values[Channel.RRC] = field(rural + 0.3 * density / density.max() + 0.2)
    industry = centers(max(3, int(round(10 * scale * scale))))
    values[Channel.IDC] = field(_blobs(size, industry, rng.uniform(1.0, 2.5, len(industry)),
                                       rng.lognormal(0, 1.0, len(industry))) + 0.01)
    oil_sites = centers(max(2, int(round(6 * scale * scale))))
    values[Channel.IDO] = field(_blobs(size, oil_sites, rng.uniform(1.0, 3.0, len(oil_sites)),
                                       rng.lognormal(0, 1.0, len(oil_sites))) + 0.01)
    values[Channel.SVC] = field(density ** 1.3)
    # transport: highway corridors between neighbouring cities
    roads = _corridors(size, cities, city_w, 1.0)
    values[Channel.TRN] = field(roads + 0.05 * roads.max())
    for ch in EMISSION_CHANNELS:
        values[ch] *= totals[ch] / values[ch].sum()

    mountains = _blobs(size, centers(3), rng.uniform(8, 15, 3) * scale, rng.uniform(800, 3000, 3))
    values[Channel.ALT] = mountains + 50.0
    lat = np.linspace(1.0, 0.0, rows)[:, None] * np.ones((1, cols))
    values[Channel.TEM] = 8.0 + 14.0 * (1 - lat) - 0.0065 * values[Channel.ALT]
    east = np.ones((rows, 1)) * np.linspace(0.0, 1.0, cols)[None, :]
    values[Channel.PCP] = 300.0 + 1200.0 * east * (1 - 0.5 * lat) + _blobs(size, centers(2), [10 * scale] * 2, [200.0, 150.0])

    pop_total = density / density.sum() * total_population
    population = shares[:, None, None] * pop_total[None]

    side = n_cities_side or max(2, int(round(10 * scale)))
    block_r = -(-rows // side)
    block_c = -(-cols // side)

    def city_of(r, c):
        return f"C{r // block_r:02d}{c // block_c:02d}"

    city_population = {}
    for r in range(rows):
        for c in range(cols):
            cid = city_of(r, c)
            city_population[cid] = city_population.get(cid, 0.0) + pop_total[r, c]

    p = pop_total.ravel() + 0.05 * pop_total.mean()
    cells = rng.choice(rows * cols, size=n_stations, replace=False, p=p / p.sum())
    cells = np.sort(cells)
    noise = rng.standard_normal(n_stations)

    rr = np.arange(rows)[:, None]
    cc = np.arange(cols)[None, :]
    seeds = np.array(_REGION_SEEDS) * [rows, cols]
    d2 = np.stack([(rr - sr) ** 2 + (cc - sc) ** 2 for sr, sc in seeds])
    regions = np.array(REGION_NAMES, dtype=object)[d2.argmin(axis=0)]

    draft = World(values, population, (), city_population, cell_km, regions)
    stations = []
    for n, cell in enumerate(cells):
        r, c = divmod(int(cell), cols)
        clean = _oracle_at(draft, r, c, kernel)
        obs = clean * (1.0 + kernel.noise_frac * noise[n])
        stations.append(Station(f"S{n:04d}", r, c, city_of(r, c), float(obs)))
    return dataclasses.replace(draft, stations=tuple(stations))


def _decay(world, row, col, kernel):
    rows, cols = world.shape
    dr = (np.arange(rows) - row)[:, None] * world.cell_km
    dc = (np.arange(cols) - col)[None, :] * world.cell_km
    decay = np.exp(-np.hypot(dr, dc) / kernel.decay_km)
    if kernel.support_cells is not None:
        decay *= _in_support(np.arange(rows)[:, None] - row, np.arange(cols)[None, :] - col, kernel)
    return decay


def _in_support(dr, dc, kernel):
    """1 where the cell offset lies inside the kernel support, else 0."""
    if kernel.support_cells is None:
        return np.ones(np.broadcast(dr, dc).shape)
    h = kernel.support_cells
    return ((np.abs(dr) <= h) & (np.abs(dc) <= h)).astype(float)


def _emission_term(world, row, col, kernel):
    decay = _decay(world, row, col, kernel)
    total = 0.0
    for ch, b in zip(EMISSION_CHANNELS, kernel.beta):
        total += b * float(np.sum(decay * world.values[ch]))
    return total


def _oracle_at(world, row, col, kernel):
    e = _emission_term(world, row, col, kernel)
    if kernel.saturation:
        e = kernel.saturation * (1.0 - np.exp(-e / kernel.saturation))
    geo = world.values[list(Channel)[5:], row, col]
    return kernel.baseline + float(np.dot(kernel.geo_coef, geo)) + e


def oracle_concentration(world: World, station, kernel: OracleKernel, rng=None) -> float:
    """Oracle concentration at a station; adds observation noise when a
    ``rng`` is given."""
    if isinstance(station, str):
        station = world.station(station)
    c = _oracle_at(world, station.row, station.col, kernel)
    if rng is not None:
        c *= 1.0 + kernel.noise_frac * np.random.default_rng(rng).standard_normal()
    return c


def _saturation_factor(world, station, kernel):
    if not kernel.saturation:
        return 1.0
    e = _emission_term(world, station.row, station.col, kernel)
    return float(np.exp(-e / kernel.saturation))


def oracle_marginal(world: World, station, cell, channel, kernel: OracleKernel) -> float:
    """d c(station) / d x(cell, channel) for an emission channel."""
    if isinstance(station, str):
        station = world.station(station)
    channel = parse_channel(channel)
    if not is_emission(channel):
        raise ValueError(f"{channel.name} is a geography channel; oracle marginals are defined for emissions only")
    r, c = cell
    d = np.hypot(r - station.row, c - station.col) * world.cell_km
    inside = float(_in_support(r - station.row, c - station.col, kernel))
    return kernel.beta_of(channel) * inside * float(np.exp(-d / kernel.decay_km)) * _saturation_factor(world, station, kernel)


def oracle_gradient_window(world: World, station, half_extent, kernel: OracleKernel) -> np.ndarray:
    """Analytic d c / d x over a station's window, shape ``(K, H, W)``.

    Geography channels and outside-domain cells are zero.
    """
    if isinstance(station, str):
        station = world.station(station)
    h = int(half_extent)
    n = 2 * h + 1
    off = (np.arange(n) - h) * world.cell_km
    decay = np.exp(-np.hypot(off[:, None], off[None, :]) / kernel.decay_km)
    decay *= _in_support((np.arange(n) - h)[:, None], (np.arange(n) - h)[None, :], kernel)
    decay *= _saturation_factor(world, station, kernel)
    _, (sr, sc) = window_bounds(world.shape, station.row, station.col, h)
    inside = np.zeros((n, n), dtype=bool)
    inside[sr, sc] = True
    out = np.zeros((K, n, n))
    for ch, b in zip(EMISSION_CHANNELS, kernel.beta):
        out[ch] = b * decay * inside
    return out


def write_synthetic_world(world: World, kernel: OracleKernel, directory) -> list:
    """World files plus a ``kernel.json`` sidecar."""
    written = write_world(world, directory)
    path = os.path.join(directory, "kernel.json")
    with open(path, "w") as fh:
        json.dump(kernel.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return written + [path]


def read_kernel(directory) -> OracleKernel:
    with open(os.path.join(directory, "kernel.json")) as fh:
        return OracleKernel.from_dict(json.load(fh))


__all__ = [
    "AGE_GROUPS", "OracleKernel", "generate_world", "oracle_concentration",
    "oracle_marginal", "oracle_gradient_window", "write_synthetic_world", "read_kernel",
]
