"""Concentration-response health impacts and damage valuation.

Hazard ratio (GEMM NCD+LRI form)::

    z = max(0, c - cf)
    T(c) = log(z / alpha + 1) / (1 + exp(-(z - mu) / nu))
    RR(c) = exp(theta * T(c)),   theta ~ Normal(theta_mean, theta_sd)

Since 1/RR is log-normal in theta, its mean is
``exp(-theta_mean * T + theta_sd**2 * T**2 / 2)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .grid import AGE_GROUPS, Channel, SchemaError, extract_windows, is_emission, parse_channel, window_bounds


@dataclass(frozen=True)
class GemmParams:
    theta_mean: float
    theta_sd: float
    alpha: float
    mu: float
    nu: float
    cf: float

    def __post_init__(self):
        if self.theta_sd < 0:
            raise ValueError("theta_sd must be >= 0")
        if self.alpha <= 0 or self.nu <= 0:
            raise ValueError("alpha and nu must be positive")
        if self.cf < 0:
            raise ValueError("cf must be >= 0")


# External source, not from this package's data: GEMM NCD+LRI all-age
# parameters including China (Burnett et al. 2018, PNAS 115:9592).
GEMM_NCD_LRI = GemmParams(theta_mean=0.1430, theta_sd=0.01807, alpha=1.6, mu=15.5, nu=36.8, cf=2.4)

# Illustrative baseline NCD+LRI mortality (deaths per person-year) for the
# 12 adult age groups; replace with real rates for any applied use.
ILLUSTRATIVE_MORTALITY = np.array([0.0006, 0.0008, 0.0012, 0.0019, 0.0030, 0.0046,
                                   0.0070, 0.0110, 0.0175, 0.0290, 0.0480, 0.1100])


def gemm_transform(c, gemm: GemmParams):
    z = np.maximum(0.0, np.asarray(c, dtype=float) - gemm.cf)
    return np.log1p(z / gemm.alpha) / (1.0 + np.exp(-(z - gemm.mu) / gemm.nu))


def hazard_ratio(c, gemm: GemmParams, theta=None):
    theta = gemm.theta_mean if theta is None else theta
    return np.exp(theta * gemm_transform(c, gemm))


def _log_mean_inverse_rr(c, gemm):
    t = gemm_transform(c, gemm)
    return -gemm.theta_mean * t + 0.5 * (gemm.theta_sd * t) ** 2


def mean_inverse_rr(c, gemm: GemmParams):
    """E[1/RR(c)] over theta."""
    return np.exp(_log_mean_inverse_rr(c, gemm))


def mean_inverse_rr_change(c0, c1, gemm: GemmParams):
    """E[1/RR(c1)] - E[1/RR(c0)], computed without cancellation in the
    exponential."""
    a0 = _log_mean_inverse_rr(c0, gemm)
    a1 = _log_mean_inverse_rr(c1, gemm)
    return np.exp(a0) * np.expm1(a1 - a0)


@dataclass
class DemographyTable:
    """Baseline mortality per age group and population per station and age group."""

    mortality: np.ndarray
    population: np.ndarray  # (n_stations, 12)

    def __post_init__(self):
        self.mortality = np.asarray(self.mortality, dtype=float)
        self.population = np.atleast_2d(np.asarray(self.population, dtype=float))
        if self.mortality.shape != (len(AGE_GROUPS),):
            raise ValueError(f"need {len(AGE_GROUPS)} mortality rates")
        if np.any((self.mortality < 0) | (self.mortality > 1)):
            raise ValueError("mortality rates must lie in [0, 1]")
        if self.population.shape[1] != len(AGE_GROUPS) or np.any(self.population < 0):
            raise ValueError("population must be (n_stations, 12) and non-negative")

    def baseline_deaths(self):
        """sum_m M_m * pop_{m,n}, one value per station."""
        return self.population @ self.mortality


def station_demography(world, stations, mortality) -> DemographyTable:
    """Station-represented population split by the national age structure.

    Each station represents its city's population divided by the number of
    stations in that city.
    """
    counts = {}
    for s in stations:
        counts[s.city_id] = counts.get(s.city_id, 0) + 1
    by_age = world.population.sum(axis=(1, 2))
    shares = by_age / by_age.sum()
    rep = np.array([world.city_population[s.city_id] / counts[s.city_id] for s in stations])
    return DemographyTable(mortality, rep[:, None] * shares[None, :])


def read_mortality(path) -> np.ndarray:
    rates = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["age_group", "mortality"]:
            raise SchemaError(f"{path}: expected header age_group,mortality")
        for rec in reader:
            try:
                rates[rec[0]] = float(rec[1])
            except (IndexError, ValueError):
                raise SchemaError(f"{path}: bad row {rec}") from None
    missing = [g for g in AGE_GROUPS if g not in rates]
    if missing or len(rates) != len(AGE_GROUPS):
        raise SchemaError(f"{path}: need exactly the age groups {AGE_GROUPS}")
    return np.array([rates[g] for g in AGE_GROUPS])


def write_mortality(rates, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["age_group", "mortality"])
        for g, r in zip(AGE_GROUPS, rates):
            w.writerow([g, repr(float(r))])


# --- avoided deaths ------------------------------------------------------------

@dataclass
class AvoidedDeaths:
    mean: np.ndarray        # per station, closed form
    ci: np.ndarray          # (n_stations, 2), from theta draws
    total_mean: float
    total_ci: tuple


def avoided_deaths(c0, c1, demography: DemographyTable, gemm: GemmParams,
                   n_draws=1000, seed=0, ci_level=0.95) -> AvoidedDeaths:
    """Deaths avoided when concentrations move from ``c0`` to ``c1``.

    Positive when ``c1 < c0``. The mean uses the log-normal closed form;
    the interval comes from ``n_draws`` theta samples shared by all
    stations, so the total interval reflects fully correlated uncertainty.
    """
    c0 = np.atleast_1d(np.asarray(c0, dtype=float))
    c1 = np.atleast_1d(np.asarray(c1, dtype=float))
    if np.any(c0 < 0) or np.any(c1 < 0):
        raise ValueError("concentrations must be non-negative")
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    deaths = demography.baseline_deaths()
    mean = deaths * (mean_inverse_rr(c1, gemm) - mean_inverse_rr(c0, gemm))

    theta = np.random.default_rng(seed).normal(gemm.theta_mean, gemm.theta_sd, n_draws)
    t0 = gemm_transform(c0, gemm)
    t1 = gemm_transform(c1, gemm)
    draws = deaths[None, :] * (np.exp(-theta[:, None] * t1[None, :]) - np.exp(-theta[:, None] * t0[None, :]))
    lo, hi = 50 * (1 - ci_level), 50 * (1 + ci_level)
    station_ci = np.percentile(draws, [lo, hi], axis=0).T
    totals = draws.sum(axis=1)
    total_ci = tuple(float(v) for v in np.percentile(totals, [lo, hi]))
    return AvoidedDeaths(mean, station_ci, float(mean.sum()), total_ci)


# --- valuation -------------------------------------------------------------------

@dataclass(frozen=True)
class VslConfig:
    base: float
    pcgdp_base: float
    pcgdp_target: float
    elasticity: float = 0.8

    def __post_init__(self):
        if min(self.base, self.pcgdp_base, self.pcgdp_target) <= 0 or self.elasticity < 0:
            raise ValueError("VSL inputs must be positive")


def vsl(config: VslConfig) -> float:
    """Income-elasticity benefit transfer of a base-country VSL."""
    return config.base * (config.pcgdp_target / config.pcgdp_base) ** config.elasticity


# --- scenarios ---------------------------------------------------------------------

def _raw_windows(world, stations, half_extent):
    return extract_windows(world, stations, half_extent)


def baseline_concentration(model, world, stations):
    raw, _ = _raw_windows(world, stations, model.hyper.half_extent)
    return model.predict_raw(raw)[0]


def scenario_concentration(model, world, stations, sector, p):
    """Predicted concentrations after cutting ``sector`` by fraction ``p``.

    Windows are re-normalized after the cut, so the change reaches the
    model through both branches exactly as new raw inputs would.
    """
    sector = parse_channel(sector)
    if not is_emission(sector):
        raise ValueError(f"{sector.name} is not an emission channel")
    if not 0.0 <= p <= 1.0:
        raise ValueError("curtailment fraction must lie in [0, 1]")
    raw, _ = _raw_windows(world, stations, model.hyper.half_extent)
    raw[:, int(sector)] *= 1.0 - p
    return model.predict_raw(raw)[0]


def sweep_fractions(p_max=0.20, p_step=0.02):
    n = int(round(p_max / p_step))
    return [round(p_step * (i + 1), 12) for i in range(n)]


@dataclass
class SweepRow:
    p: float
    pop_weighted_concentration: float
    avoided_deaths: float
    ci_low: float
    ci_high: float


def curtailment_sweep(model, world, stations, sector, demography, gemm, weights,
                      fractions=None, n_draws=1000, seed=0, ci_level=0.95) -> list:
    """Population-weighted concentration and avoided deaths per cut fraction,
    relative to the uncut baseline."""
    fractions = sweep_fractions() if fractions is None else fractions
    w = np.array([weights[s.id] for s in stations])
    c0 = np.maximum(baseline_concentration(model, world, stations), 0.0)
    rows = []
    for p in fractions:
        c1 = np.maximum(scenario_concentration(model, world, stations, sector, p), 0.0)
        ad = avoided_deaths(c0, c1, demography, gemm, n_draws=n_draws, seed=seed, ci_level=ci_level)
        rows.append(SweepRow(p, float(w @ c1 / w.sum()), ad.total_mean, *ad.total_ci))
    return rows


# --- marginal and total damages ------------------------------------------------

@dataclass
class DamageContributions:
    """Per-station damage of one extra input unit in each window cell.

    ``damage[n, i, j]`` is ``-VSL * mean avoided deaths`` for station ``n``
    ($/yr per tce/yr); ``mask`` marks window cells inside the grid.
    """

    sector: Channel
    stations: list
    half_extent: int
    damage: np.ndarray
    mask: np.ndarray


def damage_contributions(world, stations, sector, half_extent, c0, grads,
                         demography: DemographyTable, gemm: GemmParams, vsl_value) -> DamageContributions:
    """Damage windows from baseline concentrations ``c0`` (N,) and
    sector gradient windows ``grads`` (N, H, W)."""
    sector = parse_channel(sector)
    c0 = np.maximum(np.asarray(c0, dtype=float), 0.0)
    grads = np.asarray(grads, dtype=float)
    deaths = demography.baseline_deaths()
    delta = mean_inverse_rr_change(c0[:, None, None], c0[:, None, None] + grads, gemm)
    damage = -vsl_value * deaths[:, None, None] * delta
    n = 2 * half_extent + 1
    mask = np.zeros((len(stations), n, n), dtype=bool)
    for k, s in enumerate(stations):
        _, (sr, sc) = window_bounds(world.shape, s.row, s.col, half_extent)
        mask[k, sr, sc] = True
    damage = np.where(mask, damage, 0.0)
    return DamageContributions(sector, list(stations), half_extent, damage, mask)


def model_damage_contributions(model, world, stations, sector, demography, gemm, vsl_value) -> DamageContributions:
    sector = parse_channel(sector)
    if not is_emission(sector):
        raise ValueError(f"{sector.name} is not an emission channel")
    h = model.hyper.half_extent
    raw, _ = _raw_windows(world, stations, h)
    c0 = model.predict_raw(raw)[0]
    grads = model.input_gradients(raw)[:, int(sector)]
    return damage_contributions(world, stations, sector, h, c0, grads, demography, gemm, vsl_value)


@dataclass
class DamageField:
    """Marginal damage in $/tCO2 on the absolute grid for one sector."""

    sector: Channel
    md: np.ndarray
    covered: np.ndarray
    emission_factor: float

    @property
    def n_negative(self):
        return int(np.sum(self.covered & (self.md < 0)))

    @property
    def n_uncovered(self):
        return int(np.sum(~self.covered))

    def values(self, clamp_nonnegative=False):
        return np.maximum(self.md, 0.0) if clamp_nonnegative else self.md


def field_from_contributions(contrib: DamageContributions, world, emission_factor) -> DamageField:
    """Scatter-add station contributions onto the grid and convert to $/tCO2."""
    if emission_factor <= 0:
        raise ValueError("emission factor must be positive")
    md = np.zeros(world.shape)
    covered = np.zeros(world.shape, dtype=bool)
    h = contrib.half_extent
    for k, s in enumerate(contrib.stations):
        (wr, wc), (sr, sc) = window_bounds(world.shape, s.row, s.col, h)
        md[wr, wc] += contrib.damage[k, sr, sc]
        covered[wr, wc] = True
    return DamageField(contrib.sector, md / emission_factor, covered, float(emission_factor))


def marginal_damage_field(model, world, stations, sector, demography, gemm, vsl_value,
                          emission_factor) -> DamageField:
    contrib = model_damage_contributions(model, world, stations, sector, demography, gemm, vsl_value)
    return field_from_contributions(contrib, world, emission_factor)


@dataclass
class DamageSummary:
    sector: Channel
    total: float
    by_region: dict = field(default_factory=dict)
    unmapped_cells: int = 0
    uncovered_emissions: float = 0.0


def total_damage(dfield: DamageField, world, regions=None) -> DamageSummary:
    """Total damage ($/yr) = sum over cells of MD * emissions * emission factor.

    Cells without a region go to an ``"unmapped"`` bucket. Emissions in
    cells no station covers are reported, not valued.
    """
    regions = world.regions if regions is None else regions
    x = world.values[int(dfield.sector)]
    cell_td = np.where(dfield.covered, dfield.md * x * dfield.emission_factor, 0.0)
    total = float(cell_td.sum())
    by_region = {}
    unmapped = 0
    if regions is None:
        by_region["unmapped"] = total
        unmapped = cell_td.size
    else:
        names = np.asarray(regions, dtype=object)
        missing = np.vectorize(lambda v: v is None or v == "")(names)
        unmapped = int(missing.sum())
        for name in sorted({v for v in names.ravel() if v is not None and v != ""}):
            by_region[name] = float(cell_td[names == name].sum())
        if unmapped:
            by_region["unmapped"] = float(cell_td[missing].sum())
    uncovered = float(x[~dfield.covered].sum())
    return DamageSummary(dfield.sector, total, by_region, unmapped, uncovered)


def default_edges_km(half_extent, cell_km=10.0, step_cells=10):
    """Square edge lengths from ``step_cells + 1`` cells up to the full
    window in steps of ``step_cells`` (110, 210, ... km at 10 km cells)."""
    full = 2 * half_extent + 1
    sizes = list(range(step_cells + 1, full, step_cells))
    if not sizes or sizes[-1] != full:
        sizes.append(full)
    return [s * cell_km for s in sizes]


def damage_by_distance(contrib: DamageContributions, world, edges_km=None) -> list:
    """Cumulative total damage counting, for every station, only emissions
    inside the central square of each edge length. Returns
    ``[(edge_km, damage), ...]``."""
    h = contrib.half_extent
    full = 2 * h + 1
    edges_km = default_edges_km(h, world.cell_km) if edges_km is None else edges_km
    x = np.zeros_like(contrib.damage)
    values = world.values[int(contrib.sector)]
    for k, s in enumerate(contrib.stations):
        (wr, wc), (sr, sc) = window_bounds(world.shape, s.row, s.col, h)
        x[k, sr, sc] = values[wr, wc]
    per_cell = contrib.damage * x
    out = []
    for edge in edges_km:
        cells = int(round(edge / world.cell_km))
        if cells % 2 == 0 or not 1 <= cells <= full:
            raise ValueError(f"edge {edge} km is not an odd number of cells within the {full}-cell window")
        r = (cells - 1) // 2
        sub = per_cell[:, h - r:h + r + 1, h - r:h + r + 1]
        out.append((float(edge), float(sub.sum())))
    return out


def model_damage_by_distance(model, world, stations, sector, demography, gemm, vsl_value, edges_km=None):
    contrib = model_damage_contributions(model, world, stations, sector, demography, gemm, vsl_value)
    return damage_by_distance(contrib, world, edges_km)
