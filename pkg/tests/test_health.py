import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cobenefit import health
from cobenefit.grid import AGE_GROUPS, K, Channel, Station, World
from cobenefit.health import (DemographyTable, GemmParams, VslConfig, avoided_deaths, damage_by_distance,
                              damage_contributions, field_from_contributions, gemm_transform,
                              hazard_ratio, mean_inverse_rr, total_damage, vsl)
from cobenefit.rescnn import HyperParams, build_model

# fixture values, deliberately not the shipped defaults
GEMM = GemmParams(theta_mean=0.12, theta_sd=0.03, alpha=1.5, mu=12.0, nu=30.0, cf=2.0)


def scalar_T(c, g):
    z = max(0.0, c - g.cf)
    return math.log(z / g.alpha + 1.0) / (1.0 + math.exp(-(z - g.mu) / g.nu))


def scalar_mean_inv_rr(c, g):
    t = scalar_T(c, g)
    return math.exp(-g.theta_mean * t + g.theta_sd ** 2 * t ** 2 / 2)


# --- hazard ratio

def test_rr_below_counterfactual_is_one():
    c = np.linspace(0, GEMM.cf, 7)
    assert np.all(hazard_ratio(c, GEMM) == 1.0)
    assert np.all(mean_inverse_rr(c, GEMM) == 1.0)


def test_rr_theta_zero():
    assert np.all(hazard_ratio(np.linspace(0, 300, 50), GEMM, theta=0.0) == 1.0)


def test_transform_mu_zero_fixture():
    g = replace(GEMM, mu=0.0)
    c = g.cf + g.alpha * (math.e - 1)
    expected = 1.0 / (1.0 + math.exp(-(g.alpha * (math.e - 1)) / g.nu))
    assert float(gemm_transform(c, g)) == pytest.approx(expected, rel=1e-12)
    assert float(hazard_ratio(c, g)) == pytest.approx(math.exp(g.theta_mean * expected), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(c=st.floats(0, 500), dc=st.floats(0, 50))
def test_rr_nondecreasing_and_matches_scalar(c, dc):
    assert hazard_ratio(c + dc, GEMM) >= hazard_ratio(c, GEMM)
    assert float(hazard_ratio(c, GEMM)) == pytest.approx(math.exp(GEMM.theta_mean * scalar_T(c, GEMM)), rel=1e-12)


def test_mean_inverse_rr_deterministic_limit():
    g = replace(GEMM, theta_sd=0.0)
    c = np.linspace(0, 200, 30)
    np.testing.assert_allclose(mean_inverse_rr(c, g), 1.0 / hazard_ratio(c, g), rtol=1e-14)


def test_mean_inverse_rr_monte_carlo():
    theta = np.random.default_rng(0).normal(GEMM.theta_mean, GEMM.theta_sd, 100_000)
    for c in np.linspace(0, 300, 20):
        samples = np.exp(-theta * gemm_transform(c, GEMM))
        se = samples.std(ddof=1) / math.sqrt(len(samples))
        assert abs(samples.mean() - float(mean_inverse_rr(c, GEMM))) <= 3 * se + 1e-15


def test_gemm_validation():
    with pytest.raises(ValueError):
        replace(GEMM, alpha=0.0)
    with pytest.raises(ValueError):
        replace(GEMM, theta_sd=-1.0)


# --- avoided deaths

def two_group_demography(n=1):
    pop = np.zeros((n, len(AGE_GROUPS)))
    pop[:, :2] = 1e6
    mort = np.zeros(len(AGE_GROUPS))
    mort[:2] = 0.01
    return DemographyTable(mort, pop)


def test_two_group_scalar_oracle():
    ad = avoided_deaths([60.0], [50.0], two_group_demography(), GEMM)
    d = 2 * 0.01 * 1e6
    expected = d * (scalar_mean_inv_rr(50.0, GEMM) - scalar_mean_inv_rr(60.0, GEMM))
    assert ad.total_mean == pytest.approx(expected, rel=1e-10)
    assert ad.total_mean > 0
    assert ad.total_ci[0] < ad.total_mean < ad.total_ci[1]


def test_no_change_no_deaths():
    ad = avoided_deaths([40.0, 70.0], [40.0, 70.0], two_group_demography(2), GEMM)
    assert np.all(ad.mean == 0.0) and np.all(ad.ci == 0.0)
    assert ad.total_ci == (0.0, 0.0)


@settings(max_examples=50, deadline=None)
@given(c=st.lists(st.tuples(st.floats(0, 300), st.floats(0, 300)), min_size=1, max_size=5))
def test_antisymmetry(c):
    c0, c1 = map(np.array, zip(*c))
    demo = two_group_demography(len(c0))
    a = avoided_deaths(c0, c1, demo, GEMM, n_draws=50)
    b = avoided_deaths(c1, c0, demo, GEMM, n_draws=50)
    np.testing.assert_array_equal(a.mean, -b.mean)


def test_ci_deterministic_and_seeded():
    demo = two_group_demography(3)
    a = avoided_deaths([50, 60, 70], [45, 50, 69], demo, GEMM, seed=4)
    b = avoided_deaths([50, 60, 70], [45, 50, 69], demo, GEMM, seed=4)
    assert a.total_ci == b.total_ci
    np.testing.assert_array_equal(a.ci, b.ci)


def test_demography_validation():
    with pytest.raises(ValueError):
        DemographyTable(np.full(11, 0.01), np.ones((1, 11)))
    with pytest.raises(ValueError):
        DemographyTable(np.full(12, 2.0), np.ones((1, 12)))


def test_mortality_file_round_trip(tmp_path):
    path = tmp_path / "mortality.csv"
    health.write_mortality(health.ILLUSTRATIVE_MORTALITY, path)
    np.testing.assert_array_equal(health.read_mortality(path), health.ILLUSTRATIVE_MORTALITY)
    path.write_text("age_group,mortality\n25-29,0.1\n")
    with pytest.raises(ValueError):
        health.read_mortality(path)


# --- VSL

def test_vsl():
    assert vsl(VslConfig(8.7e6, 100.0, 100.0)) == 8.7e6
    assert vsl(VslConfig(8.7e6, 100.0, 5.0, elasticity=0.0)) == 8.7e6
    # 2015 per-capita GDP, current US$: China 8016.4, United States 56762.7
    value = vsl(VslConfig(8.7e6, 56762.7, 8016.4, 0.8))
    assert value == pytest.approx(8.7e6 * (8016.4 / 56762.7) ** 0.8, rel=1e-15)
    assert round(value / 1e6, 1) == 1.8


# --- single-station world with a linear-only model

def one_station_world(rows=9, cols=9, emissions=1.0):
    rng = np.random.default_rng(0)
    values = rng.uniform(1, 10, size=(K, rows, cols)) * emissions
    values[Channel.ALT:] = rng.uniform(1, 10, size=(3, rows, cols))
    pop = np.full((len(AGE_GROUPS), rows, cols), 100.0)
    regions = np.full((rows, cols), "A", dtype=object)
    regions[:, cols // 2:] = "B"
    return World(values, pop, (Station("s", 2, 3, "c", 40.0),), {"c": 2e6}, regions=regions)


def linear_only_model(h=3):
    model = build_model(HyperParams(half_extent=h, conv_kernel=2, conv_stride=1, pool_kernel=2, pool_stride=1,
                                    filters=2, fc_width=3), seed=0)
    model.set_stats(np.random.default_rng(1).lognormal(1, 0.3, (10, K)), np.linspace(30, 60, 10))
    for name, p in model.parameters().items():
        if not name.startswith("linear"):
            p[...] = 0.0
    model.linear_w[:] = np.linspace(0.5, 1.2, K)
    return model


def test_single_station_md_oracle():
    world = one_station_world()
    model = linear_only_model()
    st_ = world.stations[0]
    demo = health.station_demography(world, world.stations, health.ILLUSTRATIVE_MORTALITY)
    v, ef = 1.8e6, 2.66
    field = health.marginal_damage_field(model, world, world.stations, "IDC", demo, GEMM, v, ef)

    # hand evaluation: every in-grid window cell gets the same derivative
    k = int(Channel.IDC)
    raw = health._raw_windows(world, world.stations, 3)[0]
    c0 = float(model.predict_raw(raw)[0][0])
    g = model.y_scale * model.linear_w[k] / (model.mean_scale[k] * 49)
    d = float(np.sum(health.ILLUSTRATIVE_MORTALITY * 2e6 * demo.population[0] / demo.population[0].sum()))
    md = -v * d * (scalar_mean_inv_rr(c0 + g, GEMM) - scalar_mean_inv_rr(c0, GEMM)) / ef
    assert md > 0
    inside = np.zeros(world.shape, bool)
    inside[0:6, 0:7] = True
    np.testing.assert_array_equal(field.covered, inside)
    np.testing.assert_allclose(field.md[inside], md, rtol=1e-10)
    assert np.all(field.md[~inside] == 0.0)
    assert field.n_uncovered == 81 - 42 and field.n_negative == 0


def test_md_zero_when_theta_zero():
    world = one_station_world()
    demo = health.station_demography(world, world.stations, health.ILLUSTRATIVE_MORTALITY)
    field = health.marginal_damage_field(linear_only_model(), world, world.stations, "RRC", demo,
                                         replace(GEMM, theta_mean=0.0, theta_sd=0.0), 1.8e6, 2.66)
    assert np.all(field.md == 0.0)


def test_md_rejects_geography_sector():
    world = one_station_world()
    demo = health.station_demography(world, world.stations, health.ILLUSTRATIVE_MORTALITY)
    with pytest.raises(ValueError, match="emission"):
        health.marginal_damage_field(linear_only_model(), world, world.stations, "ALT", demo, GEMM, 1.0, 1.0)


def test_clamp_and_negative_count():
    md = np.array([[1.0, -2.0], [0.5, 0.0]])
    f = health.DamageField(Channel.IDC, md, np.ones((2, 2), bool), 2.0)
    assert f.n_negative == 1
    assert f.values(clamp_nonnegative=True).min() == 0.0
    assert f.values().min() == -2.0


# --- totals

def uniform_field(world, m, sector=Channel.IDC, ef=2.0):
    return health.DamageField(sector, np.full(world.shape, m), np.ones(world.shape, bool), ef)


def test_total_damage_factorization_and_regions():
    world = one_station_world()
    s = total_damage(uniform_field(world, 3.0), world)
    co2 = world.values[Channel.IDC].sum() * 2.0
    assert s.total == pytest.approx(3.0 * co2, rel=1e-12)
    assert s.by_region["A"] + s.by_region["B"] == pytest.approx(s.total, rel=1e-12)
    assert s.unmapped_cells == 0


def test_total_damage_zero_emissions_and_linearity():
    world = one_station_world()
    zero = replace(world, values=np.where(np.arange(K)[:, None, None] < 5, 0.0, world.values))
    assert total_damage(uniform_field(zero, 3.0), zero).total == 0.0
    md = np.random.default_rng(0).normal(size=world.shape)
    f = health.DamageField(Channel.TRN, md, np.ones(world.shape, bool), 2.15)
    scaled = replace(world, values=world.values * 3.0)
    assert total_damage(f, scaled).total == pytest.approx(3.0 * total_damage(f, world).total, rel=1e-12)


def test_total_damage_unmapped_bucket():
    world = one_station_world()
    regions = world.regions.copy()
    regions[0, 0] = None
    s = total_damage(uniform_field(world, 1.0), world, regions)
    assert s.unmapped_cells == 1
    assert s.by_region["unmapped"] == pytest.approx(world.values[Channel.IDC, 0, 0] * 2.0)
    assert sum(s.by_region.values()) == pytest.approx(s.total, rel=1e-12)


def test_uncovered_emissions_reported():
    world = one_station_world()
    covered = np.ones(world.shape, bool)
    covered[8, 8] = False
    f = health.DamageField(Channel.IDC, np.ones(world.shape), covered, 1.0)
    s = total_damage(f, world)
    assert s.uncovered_emissions == world.values[Channel.IDC, 8, 8]


# --- distance curve

def test_distance_curve_closure():
    world = one_station_world(rows=15, cols=15)
    world = replace(world, stations=(Station("a", 7, 7, "c", 1.0), Station("b", 1, 12, "c", 1.0)))
    demo = health.station_demography(world, world.stations, health.ILLUSTRATIVE_MORTALITY)
    model = linear_only_model(h=5)
    contrib = health.model_damage_contributions(model, world, world.stations, "IDC", demo, GEMM, 1.8e6)
    curve = damage_by_distance(contrib, world, [10.0, 30.0, 70.0, 110.0])
    field = field_from_contributions(contrib, world, 2.66)
    assert curve[-1][1] == pytest.approx(total_damage(field, world).total, rel=1e-12)
    values = [v for _, v in curve]
    assert values == sorted(values)
    with pytest.raises(ValueError):
        damage_by_distance(contrib, world, [20.0])


def test_default_edges():
    assert health.default_edges_km(30) == [110.0, 210.0, 310.0, 410.0, 510.0, 610.0]
    assert health.default_edges_km(10) == [110.0, 210.0]


def test_contributions_sum_overlapping_stations():
    world = one_station_world()
    world = replace(world, stations=(Station("a", 4, 4, "c", 1.0), Station("b", 4, 5, "c", 1.0)))
    demo = DemographyTable(np.full(12, 0.01), np.full((2, 12), 1000.0))
    grads = np.full((2, 3, 3), 0.01)
    contrib = damage_contributions(world, world.stations, "IDC", 1, np.array([40.0, 60.0]), grads, demo, GEMM, 1.0)
    field = field_from_contributions(contrib, world, 1.0)
    assert field.md[4, 4] == pytest.approx(contrib.damage[0, 1, 1] + contrib.damage[1, 1, 0], rel=1e-14)


# --- scenarios

def test_scenario_p0_and_zero_sector():
    world = one_station_world()
    zero = world.values.copy()
    zero[Channel.SVC] = 0.0
    world = replace(world, values=zero)
    model = linear_only_model()
    c0 = health.baseline_concentration(model, world, world.stations)
    np.testing.assert_array_equal(health.scenario_concentration(model, world, world.stations, "IDC", 0.0), c0)
    np.testing.assert_array_equal(health.scenario_concentration(model, world, world.stations, "SVC", 1.0), c0)
    with pytest.raises(ValueError):
        health.scenario_concentration(model, world, world.stations, "TEM", 0.1)
    with pytest.raises(ValueError):
        health.scenario_concentration(model, world, world.stations, "IDC", 1.5)


def test_sweep_rows():
    assert health.sweep_fractions() == [0.02, 0.04, 0.06, 0.08, 0.1, 0.12, 0.14, 0.16, 0.18, 0.2]
    world = one_station_world()
    demo = health.station_demography(world, world.stations, health.ILLUSTRATIVE_MORTALITY)
    rows = health.curtailment_sweep(linear_only_model(), world, world.stations, "IDC", demo, GEMM,
                                    {"s": 1.0}, fractions=[0.0] + health.sweep_fractions(), n_draws=200)
    assert len(rows) == 11
    assert rows[0].avoided_deaths == 0.0
    deaths = [r.avoided_deaths for r in rows]
    assert deaths == sorted(deaths) and deaths[-1] > 0
