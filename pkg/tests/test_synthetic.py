import math
from dataclasses import replace

import numpy as np
import pytest

from cobenefit import grid, synthetic
from cobenefit.grid import AGE_GROUPS, EMISSION_CHANNELS, K, Channel, Station, World
from cobenefit.synthetic import (OracleKernel, generate_world, oracle_concentration, oracle_gradient_window,
                                 oracle_marginal)

QUIET = OracleKernel(noise_frac=0.0)


@pytest.fixture(scope="module")
def world():
    return generate_world(3, size=(30, 30), n_stations=50)


def test_same_seed_same_world():
    a, b = generate_world(11, size=(20, 20), n_stations=30), generate_world(11, size=(20, 20), n_stations=30)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.stations == b.stations
    assert a.city_population == b.city_population
    assert generate_world(12, size=(20, 20), n_stations=30).stations != a.stations


def test_every_cell_hosts_a_station():
    w = generate_world(0, size=(8, 8), n_stations=64)
    assert len({(s.row, s.col) for s in w.stations}) == 64
    with pytest.raises(ValueError):
        generate_world(0, size=(8, 8), n_stations=65)


def test_national_totals(world):
    for ch in EMISSION_CHANNELS:
        total = synthetic.DEFAULT_NATIONAL_TOTALS[ch]
        assert abs(world.values[ch].sum() - total) / total < 0.01
    custom = generate_world(3, size=(20, 20), n_stations=10, national_totals={"IDC": 5.0e6})
    assert custom.values[Channel.IDC].sum() == pytest.approx(5.0e6, rel=1e-9)


def test_world_fields_valid(world):
    assert world.values.shape == (K, 30, 30)
    assert world.population.shape == (len(AGE_GROUPS), 30, 30)
    assert np.all(world.values[list(EMISSION_CHANNELS)] >= 0)
    assert set(world.regions.ravel()) <= set(synthetic.REGION_NAMES)
    assert all(s.city_id in world.city_population for s in world.stations)
    grid.compute_station_weights(world.stations, world.city_population)


def test_stations_read_noisy_oracle(world):
    k = OracleKernel()
    ratios = np.array([s.pm25 / oracle_concentration(world, s, k) for s in world.stations])
    assert np.all(ratios > 0)
    assert abs(ratios.std() - k.noise_frac) < 0.02


def tiny_world(values=None, station=(2, 2)):
    vals = np.zeros((K, 5, 5)) if values is None else values
    vals[Channel.ALT] = 100.0
    vals[Channel.TEM] = 15.0
    vals[Channel.PCP] = 800.0
    pop = np.ones((len(AGE_GROUPS), 5, 5))
    return World(vals, pop, (Station("s", *station, "c", 1.0),), {"c": 1.0})


def test_zero_emissions_is_geography_baseline():
    w = tiny_world()
    expected = QUIET.baseline - 0.004 * 100 + 0.4 * 15 - 0.01 * 800
    assert oracle_concentration(w, "s", QUIET) == pytest.approx(expected, rel=1e-14)


def test_single_source_at_station():
    vals = np.zeros((K, 5, 5))
    vals[Channel.IDC, 2, 2] = 1.0
    k = replace(QUIET, beta=(0.0, 2.0, 0.0, 0.0, 0.0))
    base = oracle_concentration(tiny_world(), "s", k)
    assert oracle_concentration(tiny_world(vals), "s", k) == pytest.approx(base + 2.0, rel=1e-14)


def test_linearity(world):
    doubled = world.values.copy()
    doubled[list(EMISSION_CHANNELS)] *= 2
    w2 = replace(world, values=doubled)
    for s in world.stations[:5]:
        base = oracle_concentration(replace(world, values=np.where(
            np.isin(np.arange(K), list(EMISSION_CHANNELS))[:, None, None], 0.0, world.values)), s, QUIET)
        e1 = oracle_concentration(world, s, QUIET) - base
        e2 = oracle_concentration(w2, s, QUIET) - base
        assert e2 == pytest.approx(2 * e1, rel=1e-12)


def test_marginal_values():
    w = tiny_world()
    k = OracleKernel(decay_km=10.0)
    assert oracle_marginal(w, "s", (2, 2), "RRC", k) == k.beta[0]
    assert oracle_marginal(w, "s", (2, 3), "IDC", k) == pytest.approx(k.beta[1] / math.e, rel=1e-14)
    with pytest.raises(ValueError, match="geography"):
        oracle_marginal(w, "s", (2, 2), "TEM", k)


def test_marginal_matches_finite_difference(world):
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = world.stations[rng.integers(len(world.stations))]
        cell = (int(rng.integers(30)), int(rng.integers(30)))
        ch = EMISSION_CHANNELS[rng.integers(5)]
        h = 1.0
        up, down = world.values.copy(), world.values.copy()
        up[ch][cell] += h
        down[ch][cell] -= h
        fd = (oracle_concentration(replace(world, values=up), s, QUIET)
              - oracle_concentration(replace(world, values=down), s, QUIET)) / (2 * h)
        an = oracle_marginal(world, s, cell, ch, QUIET)
        assert abs(fd - an) <= 1e-10 * max(abs(an), 1e-6) + 1e-12


def test_marginals_independent_of_emission_level(world):
    s = world.stations[0]
    scaled = replace(world, values=world.values * 3.0)
    assert oracle_marginal(world, s, (4, 5), "SVC", QUIET) == oracle_marginal(scaled, s, (4, 5), "SVC", QUIET)


def test_gradient_window_matches_pointwise(world):
    s = world.stations[7]
    g = oracle_gradient_window(world, s, 4, QUIET)
    assert g.shape == (K, 9, 9)
    assert np.all(g[Channel.ALT:] == 0.0)
    for i in range(9):
        for j in range(9):
            r, c = s.row + i - 4, s.col + j - 4
            if world.contains(r, c):
                assert g[Channel.TRN, i, j] == pytest.approx(oracle_marginal(world, s, (r, c), "TRN", QUIET), rel=1e-14)
            else:
                assert g[Channel.TRN, i, j] == 0.0


def test_saturating_kernel_marginal():
    vals = np.zeros((K, 5, 5))
    vals[Channel.IDC] = 1.0
    w = tiny_world(vals)
    k = replace(QUIET, beta=(0.0, 2.0, 0.0, 0.0, 0.0), saturation=5.0)
    up = vals.copy()
    up[Channel.IDC, 1, 1] += 1e-4
    fd = (oracle_concentration(tiny_world(up), "s", k) - oracle_concentration(w, "s", k)) / 1e-4
    assert fd == pytest.approx(oracle_marginal(w, "s", (1, 1), "IDC", k), rel=1e-4)


def test_kernel_validation():
    with pytest.raises(ValueError):
        OracleKernel(beta=(1.0, -1.0, 0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        OracleKernel(decay_km=0.0)


def test_synthetic_files_round_trip(tmp_path):
    w = generate_world(2, size=(12, 12), n_stations=10)
    k = OracleKernel(decay_km=40.0, saturation=12.0)
    synthetic.write_synthetic_world(w, k, tmp_path)
    assert synthetic.read_kernel(tmp_path) == k
    back = grid.read_world(tmp_path)
    assert back.stations == w.stations
    assert back.values.tobytes() == w.values.tobytes()


def test_support_cells_limits_kernel(world):
    k = OracleKernel(noise_frac=0.0, support_cells=3)
    s = world.stations[0]
    far = (s.row, s.col + 4) if world.contains(s.row, s.col + 4) else (s.row, s.col - 4)
    near = (s.row + 1, s.col) if world.contains(s.row + 1, s.col) else (s.row - 1, s.col)
    assert oracle_marginal(world, s, far, "IDC", k) == 0.0
    assert oracle_marginal(world, s, near, "IDC", k) > 0.0
    g = oracle_gradient_window(world, s, 5, k)
    assert np.all(g[:, :2, :] == 0) and np.all(g[:, :, -2:] == 0)
    # a kernel confined to the window makes the window-sum exact
    inside = OracleKernel(noise_frac=0.0, support_cells=5)
    grad = oracle_gradient_window(world, s, 5, inside)
    stack = grid.extract_window(world, s, 5)
    e_term = sum((grad[ch] * stack.raw[ch]).sum() for ch in EMISSION_CHANNELS)
    geo_free = replace(inside, geo_coef=(0.0, 0.0, 0.0), baseline=0.0)
    assert e_term == pytest.approx(oracle_concentration(world, s, geo_free), rel=1e-9)
    with pytest.raises(ValueError):
        OracleKernel(support_cells=-1)


def test_kernel_dict_round_trip():
    k = OracleKernel(support_cells=10, saturation=50.0)
    assert OracleKernel.from_dict(k.to_dict()) == k


def test_corridors_follow_links():
    field = synthetic._corridors((30, 30), [(5, 5), (5, 25), (25, 15)], [1.0, 1.0, 1.0], 1.0)
    assert field[5, 15] > 0.9  # midway along the top link
    assert field[15, 2] < 1e-6 < field[15, 10]
