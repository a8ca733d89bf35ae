import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg

import oracles
from sepkit import exactevolve as ee
from sepkit import genpoly as gp
from sepkit import kernels as kn


def two_site_kernel(rate=1 / 3):
    import scipy.sparse as sp
    p = sp.csr_matrix(np.array([[1 - rate, rate], [rate, 1 - rate]]))
    return kn.Kernel(p=p, kind="custom", level=np.zeros(2, dtype=int))


def point_mass(n, mask):
    return gp.SubsetDistribution.point_mass([(mask >> k) & 1 for k in range(n)])


def path_generator(n, rate=0.5):
    edges = np.array([[i, i + 1] for i in range(n - 1)])
    return ee.ExclusionGenerator(n, edges, np.full(n - 1, rate))


def dense(gen):
    return oracles.dense_exclusion_generator(gen.n, [(int(i), int(j), r) for (i, j), r in zip(gen.edges, gen.rates)],
                                             [(x, r, b) for x, (r, b) in
                                              enumerate(zip(gen.reservoir_rates, gen.reservoir_density)) if r > 0])


# ---------------------------------------------------------------- build_generator


def test_two_site_generator_has_single_edge():
    g = ee.build_generator(two_site_kernel())
    assert g.edges.tolist() == [[0, 1]]
    assert g.rates.tolist() == pytest.approx([1 / 3])
    assert not g.open


def test_line_radius_one_edges():
    k = kn.build_line(1, {1: 0.5, -1: 0.5})
    g = ee.build_generator(k)
    coords = sorted(tuple(sorted(k.coord[[i, j]])) for i, j in g.edges)
    assert coords == [(-1, 0), (0, 1)]
    assert np.allclose(g.rates, 0.5)


def test_depth_one_tree_edges():
    g = ee.build_generator(kn.build_binary_tree(1))
    assert g.n == 6
    assert len(g.edges) == 5
    assert np.allclose(g.rates, 1 / 3)


def test_site_cap():
    with pytest.raises(ValueError):
        ee.build_generator(kn.build_binary_tree(3), cap=20)


def test_outflow_counts_discordant_edges():
    g = path_generator(4, 0.5)
    assert g.outflow(0b0101) == pytest.approx(1.5)
    assert g.outflow(0b0011) == pytest.approx(0.5)
    assert g.outflow(0) == 0.0


def test_killed_kernel_requires_alpha():
    k = kn.killed_truncation(kn.build_line(2, {1: 0.5, -1: 0.5}))
    with pytest.raises(ValueError):
        ee.build_generator(k)
    with pytest.raises(ValueError):
        ee.build_generator(k, np.linspace(0.0, 1.0, 5))  # reservoirs would need densities outside [0,1]


def test_generator_json():
    d = ee.build_generator(kn.build_binary_tree(1)).to_json()
    assert d["n"] == 6 and len(d["edges"]) == 5


# ---------------------------------------------------------------- evolve


def test_evolve_at_zero_is_identity():
    d = gp.from_product([0.2, 0.7, 0.4])
    out = ee.evolve(d, path_generator(3), 0.0)
    assert np.array_equal(out.weights, d.weights)


@pytest.mark.parametrize("t", [0.1, 1.0, 3.0, 20.0])
def test_two_site_closed_form(t):
    g = ee.build_generator(two_site_kernel())
    out = ee.evolve(point_mass(2, 0b01), g, t)
    assert ee.occupation_probabilities(out)[0] == pytest.approx(oracles.two_state_heat(t, 1 / 3), abs=1e-12)


def test_evolve_matches_dense_expm():
    g = ee.build_generator(kn.build_binary_tree(1))
    d = gp.from_product([0.1, 0.9, 0.5, 0.3, 0.6, 0.2])
    out = ee.evolve(d, g, 1.7)
    ref = linalg.expm(1.7 * dense(g)) @ d.weights
    assert np.max(np.abs(out.weights - ref)) < 1e-12


def test_evolve_with_reservoirs_matches_dense_expm():
    k = kn.killed_truncation(kn.build_line(2, {1: 0.5, -1: 0.5}))
    a = np.linspace(0.3, 0.6, 5)
    g = ee.build_generator(k, a)
    d = point_mass(5, 0b10101)
    out = ee.evolve(d, g, 2.5)
    ref = linalg.expm(2.5 * dense(g)) @ d.weights
    assert np.max(np.abs(out.weights - ref)) < 1e-12


def test_particle_count_preserved():
    g = path_generator(5)
    d = gp.from_product([0.1, 0.5, 0.9, 0.3, 0.7])
    out = ee.evolve(d, g, 4.0)
    assert np.max(np.abs(gp.diagonalize(out).coeffs - gp.diagonalize(d).coeffs)) <= 1e-12


def test_semigroup_property():
    g = ee.build_generator(kn.build_binary_tree(1))
    d = gp.from_product([0.1, 0.9, 0.5, 0.3, 0.6, 0.2])
    a = ee.evolve(ee.evolve(d, g, 0.7), g, 2.1)
    b = ee.evolve(d, g, 2.8)
    assert ee.tv_distance(a, b) < 1e-11


def test_nonnegative_before_renormalization():
    g = path_generator(6)
    out = ee.evolve(point_mass(6, 0b000111), g, 50.0)
    assert out.info["min_weight_before_renorm"] >= -1e-15
    assert abs(out.info["renorm_delta"]) < 1e-10
    assert out.info["chunks"] > 1


def test_trace_lines():
    buf = io.StringIO()
    ee.evolve(gp.from_product([0.3, 0.6, 0.5]), path_generator(3), 200.0, trace=buf)
    lines = [json.loads(s) for s in buf.getvalue().splitlines()]
    assert len(lines) >= 2
    assert set(lines[0]) == {"step", "t", "tv_change", "rayleigh_min", "realroot_margin"}
    assert lines[-1]["t"] == pytest.approx(200.0)


def test_negative_time_rejected():
    with pytest.raises(ValueError):
        ee.evolve(gp.from_product([0.5]), ee.ExclusionGenerator(1, np.zeros((0, 2), int), np.zeros(0)), -1.0)


# ---------------------------------------------------------------- Trotter


def test_trotter_single_edge_is_exact():
    g = ee.build_generator(two_site_kernel(0.4))
    d = gp.from_product([0.9, 0.2])
    a = ee.evolve_stirring_products(d, g, 2.3, 1)
    b = ee.evolve(d, g, 2.3)
    assert ee.tv_distance(a, b) < 1e-14


def test_trotter_zero_time_is_identity():
    d = gp.from_product([0.9, 0.2, 0.4])
    out = ee.evolve_stirring_products(d, path_generator(3), 0.0, 3)
    assert np.allclose(out.weights, d.weights, atol=1e-16)


def test_trotter_error_halves_with_steps():
    g = path_generator(4, 0.5)
    d = point_mass(4, 0b0011)
    ref = ee.evolve(d, g, 1.0, tol=1e-14)
    gaps = [ee.tv_distance(ee.evolve_stirring_products(d, g, 1.0, s), ref) for s in (8, 16, 32, 64)]
    ratios = [gaps[k] / gaps[k + 1] for k in range(3)]
    assert all(1.8 < r < 2.2 for r in ratios), ratios


def test_trotter_records_edge_order():
    out = ee.evolve_stirring_products(gp.from_product([0.5] * 3), path_generator(3), 1.0, 2)
    assert out.info["edge_order"] == [(0, 1), (1, 2)]


# ---------------------------------------------------------------- stationary


def test_stationary_two_sites_from_point_mass():
    out = ee.stationary_limit(point_mass(2, 0b01), ee.build_generator(two_site_kernel()))
    assert np.allclose(out.weights, [0, 0.5, 0.5, 0], atol=1e-10)


def test_stationary_path_matches_sector_chain():
    g = path_generator(3, 0.5)
    d = gp.from_product([0.2, 0.5, 0.8])
    out = ee.stationary_limit(d, g, tol=1e-12)
    ref = oracles.sector_chain_stationary(3, [(0, 1, 0.5), (1, 2, 0.5)], d.weights)
    assert np.max(np.abs(out.weights - ref)) < 1e-10
    assert np.max(np.abs(ee.sector_average(d).weights - ref)) < 1e-14
    assert np.max(np.abs(gp.diagonalize(out).coeffs - gp.diagonalize(d).coeffs)) < 1e-12


def test_reservoir_stationary_density_is_alpha():
    k = kn.killed_truncation(kn.build_binary_tree(1))
    a = kn.tree_alpha(0.2, 0.9).values(k)
    out = ee.stationary_limit(gp.from_product([0.5] * 6), ee.build_generator(k, a), tol=1e-12)
    assert np.max(np.abs(ee.occupation_probabilities(out) - a)) < 1e-10


# ---------------------------------------------------------------- properties

marg = st.one_of(st.sampled_from([0.0, 1.0]), st.floats(0.01, 0.99))


@settings(max_examples=25, deadline=None)
@given(st.lists(marg, min_size=3, max_size=6), st.sampled_from([0.1, 1.0, 10.0]))
def test_strong_rayleigh_preserved(ps, t):
    g = path_generator(len(ps), 0.5)
    out = ee.evolve(gp.from_product(ps), g, t)
    ray = gp.rayleigh_check(out, n_points=30, seed=1)
    assert ray.worst >= -1e-10
    root = gp.real_rooted(gp.diagonalize(out))
    assert root.verdict and root.margin <= 1e-8
    cov = gp.covariance_matrix(out)
    assert np.max(cov - np.diag(np.diag(cov))) <= 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 63), st.floats(0.0, 8.0))
def test_duality_one_point(mask, t):
    k = kn.build_binary_tree(1)
    g = ee.build_generator(k)
    out = ee.evolve(point_mass(6, mask), g, t)
    eta = np.array([(mask >> x) & 1 for x in range(6)], float)
    pred = kn.heat_kernel(k, t) @ eta
    assert np.max(np.abs(ee.occupation_probabilities(out) - pred)) <= 1e-8


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=5), st.floats(0.0, 5.0))
def test_mass_and_nonnegativity(ps, t):
    out = ee.evolve(gp.from_product(ps), path_generator(len(ps)), t)
    assert out.info.get("min_weight_before_renorm", 0.0) >= -1e-15
    assert abs(out.info["renorm_delta"]) <= 1e-10
