import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sepkit import kernels as K
from oracles import dense_heat, tree_green_closed, two_state_heat, window_sup_closed_form


@pytest.fixture(scope="module")
def tree14():
    return K.build_binary_tree(14)


@pytest.fixture(scope="module")
def killed14(tree14):
    return K.killed_truncation(tree14)


# ---------------------------------------------------------------- construction


def test_depth_zero_tree():
    k = K.build_binary_tree(0)
    assert k.n == 2
    assert k.p[0, 1] == pytest.approx(1 / 3, abs=1e-15)
    np.testing.assert_allclose(k.diag, [2 / 3, 2 / 3], atol=1e-15)


def test_depth_two_counts():
    k = K.build_binary_tree(2)
    assert k.n == 14
    assert np.sum((k.side == K.LEFT) & (k.level == 1)) == 2


@pytest.mark.parametrize("depth", [0, 1, 3, 6])
def test_level_sizes(depth):
    k = K.build_binary_tree(depth)
    for side in (K.LEFT, K.RIGHT):
        for lvl in range(depth + 1):
            assert np.sum((k.side == side) & (k.level == lvl)) == 2 ** lvl


@pytest.mark.parametrize("depth", [0, 2, 5])
def test_tree_invariants(depth):
    k = K.build_binary_tree(depth)
    dense = k.p.toarray()
    assert np.max(np.abs(dense - dense.T)) == 0.0
    np.testing.assert_allclose(dense.sum(axis=1), 1.0, atol=1e-12)
    # interior vertices: three neighbours at 1/3
    inner = k.level < depth
    assert np.all(np.count_nonzero(dense[inner] - np.diag(np.diag(dense))[inner], axis=1) == 3)


def test_tree_connected():
    from scipy.sparse.csgraph import connected_components
    k = K.build_binary_tree(4)
    assert connected_components(k.adjacency(), directed=False)[0] == 1


def test_line_nearest_neighbour():
    k = K.build_line(1, {1: 0.5, -1: 0.5})
    dense = k.p.toarray()
    i0 = k.site(coord=0)
    assert dense[i0, k.site(coord=1)] == 0.5 and dense[i0, k.site(coord=-1)] == 0.5
    assert dense[k.site(coord=1), k.site(coord=1)] == 0.5


def test_line_interior_row():
    k = K.build_line(5, {1: 0.5, -1: 0.5})
    row = k.p.toarray()[k.site(coord=0)]
    expected = np.zeros(11)
    expected[[4, 6]] = 0.5
    np.testing.assert_array_equal(row, expected)


def test_line_two_step_law():
    k = K.build_line(2, {1: 0.25, -1: 0.25, 2: 0.25, -2: 0.25})
    np.testing.assert_array_equal(k.p.toarray()[k.site(coord=0)], [0.25, 0.25, 0, 0.25, 0.25])


def test_line_rejects_asymmetric():
    with pytest.raises(ValueError):
        K.build_line(3, {1: 0.6, -1: 0.4})


def test_line_tail_mass_reported():
    k = K.build_line(3, {1: 0.3, -1: 0.3})
    assert k.params["tail_mass"] == pytest.approx(0.4)
    np.testing.assert_allclose(k.row_sums, 1.0, atol=1e-12)


def test_killed_truncation():
    k = K.killed_truncation(K.build_binary_tree(0))
    np.testing.assert_allclose(k.row_sums, [1 / 3, 1 / 3], atol=1e-15)
    line = K.killed_truncation(K.build_line(1, {1: 0.5, -1: 0.5}))
    assert line.row_sums[line.site(coord=1)] == pytest.approx(0.5)
    assert line.row_sums[line.site(coord=0)] == pytest.approx(1.0)


def test_killed_keeps_interior_rows(tree14, killed14):
    inner = tree14.level < 14
    diff = (tree14.p - killed14.p).tocsr()
    assert abs(diff[inner]).sum() == 0


def test_json_round_trip(tmp_path):
    k = K.build_binary_tree(3)
    path = tmp_path / "k.json"
    K.save_kernel(k, path)
    back = K.load_kernel(path)
    assert (back.p != k.p).nnz == 0
    obj = json.loads(path.read_text())
    assert {"sites", "edges", "holding"} <= set(obj)
    assert obj["sites"][0]["side"] == "L" and obj["sites"][0]["level"] == 0


def test_tree_distance_matches_bfs():
    k = K.build_binary_tree(4)
    rng = np.random.default_rng(1)
    for x, y in rng.integers(0, k.n, size=(40, 2)):
        assert K.tree_distance(k, int(x), int(y)) == k.distance(int(x), int(y))


# ---------------------------------------------------------------- heat kernel


def test_heat_identity_at_zero():
    k = K.build_binary_tree(1)
    np.testing.assert_array_equal(K.heat_kernel(k, 0.0), np.eye(k.n))


@pytest.mark.parametrize("t", [0.1, 1.0, 7.5])
def test_heat_two_state(t):
    k = K.build_binary_tree(0)
    assert K.heat_kernel(k, t)[0, 0] == pytest.approx(two_state_heat(t, 1 / 3), abs=1e-12)


@pytest.mark.parametrize("t", [0.5, 3.0, 40.0])
def test_heat_matches_expm(t):
    k = K.build_line(3, {1: 0.25, -1: 0.25, 2: 0.2, -2: 0.2})
    got = K.heat_kernel(k, t, tol=1e-13)
    np.testing.assert_allclose(got, dense_heat(k.p.toarray(), t), atol=1e-11)
    np.testing.assert_allclose(got.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 10.0), st.floats(0.0, 10.0))
def test_heat_semigroup(t, s):
    k = K.build_line(3, {1: 0.5, -1: 0.5})  # 7 sites
    k8 = K.build_line(2, {1: 0.3, -1: 0.3, 2: 0.2, -2: 0.2})
    for ker in (k, k8, K.build_binary_tree(1)):
        lhs = K.heat_kernel(ker, t + s, tol=1e-14)
        rhs = K.heat_kernel(ker, t, tol=1e-14) @ K.heat_kernel(ker, s, tol=1e-14)
        assert np.max(np.abs(lhs - rhs)) <= 1e-12


# ---------------------------------------------------------------- green functions


def test_green_closed_form(killed14):
    x = killed14.site("L", 0)
    row = K.green_row(killed14, x)
    near = killed14.level <= 6
    d = np.array([K.tree_distance(killed14, x, y) for y in np.flatnonzero(near)])
    np.testing.assert_allclose(row[near], tree_green_closed(d), atol=1e-3)
    assert K.green_function(killed14, x, x) == pytest.approx(2.0, abs=1e-3)


def test_green_reciprocity(killed14):
    rng = np.random.default_rng(3)
    xs = rng.choice(np.flatnonzero(killed14.level <= 4), 6, replace=False)
    for x in xs:
        for y in xs:
            assert abs(K.green_function(killed14, x, y) - K.green_function(killed14, y, x)) <= 1e-10


def test_green_monotone_in_depth():
    a, b = K.killed_truncation(K.build_binary_tree(6)), K.killed_truncation(K.build_binary_tree(8))
    x_a, x_b = a.site("L", 2), b.site("L", 2)
    for side, lvl, slot in [("L", 2, 0), ("L", 4, 3), ("R", 0, 0), ("R", 5, 9)]:
        ya, yb = a.site(side, lvl, slot), b.site(side, lvl, slot)
        ga, gb = K.green_function(a, x_a, ya), K.green_function(b, x_b, yb)
        closed = tree_green_closed(K.tree_distance(b, x_b, yb))
        assert ga <= gb + 1e-12 and gb <= closed + 1e-12


def test_green_rejects_stochastic():
    with pytest.raises(K.RecurrentKernelError):
        K.green_function(K.build_binary_tree(3), 0, 0)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_window_sup_sparse_matches_closed_form(n):
    killed = K.killed_truncation(K.build_binary_tree(n + 12))
    for win, pred in [(K.SiteWindow.below(n), lambda s, l: l < n),
                      (K.SiteWindow.below(n, "L"), lambda s, l: s == "L" and l < n),
                      (K.SiteWindow.at_level(n, "L"), lambda s, l: s == "L" and l == n)]:
        got = K.green_window_sup(killed, win).value
        assert got == pytest.approx(window_sup_closed_form(pred, n), abs=2e-3)


@pytest.mark.parametrize("n", [1, 3, 5, 8])
def test_window_sup_level_chain(n):
    got = K.tree_green_window_sup(60, K.SiteWindow.below(n)).value
    assert got == pytest.approx(3 * n, abs=1e-9)
    got = K.tree_green_window_sup(60, K.SiteWindow.at_level(n, "L")).value
    assert got == pytest.approx(3 - 2.0 ** -n, abs=1e-9)
    got = K.tree_green_window_sup(60, K.SiteWindow.below(n, "L")).value
    assert got == pytest.approx(window_sup_closed_form(lambda s, l: s == "L" and l < n, n), abs=1e-9)


def test_level_chain_agrees_with_sparse():
    win = K.SiteWindow.below(3, "L")
    sparse = K.green_window_sums(K.killed_truncation(K.build_binary_tree(10)), win)
    q, states = K.tree_level_chain(10)
    chain = np.linalg.solve(np.eye(len(states)) - q,
                            [1.0 if win.contains_level(s, l) else 0.0 for s, l in states])
    k = K.build_binary_tree(10)
    for i, (s, l) in enumerate(states):
        sites = np.flatnonzero((k.side == s) & (k.level == l))
        np.testing.assert_allclose(sparse[sites], chain[i], atol=1e-10)


# ---------------------------------------------------------------- harmonic profiles


def test_alpha_left_endpoint():
    assert K.tree_alpha(0, 1).at(K.LEFT, 0) == pytest.approx(1 / 3)


def test_alpha_constant():
    k = K.build_binary_tree(3)
    np.testing.assert_allclose(K.tree_alpha(0.4, 0.4).values(k), 0.4)


def test_alpha_neighbour_average():
    prof = K.tree_alpha(0, 1)
    avg = (prof.at(K.RIGHT, 0) + 2 * prof.at(K.LEFT, 1)) / 3
    assert avg == pytest.approx(1 / 3, abs=1e-15)
    assert prof.at(K.RIGHT, 0) == pytest.approx(2 / 3)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_alpha_harmonic_in_interior(lam, rho):
    k = K.build_binary_tree(6)
    assert K.harmonicity_residual(k, K.tree_alpha(lam, rho)) <= 1e-12


def test_residual_constant_is_zero():
    assert K.harmonicity_residual(K.build_binary_tree(4), 0.3) == 0.0


def test_residual_indicator():
    k = K.build_binary_tree(3)
    a = np.zeros(k.n)
    x = k.site("L", 1)
    a[x] = 1.0
    nb = k.site("L", 0)
    assert abs(k.p[nb] @ a - a[nb]) >= 1 / 3 - 1e-15
    assert K.harmonicity_residual(k, a) >= 1 / 3 - 1e-15


@pytest.mark.parametrize("lam,rho", [(0, 1), (0.2, 0.7), (0.9, 0.1)])
def test_dirichlet_sum_deep(lam, rho):
    res = K.dirichlet_sum(K.build_binary_tree(18), K.tree_alpha(lam, rho))
    assert res.value == pytest.approx(2 * (rho - lam) ** 2 / 9, abs=1e-6)
    assert res.value + res.tail_estimate == pytest.approx(2 * (rho - lam) ** 2 / 9, abs=1e-9)


def test_dirichlet_constant():
    assert K.dirichlet_sum(K.build_binary_tree(5), 0.5).value == 0.0


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_dirichlet_mirror(lam, rho):
    k = K.build_binary_tree(8)
    a = K.dirichlet_sum(k, K.tree_alpha(lam, rho)).value
    b = K.dirichlet_sum(k, K.tree_alpha(rho, lam)).value
    assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


def test_build_path():
    k = K.build_path(6, 0.5)
    assert k.n == 6
    assert np.allclose(k.row_sums, 1.0)
    assert len(k.edges()[0]) == 5
    assert k.p[0, 0] == pytest.approx(0.5) and k.p[2, 2] == 0.0
    kk = K.killed_truncation(k)
    assert kk.leak[0] == pytest.approx(0.5) and kk.leak[2] == pytest.approx(0.0)
    with pytest.raises(ValueError):
        K.build_path(1)
