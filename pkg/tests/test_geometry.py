import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gvecchia import build_geometry, maxmin_order
from gvecchia.geometry import (
    GeometryModel,
    coordinate_order,
    min_separation_filter,
    nearest_neighbors,
    ordered_neighbors,
)

from ._oracles import brute_knn, brute_maxmin


def test_maxmin_three_points_1d():
    perm = maxmin_order([0.0, 0.5, 1.0])
    np.testing.assert_array_equal(perm, [1, 0, 2])


def test_maxmin_single_point():
    np.testing.assert_array_equal(maxmin_order([[0.3, 0.2]]), [0])


def test_maxmin_empty_rejected():
    with pytest.raises(ValueError):
        maxmin_order(np.empty((0, 2)))


def test_maxmin_grid_with_center():
    pts = np.array([[0, 0], [1, 0], [0, 1], [1, 1], [0.5, 0.5]], float)
    perm = maxmin_order(pts)
    assert perm[0] == 4
    np.testing.assert_array_equal(perm, brute_maxmin(pts))


@pytest.mark.parametrize("seed", range(6))
def test_maxmin_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = 30
    pts = rng.uniform(size=(n, 2))
    obs = rng.uniform(size=n) < 0.6
    perm = maxmin_order(pts, obs)
    np.testing.assert_array_equal(perm, brute_maxmin(pts, obs))


@pytest.mark.parametrize("seed", range(4))
def test_maxmin_greedy_property(seed):
    rng = np.random.default_rng(100 + seed)
    n = 30
    pts = rng.uniform(size=(n, 2))
    obs = rng.uniform(size=n) < 0.5
    perm = maxmin_order(pts, obs)
    assert sorted(perm) == list(range(n))
    k_obs = obs.sum()
    assert obs[perm[:k_obs]].all() and not obs[perm[k_obs:]].any()
    for k in range(1, n):
        placed = pts[perm[:k]]
        group = obs[perm[k]]
        rest = [j for j in perm[k:] if obs[j] == group]
        dmin = lambda j: np.min(np.linalg.norm(placed - pts[j], axis=1))
        assert dmin(perm[k]) >= max(dmin(j) for j in rest) - 1e-15


def test_maxmin_larger_uses_same_rule():
    rng = np.random.default_rng(7)
    pts = rng.uniform(size=(400, 2))
    perm = maxmin_order(pts)
    assert sorted(perm) == list(range(400))
    # monotone non-increasing fill distance
    d = [np.min(np.linalg.norm(pts[perm[:k]] - pts[perm[k]], axis=1)) for k in range(1, 400)]
    assert np.all(np.diff(d) <= 1e-14)


def test_coordinate_order_examples():
    np.testing.assert_array_equal(coordinate_order([0.9, 0.1, 0.5]), [1, 2, 0])
    np.testing.assert_array_equal(coordinate_order([0.1, 0.2, 0.3]), [0, 1, 2])
    x = np.random.default_rng(1).uniform(size=100)
    np.testing.assert_array_equal(coordinate_order(x), sorted(range(100), key=lambda i: x[i]))


def test_coordinate_order_rejects_2d():
    with pytest.raises(ValueError):
        coordinate_order(np.zeros((3, 2)))


def test_nearest_neighbors_edge_cases():
    pts = np.random.default_rng(2).uniform(size=(10, 2))
    assert nearest_neighbors(pts[0], pts, range(10), 0).size == 0
    assert sorted(nearest_neighbors(pts[0], pts, [3, 5, 7], 8)) == [3, 5, 7]


@pytest.mark.parametrize("seed", range(5))
def test_nearest_neighbors_brute(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(size=(50, 2))
    q = rng.uniform(size=2)
    cand = rng.choice(50, size=35, replace=False)
    assert list(nearest_neighbors(q, pts, cand, 5)) == brute_knn(q, pts, cand, 5)


def test_nearest_neighbors_tie_break_by_index():
    pts = np.array([[1.0], [-1.0], [2.0]])
    assert list(nearest_neighbors([0.0], pts, [2, 1, 0], 2)) == [0, 1]


@pytest.mark.parametrize("n", [300, 2500])
def test_ordered_neighbors_brute(n):
    rng = np.random.default_rng(n)
    pts = rng.uniform(size=(n, 2))
    queries = rng.choice(n, size=60, replace=False)
    bounds = rng.integers(0, n, size=60)
    nb, cnt = ordered_neighbors(pts, queries, bounds, 7, exclude_self=True)
    for r, q in enumerate(queries):
        cand = [j for j in range(bounds[r]) if j != q]
        assert list(nb[r, : cnt[r]]) == brute_knn(pts[q], pts, cand, 7)
        assert np.all(nb[r, cnt[r]:] == -1)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=25, unique=True), st.integers(0, 6))
@settings(max_examples=60, deadline=None)
def test_nearest_neighbors_property(xs, m):
    pts = np.array(xs)[:, None]
    got = nearest_neighbors([0.0], pts, range(len(xs)), m)
    assert list(got) == brute_knn([0.0], pts, range(len(xs)), m)


def test_build_geometry_op_orderings():
    rng = np.random.default_rng(4)
    x = rng.uniform(size=40)
    obs = rng.uniform(size=40) < 0.5
    for ordering in ("maxmin", "coordinate-op", "random-op"):
        geo = build_geometry(x, obs, ordering)
        assert geo.is_op
        assert geo.n_obs == obs.sum() and geo.n_pred == 40 - obs.sum()
        np.testing.assert_array_equal(geo.locations[:, 0], x[geo.permutation])
        np.testing.assert_array_equal(geo.observed, obs[geo.permutation])
    geo = build_geometry(x, obs, "coordinate")
    assert np.all(np.diff(geo.locations[:, 0]) > 0)
    inv = geo.inverse_permutation()
    np.testing.assert_array_equal(geo.permutation[inv], np.arange(40))


def test_geometry_is_immutable():
    geo = build_geometry(np.random.default_rng(0).uniform(size=(5, 2)))
    with pytest.raises(ValueError):
        geo.locations[0, 0] = 1.0
    with pytest.raises(AttributeError):
        geo.ordering = "x"


def test_geometry_shape_mismatch():
    with pytest.raises(ValueError):
        GeometryModel(np.zeros((3, 1)), np.ones(2, bool), np.arange(3))


def test_observed_subset():
    geo = build_geometry(np.random.default_rng(5).uniform(size=(12, 2)), np.arange(12) % 3 != 0)
    sub = geo.observed_subset()
    assert sub.n == geo.n_obs and sub.n_pred == 0
    np.testing.assert_array_equal(sub.locations, geo.locations[geo.o])


def test_min_separation_filter():
    pts = np.array([[0.0], [0.00005], [0.5], [0.50001], [1.0]])
    keep = min_separation_filter(pts, 1e-4)
    np.testing.assert_array_equal(keep, [0, 2, 4])
    d = np.abs(pts[keep] - pts[keep].T) + np.eye(keep.size)
    assert d.min() >= 1e-4
