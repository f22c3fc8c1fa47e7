"""Locations, orderings and nearest-neighbor queries."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "GeometryModel",
    "maxmin_order",
    "coordinate_order",
    "nearest_neighbors",
    "ordered_neighbors",
    "build_geometry",
    "min_separation_filter",
]

BRUTE_FORCE_MAX = 1000


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("points must be a non-empty (n, d) array")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    return pts


@dataclass(frozen=True)
class GeometryModel:
    """Ordered locations with an observed/prediction split.

    ``locations`` are stored in the working order; ``permutation[k]`` is the
    index in the raw input of the k-th ordered location. ``observed`` is a
    boolean mask over ordered locations.
    """

    locations: np.ndarray
    observed: np.ndarray
    permutation: np.ndarray
    ordering: str = "none"
    o: np.ndarray = field(init=False, repr=False)
    p: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        locs = _as_points(self.locations)
        obs = np.asarray(self.observed, dtype=bool)
        perm = np.asarray(self.permutation, dtype=np.int64)
        if obs.shape != (locs.shape[0],) or perm.shape != (locs.shape[0],):
            raise ValueError("observed mask and permutation must match the number of locations")
        for name, arr in (("locations", locs), ("observed", obs), ("permutation", perm)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        o = np.flatnonzero(obs)
        p = np.flatnonzero(~obs)
        o.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "o", o)
        object.__setattr__(self, "p", p)

    @property
    def n(self) -> int:
        return self.locations.shape[0]

    @property
    def n_obs(self) -> int:
        return self.o.size

    @property
    def n_pred(self) -> int:
        return self.p.size

    @property
    def dim(self) -> int:
        return self.locations.shape[1]

    @property
    def is_op(self) -> bool:
        """True if all observed locations precede all prediction locations."""
        return bool(np.all(self.o == np.arange(self.n_obs)))

    def inverse_permutation(self) -> np.ndarray:
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(self.n)
        return inv

    def observed_subset(self) -> GeometryModel:
        """Geometry of the observed locations alone, in the same order."""
        o = self.o
        return GeometryModel(self.locations[o], np.ones(o.size, dtype=bool), self.permutation[o], self.ordering)


def _centroid_nearest(pts: np.ndarray) -> int:
    d = np.sum((pts - pts.mean(axis=0)) ** 2, axis=1)
    return int(np.argmin(d))  # argmin returns the lowest index on ties


def _maxmin_group(pts, mindist, start):
    """Extend a maxmin order over ``pts`` given current min-distances.

    ``mindist`` holds each point's distance to everything already ordered
    (``inf`` if nothing is). If ``start`` is not None it is taken first.
    Uses a lazy max-heap; after picking a point at min-distance ``r`` only
    points within ``r`` of it can have their min-distance reduced.
    """
    n = pts.shape[0]
    order = np.empty(n, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    tree = cKDTree(pts) if n > BRUTE_FORCE_MAX else None
    heap = [(-mindist[i], i) for i in range(n)]
    heapq.heapify(heap)
    k = 0
    nxt = start
    while k < n:
        if nxt is None:
            while True:
                negd, i = heapq.heappop(heap)
                if not done[i] and -negd == mindist[i]:
                    break
            nxt = i
        i = nxt
        nxt = None
        order[k] = i
        done[i] = True
        k += 1
        radius = mindist[i]
        if tree is None or not np.isfinite(radius):
            cand = np.flatnonzero(~done)
        else:
            cand = np.asarray(tree.query_ball_point(pts[i], radius), dtype=np.int64)
            cand = cand[~done[cand]]
        if cand.size == 0:
            continue
        dist = np.sqrt(np.sum((pts[cand] - pts[i]) ** 2, axis=1))
        upd = dist < mindist[cand]
        cand, dist = cand[upd], dist[upd]
        mindist[cand] = dist
        for j, dj in zip(cand.tolist(), dist.tolist()):
            heapq.heappush(heap, (-dj, j))
    return order


def maxmin_order(points, observed=None) -> np.ndarray:
    """Exact maximum-minimum distance ordering with prediction points last.

    The first point is the observed point nearest the observed centroid
    (or the overall centroid if nothing is observed). Each later point
    maximizes its minimum distance to all previously ordered points; the
    observed group is exhausted before any prediction point, and ties go
    to the lowest original index.

    Returns
    -------
    ndarray of int
        ``perm`` such that ``points[perm]`` is the ordered sequence.
    """
    pts = _as_points(points)
    n = pts.shape[0]
    obs = np.ones(n, dtype=bool) if observed is None else np.asarray(observed, dtype=bool)
    if obs.shape != (n,):
        raise ValueError("observed mask must have one entry per point")
    groups = [np.flatnonzero(obs), np.flatnonzero(~obs)]
    out = []
    for gi, idx in enumerate(groups):
        if idx.size == 0:
            continue
        gpts = pts[idx]
        if not out:
            mindist = np.full(idx.size, np.inf)
            start = _centroid_nearest(gpts)
        else:
            prev = pts[np.concatenate(out)]
            mindist, _ = cKDTree(prev).query(gpts, k=1)
            mindist = np.asarray(mindist, dtype=float)
            start = None
        out.append(idx[_maxmin_group(gpts, mindist, start)])
    return np.concatenate(out)


def coordinate_order(points) -> np.ndarray:
    """Left-to-right ordering of one-dimensional points (stable)."""
    pts = _as_points(points)
    if pts.shape[1] != 1:
        raise ValueError(f"coordinate ordering needs 1-D points, got dimension {pts.shape[1]}")
    return np.argsort(pts[:, 0], kind="stable")


def _sort_by_dist(dist, idx):
    order = np.lexsort((idx, dist))
    return idx[order], dist[order]


def nearest_neighbors(query, points, candidates, m: int) -> np.ndarray:
    """The ``m`` candidates nearest to ``query``, sorted by (distance, index)."""
    cand = np.asarray(candidates, dtype=np.int64)
    if m <= 0 or cand.size == 0:
        return np.empty(0, dtype=np.int64)
    pts = _as_points(points)
    q = np.atleast_1d(np.asarray(query, dtype=float))
    dist = np.sqrt(np.sum((pts[cand] - q) ** 2, axis=1))
    idx, _ = _sort_by_dist(dist, cand)
    return idx[:m]


def _brute_prefix_knn(pts, queries, bounds, m, exclude_self):
    n_q = queries.size
    out = np.full((n_q, m), -1, dtype=np.int64)
    counts = np.zeros(n_q, dtype=np.int64)
    for r in range(n_q):
        b = bounds[r]
        if b <= 0:
            continue
        cand = np.arange(b, dtype=np.int64)
        if exclude_self:
            cand = cand[cand != queries[r]]
        dist = np.sum((pts[cand] - pts[queries[r]]) ** 2, axis=1)
        idx, _ = _sort_by_dist(dist, cand)
        k = min(m, idx.size)
        out[r, :k] = idx[:k]
        counts[r] = k
    return out, counts


def ordered_neighbors(points, queries, bounds, m: int, exclude_self: bool = False):
    """Nearest neighbors restricted to an index prefix.

    For each query index ``q = queries[r]`` find the ``m`` points among
    ``0 .. bounds[r]-1`` closest to ``points[q]`` (ties by lowest index).
    With ``exclude_self`` the query point itself is never returned.

    Returns
    -------
    nbrs : (len(queries), m) int array, padded with -1
    counts : number of valid neighbors per row
    """
    pts = _as_points(points)
    queries = np.asarray(queries, dtype=np.int64)
    bounds = np.asarray(bounds, dtype=np.int64)
    n = pts.shape[0]
    if m <= 0 or queries.size == 0:
        return np.empty((queries.size, 0), dtype=np.int64), np.zeros(queries.size, dtype=np.int64)
    if n < BRUTE_FORCE_MAX:
        return _brute_prefix_knn(pts, queries, bounds, m, exclude_self)

    out = np.full((queries.size, m), -1, dtype=np.int64)
    counts = np.zeros(queries.size, dtype=np.int64)
    max_bound = int(bounds.max())
    tree = cKDTree(pts[:max_bound])
    pending = np.flatnonzero(bounds > 0)
    k = min(max_bound, 2 * m + 2)
    cols = np.arange(m)
    while pending.size:
        qs = queries[pending]
        b = bounds[pending]
        dist, nb = tree.query(pts[qs], k=k)
        dist = np.asarray(dist, dtype=float).reshape(pending.size, k)
        nb = np.asarray(nb, dtype=np.int64).reshape(pending.size, k)
        outer = dist[:, -1].copy()
        valid = nb < b[:, None]
        if exclude_self:
            valid &= nb != qs[:, None]
        dist[~valid] = np.inf
        # order rows by (distance, index)
        o1 = np.argsort(nb, axis=1, kind="stable")
        nb = np.take_along_axis(nb, o1, axis=1)
        dist = np.take_along_axis(dist, o1, axis=1)
        o2 = np.argsort(dist, axis=1, kind="stable")
        nb = np.take_along_axis(nb, o2, axis=1)
        dist = np.take_along_axis(dist, o2, axis=1)
        n_avail = b - (exclude_self & (qs < b)).astype(np.int64)
        need = np.minimum(m, n_avail)
        n_valid = valid.sum(axis=1)
        rows = np.arange(pending.size)
        kth = dist[rows, np.clip(need - 1, 0, k - 1)]
        # exact when the m-th valid distance lies strictly inside the searched ball
        done = (k >= max_bound) | ((n_valid >= need) & ((need == 0) | (kth < outer)))
        take = done[:, None] & (cols[None, :] < need[:, None])
        width = min(m, k)
        sub = np.where(take[:, :width], nb[:, :width], -1)
        out[pending[done], :width] = sub[done]
        counts[pending[done]] = need[done]
        rest = pending[~done]
        small = bounds[rest] <= 4 * k
        for r in rest[small]:
            o, c = _brute_prefix_knn(pts, queries[r : r + 1], bounds[r : r + 1], m, exclude_self)
            out[r] = o[0]
            counts[r] = c[0]
        pending = rest[~small]
        k = min(max_bound, 4 * k)
    return out, counts


def min_separation_filter(points, min_dist: float) -> np.ndarray:
    """Indices of a subset of ``points`` that are pairwise at least ``min_dist`` apart.

    Greedy in input order: a point is dropped if it lies within ``min_dist``
    of an earlier kept point.
    """
    pts = _as_points(points)
    tree = cKDTree(pts)
    keep = np.ones(pts.shape[0], dtype=bool)
    for i, j in sorted(tree.query_pairs(min_dist, output_type="set")):
        if keep[i] and keep[j]:
            keep[j] = False
    return np.flatnonzero(keep)


def build_geometry(points, observed=None, ordering: str = "maxmin", seed: int = 0) -> GeometryModel:
    """Order raw locations and wrap them in a :class:`GeometryModel`.

    Parameters
    ----------
    points : (n, d) array_like
    observed : boolean mask over ``points``; default all observed
    ordering : {"maxmin", "coordinate", "coordinate-op", "random-op", "none"}
        ``"maxmin"`` and ``"coordinate-op"`` order observed locations
        first. ``"coordinate"`` sorts everything left to right (used by
        the autoregressive scheme). ``"random-op"`` is a seeded random
        order with observed locations first, for sizes where exact maxmin is
        too slow. ``"none"`` keeps input order.
    """
    pts = _as_points(points)
    n = pts.shape[0]
    obs = np.ones(n, dtype=bool) if observed is None else np.asarray(observed, dtype=bool)
    if ordering == "maxmin":
        perm = maxmin_order(pts, obs)
    elif ordering == "coordinate":
        perm = coordinate_order(pts)
    elif ordering == "coordinate-op":
        co = coordinate_order(pts)
        perm = np.concatenate([co[obs[co]], co[~obs[co]]])
    elif ordering == "random-op":
        rp = np.random.default_rng(seed).permutation(n)
        perm = np.concatenate([rp[obs[rp]], rp[~obs[rp]]])
    elif ordering == "none":
        perm = np.arange(n)
    else:
        raise ValueError(f"unknown ordering {ordering!r}")
    return GeometryModel(pts[perm], obs[perm], perm, ordering)
