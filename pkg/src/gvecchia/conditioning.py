"""Conditioning plans for the stacked vector x = (responses at observed sites, latents).

A plan fixes the order of the entries of x and, for each entry, the
earlier entries it conditions on. Six schemes are supported:

=========  =====================  =========================================
scheme     order of x             latent y_i conditions on
=========  =====================  =========================================
rf-full    (z_o, y_o, y_p)        m nearest earlier sites; y_j if j < i else z_j
rf-stand   (z_o, y_o, y_p)        as rf-full, but prediction latents never use y_o
rf-ind     (z_o, y_o, y_p)        z_j at the m nearest observed sites
lf-full    (y_o, y_p, z_o)        y_j at the m nearest earlier sites
lf-ind     (y_o, y_p, z_o)        y_j at the m nearest earlier observed sites
lf-auto    (y, z_o)               y_{i-m}, ..., y_{i-1} (coordinate order)
=========  =====================  =========================================

For response-first schemes an observed site counts among its own
neighbors (y_i may condition on z_i). Responses of latent-first schemes
condition only on their own latent. Response-first responses condition
on nothing unless ``likelihood_mode`` is on, in which case z_i conditions
on the m nearest earlier responses.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .covariance import LATENT, RESPONSE
from .geometry import GeometryModel, ordered_neighbors

__all__ = [
    "SCHEMES",
    "Scheme",
    "ConditioningPlan",
    "ConfigurationError",
    "build_plan",
    "plan_statistics",
    "collapse_exact_observations",
]

SCHEMES = ("rf-full", "rf-stand", "rf-ind", "lf-full", "lf-ind", "lf-auto")


class ConfigurationError(ValueError):
    """Scheme, ordering or parameter combination that cannot be used."""


@dataclass(frozen=True)
class Scheme:
    name: str
    m: int
    likelihood_mode: bool = False

    def __post_init__(self):
        name = self.name.lower().replace("_", "-")
        if name not in SCHEMES:
            raise ConfigurationError(f"unknown scheme {self.name!r}; expected one of {SCHEMES}")
        if int(self.m) < 0:
            raise ConfigurationError("conditioning-set size m must be >= 0")
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "m", int(self.m))

    @property
    def response_first(self) -> bool:
        return self.name.startswith("rf")


@dataclass(frozen=True)
class ConditioningPlan:
    """Ordered entries of x with their conditioning vectors.

    ``kind[i]`` is LATENT or RESPONSE, ``loc[i]`` the location index of
    entry i and ``g(i)`` (CSR arrays ``g_ptr``/``g_idx``, each row sorted)
    the earlier positions it conditions on.
    """

    scheme: Scheme
    kind: np.ndarray
    loc: np.ndarray
    g_ptr: np.ndarray
    g_idx: np.ndarray
    n_locations: int
    latent_pos: np.ndarray = field(init=False, repr=False)
    response_pos: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.n_locations
        lat = np.full(n, -1, dtype=np.int64)
        resp = np.full(n, -1, dtype=np.int64)
        for pos_map, k in ((lat, LATENT), (resp, RESPONSE)):
            sel = np.flatnonzero(self.kind == k)
            pos_map[self.loc[sel]] = sel
            pos_map.setflags(write=False)
        object.__setattr__(self, "latent_pos", lat)
        object.__setattr__(self, "response_pos", resp)

    @property
    def size(self) -> int:
        return self.kind.size

    @property
    def ell(self) -> np.ndarray:
        """Positions of latent entries."""
        return np.flatnonzero(self.kind == LATENT)

    @property
    def r(self) -> np.ndarray:
        """Positions of response entries."""
        return np.flatnonzero(self.kind == RESPONSE)

    def g(self, i: int) -> np.ndarray:
        return self.g_idx[self.g_ptr[i] : self.g_ptr[i + 1]]

    def g_sizes(self) -> np.ndarray:
        return np.diff(self.g_ptr)

    def qy(self, loc: int) -> np.ndarray:
        """Locations of the latents that latent ``loc`` conditions on."""
        g = self.g(self.latent_pos[loc])
        return np.sort(self.loc[g[self.kind[g] == LATENT]])

    def qz(self, loc: int) -> np.ndarray:
        """Locations of the responses that latent ``loc`` conditions on."""
        g = self.g(self.latent_pos[loc])
        return np.sort(self.loc[g[self.kind[g] == RESPONSE]])


def _csr(rows):
    sizes = np.fromiter((len(r) for r in rows), dtype=np.int64, count=len(rows))
    ptr = np.zeros(len(rows) + 1, dtype=np.int64)
    np.cumsum(sizes, out=ptr[1:])
    idx = np.concatenate([np.asarray(r, dtype=np.int64) for r in rows]) if ptr[-1] else np.empty(0, np.int64)
    return ptr, idx


def _from_neighbor_table(nbrs, counts, to_pos):
    """Turn a padded neighbor table into sorted CSR rows of x-positions.

    ``to_pos(rows, nbr_locs)`` maps neighbor locations to positions in x.
    """
    n_q, m = nbrs.shape
    sizes = counts.astype(np.int64)
    ptr = np.zeros(n_q + 1, dtype=np.int64)
    np.cumsum(sizes, out=ptr[1:])
    if m == 0 or ptr[-1] == 0:
        return ptr, np.empty(0, dtype=np.int64)
    mask = np.arange(m)[None, :] < counts[:, None]
    rows = np.broadcast_to(np.arange(n_q)[:, None], nbrs.shape)
    pos = np.where(mask, to_pos(rows, nbrs), np.iinfo(np.int64).max)
    # padding sorts to the end, so valid entries stay in the leading columns
    pos = np.sort(pos, axis=1)
    return ptr, pos[mask]


def _stack(blocks, n_entries):
    """Concatenate (ptr, idx) CSR blocks in entry order."""
    ptrs, idxs = [np.zeros(1, dtype=np.int64)], []
    offset = 0
    for ptr, idx in blocks:
        ptrs.append(ptr[1:] + offset)
        idxs.append(idx)
        offset += idx.size
    g_ptr = np.concatenate(ptrs)
    assert g_ptr.size == n_entries + 1
    return g_ptr, np.concatenate(idxs) if idxs else np.empty(0, np.int64)


def build_plan(scheme: Scheme | str, geometry: GeometryModel, m: int | None = None,
               likelihood_mode: bool = False) -> ConditioningPlan:
    """Build the ordering and conditioning vectors of ``scheme`` on ``geometry``.

    All schemes except ``lf-auto`` require the geometry to list observed
    locations first. ``lf-auto`` expects a coordinate-ordered 1-D geometry
    and only warns otherwise.
    """
    if not isinstance(scheme, Scheme):
        scheme = Scheme(scheme, 0 if m is None else m, likelihood_mode)
    name, m = scheme.name, scheme.m
    n, n_o = geometry.n, geometry.n_obs
    pts = geometry.locations

    if name == "lf-auto":
        if geometry.dim != 1 or geometry.ordering not in ("coordinate", "none"):
            warnings.warn("lf-auto is intended for coordinate-ordered 1-D locations", stacklevel=2)
        return _plan_lf_auto(scheme, geometry)

    if not geometry.is_op:
        raise ConfigurationError(f"{name} needs observed locations ordered before prediction locations")

    o_idx = np.arange(n_o)
    all_idx = np.arange(n)

    if scheme.response_first:
        # positions: z_j -> j, y_j -> n_o + j
        kind = np.concatenate([np.full(n_o, RESPONSE), np.full(n, LATENT)]).astype(np.int8)
        loc = np.concatenate([o_idx, all_idx])
        if scheme.likelihood_mode:
            nb, ct = ordered_neighbors(pts, o_idx, o_idx, m)
            resp_block = _from_neighbor_table(nb, ct, lambda rows, j: j)
        else:
            resp_block = (np.zeros(n_o + 1, dtype=np.int64), np.empty(0, np.int64))

        if name == "rf-ind":
            nb, ct = ordered_neighbors(pts, all_idx, np.full(n, n_o), m)
            lat_block = _from_neighbor_table(nb, ct, lambda rows, j: j)
        else:
            bounds = np.where(all_idx < n_o, n_o, all_idx)
            nb, ct = ordered_neighbors(pts, all_idx, bounds, m)
            if name == "rf-full":
                def to_pos(rows, j):
                    return np.where(j < rows, n_o + j, j)
            else:
                # observed latents as in rf-full; prediction latents skip y_o
                def to_pos(rows, j):
                    return np.where((j < rows) & ((rows < n_o) | (j >= n_o)), n_o + j, j)
            lat_block = _from_neighbor_table(nb, ct, to_pos)
        g_ptr, g_idx = _stack([resp_block, lat_block], n_o + n)
    else:
        # positions: y_j -> j, z_j -> n + j
        kind = np.concatenate([np.full(n, LATENT), np.full(n_o, RESPONSE)]).astype(np.int8)
        loc = np.concatenate([all_idx, o_idx])
        bounds = all_idx if name == "lf-full" else np.minimum(all_idx, n_o)
        nb, ct = ordered_neighbors(pts, all_idx, bounds, m)
        lat_block = _from_neighbor_table(nb, ct, lambda rows, j: j)
        resp_block = (np.arange(n_o + 1, dtype=np.int64), o_idx.astype(np.int64))
        g_ptr, g_idx = _stack([lat_block, resp_block], n + n_o)

    return ConditioningPlan(scheme, kind, loc.astype(np.int64), g_ptr, g_idx, n)


def _plan_lf_auto(scheme, geometry):
    n, m = geometry.n, scheme.m
    o = geometry.o
    n_o = o.size
    kind = np.concatenate([np.full(n, LATENT), np.full(n_o, RESPONSE)]).astype(np.int8)
    loc = np.concatenate([np.arange(n), o]).astype(np.int64)
    lat_sizes = np.minimum(np.arange(n), m)
    rows = [np.arange(i - s, i) for i, s in enumerate(lat_sizes)]
    rows += [np.array([j]) for j in o]
    g_ptr, g_idx = _csr(rows)
    return ConditioningPlan(scheme, kind, loc, g_ptr, g_idx, n)


def collapse_exact_observations(plan: ConditioningPlan, zero_nugget: np.ndarray) -> ConditioningPlan:
    """Merge y_j and z_j wherever the nugget at observed site j is zero.

    With no noise the two entries are the same random variable, so keeping
    both makes the joint covariance singular. The earlier of the two is
    kept as a response entry; references to the later one are redirected
    to it and the later one is removed.
    """
    zero = np.asarray(zero_nugget, dtype=bool)
    sites = np.flatnonzero(zero & (plan.response_pos >= 0))
    if sites.size == 0:
        return plan
    a = plan.latent_pos[sites]
    b = plan.response_pos[sites]
    keep, drop = np.minimum(a, b), np.maximum(a, b)
    redirect = np.arange(plan.size)
    redirect[drop] = keep
    alive = np.ones(plan.size, dtype=bool)
    alive[drop] = False
    new_pos = np.cumsum(alive) - 1

    kind = plan.kind.copy()
    kind[keep] = RESPONSE
    rows = []
    for i in np.flatnonzero(alive):
        g = np.unique(redirect[plan.g(i)])
        rows.append(new_pos[g])
    g_ptr, g_idx = _csr(rows)
    return ConditioningPlan(plan.scheme, kind[alive], plan.loc[alive], g_ptr, g_idx, plan.n_locations)


def plan_statistics(plan: ConditioningPlan) -> dict:
    """Summary counts used by tests and CLI reports."""
    sizes = plan.g_sizes()
    lat = plan.kind == LATENT
    depth = np.zeros(plan.size, dtype=np.int64)
    gp, gi = plan.g_ptr, plan.g_idx
    for i in range(plan.size):
        if gp[i + 1] > gp[i]:
            depth[i] = depth[gi[gp[i] : gp[i + 1]]].max() + 1
    return {
        "scheme": plan.scheme.name,
        "m": plan.scheme.m,
        "n_entries": int(plan.size),
        "n_latent": int(lat.sum()),
        "n_response": int((~lat).sum()),
        "max_g_latent": int(sizes[lat].max()) if lat.any() else 0,
        "max_g_response": int(sizes[~lat].max()) if (~lat).any() else 0,
        "mean_g": float(sizes.mean()) if sizes.size else 0.0,
        "dag_depth": int(depth.max()) + 1 if depth.size else 0,
    }
