"""Posterior quantities of the latent field from the factors U and V.

Vectors handed to and returned by the public functions are indexed by
location (``0 .. n-1`` in geometry order). Internally the latent
entries of x are used in plan order, and V may add a further permutation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .conditioning import ConditioningPlan, Scheme, build_plan, collapse_exact_observations
from .covariance import MaternParams, NoiseModel
from .geometry import GeometryModel
from .sparse_engine import (
    SparseTriangularFactor,
    build_U,
    derive_V,
    exact_variances,
    selected_inverse,
    solve_upper,
    solve_upper_transpose,
)

__all__ = [
    "CapacityError",
    "PredictionResult",
    "response_vector",
    "posterior_mean",
    "posterior_variances",
    "lincomb_distribution",
    "conditional_sample",
    "predict_response",
    "predict_rf_stand_ponly",
    "predict",
    "LINCOMB_CAP",
]

LINCOMB_CAP = 5000


class CapacityError(ValueError):
    """Request exceeds a documented size limit."""


@dataclass
class PredictionResult:
    """Posterior summaries, indexed by location.

    Attributes
    ----------
    mean, variances : ndarray, shape (n,)
    samples : ndarray, shape (n, S), optional
    lincomb : tuple, optional
        ``(H mu, H Sigma H')`` or ``(H mu, diag(H Sigma H'))``.
    info : dict
        Timings and factor statistics.
    """

    mean: np.ndarray
    variances: np.ndarray | None = None
    samples: np.ndarray | None = None
    lincomb: tuple | None = None
    info: dict = field(default_factory=dict)

    def subset(self, idx) -> PredictionResult:
        """Restrict every per-location field to ``idx``."""
        idx = np.asarray(idx, dtype=np.int64)
        return PredictionResult(
            self.mean[idx],
            None if self.variances is None else self.variances[idx],
            None if self.samples is None else self.samples[idx],
            self.lincomb,
            dict(self.info),
        )


def _latent_locs(plan: ConditioningPlan) -> np.ndarray:
    return plan.loc[plan.ell]


def _fixed_sites(plan: ConditioningPlan) -> np.ndarray:
    """Locations with no latent entry (merged into an exact observation)."""
    return np.flatnonzero(plan.latent_pos < 0)


def _to_locations(plan: ConditioningPlan, v_lat, fill):
    lat = _latent_locs(plan)
    shape = (plan.n_locations,) + np.shape(v_lat)[1:]
    out = np.empty(shape)
    out[lat] = v_lat
    fixed = _fixed_sites(plan)
    if fixed.size:
        out[fixed] = fill(fixed) if callable(fill) else fill
    return out


def response_vector(plan: ConditioningPlan, z_o) -> np.ndarray:
    """Reorder ``z_o`` (ascending observed location) into plan response order."""
    z_o = np.asarray(z_o, dtype=float)
    locs = plan.loc[plan.r]
    if z_o.ndim != 1 or z_o.size != locs.size:
        raise ValueError(f"z_o has shape {z_o.shape}, expected ({locs.size},)")
    return z_o[np.searchsorted(np.sort(locs), locs)]


def _observed_value(plan, z_o):
    locs = np.sort(plan.loc[plan.r])
    z_o = np.asarray(z_o, dtype=float)

    def value(sites):
        return z_o[np.searchsorted(locs, sites)]

    return value


def _perm_apply(V: SparseTriangularFactor, v):
    return v if V.perm is None else v[V.perm]


def _perm_undo(V: SparseTriangularFactor, v):
    if V.perm is None:
        return v
    out = np.empty_like(v)
    out[V.perm] = v
    return out


def _is_response_first(U: SparseTriangularFactor, V: SparseTriangularFactor) -> bool:
    return V.method == "extract" and V.perm is None


def _posterior_mean_latent(U, V, z_o, method="auto"):
    plan = U.plan
    zr = response_vector(plan, z_o)
    ell, r = plan.ell, plan.r
    if V.n != ell.size:
        raise ValueError("U and V do not belong to the same plan")
    if method == "auto":
        method = "rf" if _is_response_first(U, V) else "general"
    if method == "rf":
        if not _is_response_first(U, V):
            raise ValueError("response-first shortcut needs V extracted from U")
        rhs = U.mat[r][:, ell].T @ zr
        return -solve_upper_transpose(V, rhs)
    if method != "general":
        raise ValueError(f"unknown method {method!r}")
    zt = U.mat[r, :].T @ zr
    b = _perm_apply(V, U.mat[ell, :] @ zt)
    return -_perm_undo(V, solve_upper_transpose(V, solve_upper(V, b)))


def posterior_mean(U: SparseTriangularFactor, V: SparseTriangularFactor, z_o, method: str = "auto") -> np.ndarray:
    """Posterior mean E(y | z_o) at every location.

    Parameters
    ----------
    U, V : SparseTriangularFactor
        Factors of one plan.
    z_o : array_like
        Observations ordered by ascending observed location index.
    method : {"auto", "general", "rf"}
        ``"rf"`` is the response-first shortcut
        ``mu = -(U_ll')^{-1} U_rl' z_o``; ``"auto"`` uses it whenever V
        was extracted from U.
    """
    mu = _posterior_mean_latent(U, V, z_o, method)
    return _to_locations(U.plan, mu, _observed_value(U.plan, z_o))


def _variances_latent(V, mode):
    if mode == "fast":
        return selected_inverse(V).diag()
    if mode == "exact":
        return _perm_undo(V, exact_variances(V))
    if mode == "padded":
        return selected_inverse(V, exact=True).diag()
    raise ValueError(f"unknown variance mode {mode!r}")


def posterior_variances(V: SparseTriangularFactor, mode: str = "fast") -> np.ndarray:
    """Marginal posterior variances diag(W^{-1}) at every location.

    ``mode="fast"`` runs the selected inverse on V's own pattern,
    ``"padded"`` on its fill closure and ``"exact"`` uses column solves.
    Sites merged into exact observations get variance 0.
    """
    var = _variances_latent(V, mode)
    return np.maximum(_to_locations(V.plan, var, 0.0), 0.0)


def _latent_columns(plan: ConditioningPlan, H):
    """Split H (columns by location) into latent columns and fixed columns."""
    lat = _latent_locs(plan)
    if sp.issparse(H):
        H = sp.csc_matrix(H)
        return H[:, lat], H[:, _fixed_sites(plan)]
    H = np.atleast_2d(np.asarray(H, dtype=float))
    return H[:, lat], H[:, _fixed_sites(plan)]


def lincomb_distribution(V: SparseTriangularFactor, mean, H, variance_only: bool = False,
                         cap: int = LINCOMB_CAP, block: int = 512):
    """Distribution of H y given z_o.

    Parameters
    ----------
    V : SparseTriangularFactor
    mean : ndarray, shape (n,)
        Posterior mean by location.
    H : array_like or sparse matrix, shape (k, n)
    variance_only : bool
        Return only diag(H Sigma H').
    cap : int
        Largest k allowed for the full covariance.

    Returns
    -------
    (ndarray, ndarray)
        ``H mu`` and either ``H Sigma H'`` (k, k) or its diagonal (k,).
    """
    plan = V.plan
    if H.shape[1] != plan.n_locations:
        raise ValueError(f"H has {H.shape[1]} columns, expected {plan.n_locations}")
    k = H.shape[0]
    if not variance_only and k > cap:
        raise CapacityError(f"full covariance of {k} combinations exceeds the cap of {cap}")
    hmu = np.asarray(H @ np.asarray(mean, dtype=float)).ravel()
    H_lat, _ = _latent_columns(plan, H)
    n_lat = V.n
    perm = np.arange(n_lat) if V.perm is None else V.perm
    if variance_only:
        out = np.empty(k)
    else:
        X = np.empty((n_lat, k))
    for s in range(0, k, block):
        rows = H_lat[s : s + block]
        Ht = rows.T.toarray() if sp.issparse(rows) else np.asarray(rows).T
        Xb = solve_upper(V, np.ascontiguousarray(Ht[perm]))
        if variance_only:
            out[s : s + block] = np.einsum("ij,ij->j", Xb, Xb)
        else:
            X[:, s : s + block] = Xb
    if variance_only:
        return hmu, out
    cov = X.T @ X
    return hmu, 0.5 * (cov + cov.T)


def conditional_sample(V: SparseTriangularFactor, mean, count: int, seed: int | None = 0,
                       zero_draws: bool = False, block: int = 1024) -> np.ndarray:
    """Draws from N(mu, W^{-1}) as ``mu + (V')^{-1} a``.

    Standard normals come from a Philox generator seeded with ``seed``,
    in blocks of columns, so the output depends only on ``seed`` and
    ``count``. ``zero_draws`` replaces ``a`` by zeros (test hook).

    Returns
    -------
    ndarray, shape (n, count)
    """
    plan = V.plan
    mean = np.asarray(mean, dtype=float)
    lat = _latent_locs(plan)
    n_lat = V.n
    rng = np.random.Generator(np.random.Philox(seed))
    out = np.empty((plan.n_locations, count))
    out[:] = mean[:, None]
    for s in range(0, count, block):
        c = min(block, count - s)
        a = np.zeros((n_lat, c)) if zero_draws else rng.standard_normal((n_lat, c))
        dev = solve_upper_transpose(V, a)
        if V.perm is not None:
            dev = _perm_undo(V, dev)
        out[lat, s : s + c] += dev
    return out


def predict_response(prediction: PredictionResult, noise: NoiseModel, geometry: GeometryModel | None = None,
                     locs=None) -> PredictionResult:
    """Predictive distribution of responses: variances grow by the nugget.

    ``locs`` gives the location index of each entry of ``prediction``
    (default: all locations). Per-location nugget vectors must cover the
    requested locations.
    """
    n = prediction.mean.size
    locs = np.arange(n) if locs is None else np.asarray(locs, dtype=np.int64)
    if noise.is_scalar:
        tau2 = np.full(n, noise.nugget)
    else:
        n_loc = geometry.n if geometry is not None else noise.nugget.size
        if noise.nugget.size != n_loc:
            raise ValueError("per-location nuggets must be given at every location to predict responses")
        tau2 = noise.nugget[locs]
    var = None if prediction.variances is None else prediction.variances + tau2
    return replace(prediction, variances=var, samples=None, lincomb=None)


def predict_rf_stand_ponly(U: SparseTriangularFactor, z_o, variances: str | None = "fast") -> PredictionResult:
    """Mean and variances at prediction locations from U's y_p columns only.

    For rf-stand, V = blockdiag(V_oo, U_pp), so
    ``mu_p = -(U_pp')^{-1} U_{r,p}' z_o`` and ``Sigma_pp = (U_pp U_pp')^{-1}``.
    Only the columns of U belonging to prediction latents are read, so U
    may have been built with just those columns.

    Returns
    -------
    PredictionResult
        Indexed by prediction location (length n_P).
    """
    plan = U.plan
    if plan.scheme.name != "rf-stand":
        raise ValueError(f"prediction-only shortcut needs an rf-stand plan, got {plan.scheme.name}")
    n_o = plan.r.size
    ell = plan.ell
    p_pos = ell[plan.loc[ell] >= n_o]
    cols = U.mat[:, p_pos]
    Upp = sp.csc_matrix(cols[p_pos, :])
    Upp.sort_indices()
    Urp = cols[plan.r, :]
    zr = response_vector(plan, z_o)
    mu = -solve_upper_transpose(Upp, Urp.T @ zr)
    var = None
    if variances == "fast":
        var = selected_inverse(Upp).diag()
    elif variances == "exact":
        var = exact_variances(Upp)
    elif variances is not None:
        raise ValueError(f"unknown variance mode {variances!r}")
    return PredictionResult(mu, var, info={"n_columns_read": int(p_pos.size)})


def predict(geometry: GeometryModel, scheme: Scheme | str, params: MaternParams, noise: NoiseModel, z_o,
            m: int | None = None, variances: str | None = "fast", n_samples: int = 0, seed: int | None = 0,
            H=None, variance_only: bool = False, fill_order: str = "mindegree",
            return_factors: bool = False):
    """Plan, factor and predict in one call.

    Observed sites with zero nugget are merged into a single exact entry
    before U is built; their posterior mean is the observation and their
    variance is zero.

    Returns
    -------
    PredictionResult, or ``(PredictionResult, U, V)`` with ``return_factors``.
    """
    t0 = time.perf_counter()
    plan = build_plan(scheme, geometry, m)
    zero = np.zeros(geometry.n, dtype=bool)
    zero[geometry.o] = noise.at(geometry.o, geometry.n, geometry.o) == 0.0
    plan = collapse_exact_observations(plan, zero)
    t1 = time.perf_counter()
    U = build_U(plan, geometry, params, noise)
    t2 = time.perf_counter()
    V = derive_V(U, fill_order)
    t3 = time.perf_counter()
    mu = posterior_mean(U, V, z_o)
    var = None if variances is None else posterior_variances(V, variances)
    samples = conditional_sample(V, mu, n_samples, seed) if n_samples else None
    lin = None if H is None else lincomb_distribution(V, mu, H, variance_only)
    t4 = time.perf_counter()
    info = {
        "scheme": plan.scheme.name,
        "m": plan.scheme.m,
        "nnz_U": int(U.mat.nnz),
        "nnz_V": int(V.mat.nnz),
        "annzc_V": float(V.offdiag_counts().mean()) if V.n else 0.0,
        "V_method": V.method,
        "t_plan": t1 - t0,
        "t_U": t2 - t1,
        "t_V": t3 - t2,
        "t_predict": t4 - t3,
    }
    res = PredictionResult(mu, var, samples, lin, info)
    return (res, U, V) if return_factors else res
