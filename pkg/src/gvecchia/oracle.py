"""Dense exact-GP reference computations and KL divergences.

Everything here materializes dense matrices and is meant for moderate
sizes (at most ``DENSE_CAP`` locations). It serves as the ground truth
against which the sparse Vecchia machinery is validated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import cdist

from .conditioning import ConditioningPlan, Scheme, build_plan, collapse_exact_observations
from .covariance import RESPONSE, MaternParams, NoiseModel, matern
from .geometry import GeometryModel
from .prediction import posterior_mean
from .sparse_engine import SparseTriangularFactor, build_U, derive_V, solve_upper

__all__ = [
    "DENSE_CAP",
    "GaussianDist",
    "KLReport",
    "dense_x_covariance",
    "exact_posterior",
    "exact_mean_map",
    "vecchia_covariance",
    "vecchia_mean_map",
    "vecchia_implied_joint",
    "gaussian_kl",
    "conditional_kl",
    "vecchia_x_kl",
    "ckl_vecchia",
    "conditional_variance",
    "kl_report",
]

DENSE_CAP = 2000
KL_CLAMP = -1e-10


@dataclass(frozen=True)
class GaussianDist:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.size

    def marginal(self, idx) -> GaussianDist:
        idx = np.asarray(idx, dtype=np.int64)
        return GaussianDist(self.mean[idx], self.cov[np.ix_(idx, idx)])


@dataclass(frozen=True)
class KLReport:
    """Average KL divergences from the exact to the approximate posterior.

    Joint values are for f(y_p | z_o) and f(y_o | z_o); marginal values
    average the univariate divergences over sites and replicates.
    """

    joint_pred: float
    joint_obs: float
    marginal_pred: float
    marginal_obs: float
    replicates: int

    def as_row(self) -> dict:
        return {
            "joint_pred": self.joint_pred,
            "joint_obs": self.joint_obs,
            "marg_pred": self.marginal_pred,
            "marg_obs": self.marginal_obs,
            "replicates": self.replicates,
        }


def _check_cap(n, what="locations"):
    if n > DENSE_CAP:
        raise ValueError(f"dense computation over {n} {what} exceeds the cap of {DENSE_CAP}")


def _location_cov(geometry: GeometryModel, params: MaternParams):
    pts = geometry.locations
    return matern(cdist(pts, pts), params)


def _site_nuggets(geometry: GeometryModel, noise: NoiseModel) -> np.ndarray:
    nug = np.zeros(geometry.n)
    if noise.is_scalar:
        nug[:] = noise.nugget
    elif noise.nugget.size == geometry.n:
        nug[:] = noise.nugget
    else:
        nug[geometry.o] = noise.at(geometry.o, geometry.n, geometry.o)
    return nug


def dense_x_covariance(plan: ConditioningPlan, geometry: GeometryModel, params: MaternParams,
                       noise: NoiseModel) -> np.ndarray:
    """Covariance matrix of the stacked vector x in plan order."""
    _check_cap(geometry.n)
    pts = geometry.locations[plan.loc]
    C = matern(cdist(pts, pts), params)
    resp = np.flatnonzero(plan.kind == RESPONSE)
    C[resp, resp] += _site_nuggets(geometry, noise)[plan.loc[resp]]
    return C


def _chol(S, what):
    try:
        return sla.cho_factor(S, lower=True)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"{what} is not positive definite") from exc


def _logdet(cf):
    return 2.0 * np.sum(np.log(np.diag(cf[0])))


def exact_mean_map(geometry: GeometryModel, params: MaternParams, noise: NoiseModel) -> np.ndarray:
    """Matrix A with E(y | z_o) = A z_o, i.e. ``K_{.o} C_oo^{-1}``."""
    _check_cap(geometry.n)
    K = _location_cov(geometry, params)
    o = geometry.o
    C_oo = K[np.ix_(o, o)] + np.diag(_site_nuggets(geometry, noise)[o])
    cf = _chol(C_oo, "C_oo")
    return sla.cho_solve(cf, K[o, :]).T


def exact_posterior(geometry: GeometryModel, params: MaternParams, noise: NoiseModel, z_o) -> GaussianDist:
    """Exact conditional distribution of y at all locations given z_o."""
    _check_cap(geometry.n)
    K = _location_cov(geometry, params)
    o = geometry.o
    z_o = np.asarray(z_o, dtype=float)
    if z_o.shape != (o.size,):
        raise ValueError(f"z_o has shape {z_o.shape}, expected ({o.size},)")
    if o.size == 0:
        return GaussianDist(np.zeros(geometry.n), K)
    C_oo = K[np.ix_(o, o)] + np.diag(_site_nuggets(geometry, noise)[o])
    cf = _chol(C_oo, "C_oo")
    mean = K[:, o] @ sla.cho_solve(cf, z_o)
    cov = K - K[:, o] @ sla.cho_solve(cf, K[o, :])
    return GaussianDist(mean, 0.5 * (cov + cov.T))


def _dense_inverse_upper(V: SparseTriangularFactor) -> np.ndarray:
    return solve_upper(V, np.eye(V.n))


def vecchia_covariance(V: SparseTriangularFactor) -> np.ndarray:
    """Dense W^{-1} by location (rows/columns of merged exact sites are zero)."""
    plan = V.plan
    _check_cap(plan.n_locations)
    Vinv = _dense_inverse_upper(V)
    S = Vinv.T @ Vinv
    lat = plan.loc[plan.ell]
    if V.perm is not None:
        lat = lat[V.perm]
    out = np.zeros((plan.n_locations, plan.n_locations))
    out[np.ix_(lat, lat)] = S
    return 0.5 * (out + out.T)


def vecchia_mean_map(U: SparseTriangularFactor, V: SparseTriangularFactor) -> np.ndarray:
    """Matrix B with mu = B z_o under the approximation, from dense algebra.

    ``B = -W^{-1} U_l U_r'`` on latent sites and the identity on merged
    exact-observation sites.
    """
    plan = U.plan
    resp_locs = plan.loc[plan.r]
    col = np.searchsorted(np.sort(resp_locs), resp_locs)
    n_o = resp_locs.size
    M = np.zeros((plan.n_locations, n_o))
    M[np.ix_(plan.loc[plan.ell], col)] = (U.mat[plan.ell, :] @ U.mat[plan.r, :].T).toarray()
    B = -vecchia_covariance(V) @ M
    fixed = np.flatnonzero(plan.latent_pos < 0)
    if fixed.size:
        B[fixed, np.searchsorted(np.sort(resp_locs), fixed)] = 1.0
    return B


def vecchia_implied_joint(U: SparseTriangularFactor, V: SparseTriangularFactor, z_o) -> GaussianDist:
    """Approximate posterior N(mu, W^{-1}) as a dense distribution over locations."""
    return GaussianDist(posterior_mean(U, V, z_o), vecchia_covariance(V))


def gaussian_kl(P: GaussianDist, Q: GaussianDist) -> float:
    """KL(P || Q) for multivariate normals."""
    if P.dim != Q.dim:
        raise ValueError("distributions have different dimensions")
    k = P.dim
    if k == 0:
        return 0.0
    cq = _chol(Q.cov, "Q covariance")
    cp = _chol(P.cov, "P covariance")
    d = Q.mean - P.mean
    tr = np.trace(sla.cho_solve(cq, P.cov))
    quad = d @ sla.cho_solve(cq, d)
    return 0.5 * (tr + quad - k + _logdet(cq) - _logdet(cp))


def _conditional(S, a, b):
    """Coefficients M and covariance of x_a | x_b under covariance S."""
    if b.size == 0:
        return np.zeros((a.size, 0)), S[np.ix_(a, a)]
    cf = _chol(S[np.ix_(b, b)], "conditioning block")
    M = sla.cho_solve(cf, S[np.ix_(b, a)]).T
    cov = S[np.ix_(a, a)] - M @ S[np.ix_(b, a)]
    return M, 0.5 * (cov + cov.T)


def conditional_kl(C, S, a, b) -> float:
    """CKL of x_a given x_b: exact covariance C, approximate covariance S.

    The divergence between the two conditional normals is averaged over
    x_b drawn from the exact model, which only adds a trace term.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    Mp, Sp = _conditional(C, a, b)
    Mq, Sq = _conditional(S, a, b)
    cq = _chol(Sq, "approximate conditional covariance")
    cp = _chol(Sp, "exact conditional covariance")
    D = Mp - Mq
    tr = np.trace(sla.cho_solve(cq, Sp))
    if b.size:
        tr += np.trace(sla.cho_solve(cq, D @ C[np.ix_(b, b)] @ D.T))
    return 0.5 * (tr - a.size + _logdet(cq) - _logdet(cp))


def vecchia_x_kl(U: SparseTriangularFactor, C) -> float:
    """KL(N(0, C) || N(0, (U U')^{-1})) from dense matrices."""
    Ud = U.toarray()
    N = Ud.shape[0]
    cf = _chol(C, "covariance of x")
    tr = np.einsum("ij,ij->", Ud, C @ Ud)
    return 0.5 * (tr - N - 2.0 * np.sum(np.log(U.diagonal)) - _logdet(cf))


def conditional_variance(C, i: int, g) -> float:
    """var(x_i | x_g) under covariance C."""
    g = np.asarray(g, dtype=np.int64)
    if g.size == 0:
        return float(C[i, i])
    cg = C[np.ix_(g, g)]
    c = C[g, i]
    return float(C[i, i] - c @ np.linalg.solve(cg, c))


def ckl_vecchia(plan: ConditioningPlan, C, start: int = 0) -> float:
    """Half the summed log ratios of truncated to full conditional variances.

    For ``start=0`` this is KL(f(x) || f_hat(x)); for ``start=k`` it is the
    CKL of entries k, k+1, ... given the first k entries. The full
    conditional variances are the squared diagonal of the Cholesky factor
    of ``C`` (plan order).
    """
    C = np.asarray(C, dtype=float)
    L = np.linalg.cholesky(C)
    full = np.diag(L) ** 2
    total = 0.0
    for i in range(start, plan.size):
        total += np.log(conditional_variance(C, i, plan.g(i)) / full[i])
    return 0.5 * total


def _clamp(v: float) -> float:
    """Round tiny negative divergences (roundoff) up to zero."""
    return 0.0 if KL_CLAMP <= v < 0.0 else v


def _block_kl_terms(Sp, Sq, D, Z):
    """Constant part and per-replicate mean parts of KL(N(.,Sp) || N(.,Sq))."""
    k = Sp.shape[0]
    if k == 0:
        return np.full(Z.shape[1], np.nan)
    cq = _chol(Sq, "approximate posterior covariance")
    cp = _chol(Sp, "exact posterior covariance")
    const = 0.5 * (np.trace(sla.cho_solve(cq, Sp)) - k + _logdet(cq) - _logdet(cp))
    R = D @ Z
    quad = 0.5 * np.einsum("ij,ij->j", R, sla.cho_solve(cq, R))
    return const + quad


def _marginal_kl_terms(sp_, sq, D, Z):
    if sp_.size == 0:
        return np.full(Z.shape[1], np.nan)
    R = D @ Z
    const = 0.5 * (sp_ / sq - 1.0 + np.log(sq / sp_))
    return np.mean(const[:, None] + 0.5 * R**2 / sq[:, None], axis=0)


def kl_report(geometry: GeometryModel, scheme: Scheme | str, params: MaternParams, noise: NoiseModel,
              m: int | None = None, replicates: int = 40, seed: int = 0, fill_order: str = "mindegree",
              factors=None) -> KLReport:
    """Joint and marginal KL of the approximate posterior, averaged over z_o.

    Replicates z_o are drawn from the exact model with a Philox generator.
    Merged exact-observation sites have identical point-mass posteriors
    under both models and are left out of the observed-site averages.
    """
    _check_cap(geometry.n)
    if factors is None:
        plan = build_plan(scheme, geometry, m)
        zero = np.zeros(geometry.n, dtype=bool)
        zero[geometry.o] = _site_nuggets(geometry, noise)[geometry.o] == 0.0
        plan = collapse_exact_observations(plan, zero)
        U = build_U(plan, geometry, params, noise)
        V = derive_V(U, fill_order)
    else:
        U, V = factors
        plan = U.plan
    A = exact_mean_map(geometry, params, noise)
    B = vecchia_mean_map(U, V)
    post = exact_posterior(geometry, params, noise, np.zeros(geometry.n_obs))
    S_hat = vecchia_covariance(V)

    K = _location_cov(geometry, params)
    o = geometry.o
    C_oo = K[np.ix_(o, o)] + np.diag(_site_nuggets(geometry, noise)[o])
    rng = np.random.Generator(np.random.Philox(seed))
    Z = np.linalg.cholesky(C_oo) @ rng.standard_normal((o.size, replicates)) if o.size else \
        np.zeros((0, replicates))

    fixed = plan.latent_pos < 0
    blocks = {"pred": geometry.p, "obs": o[~fixed[o]]}
    out = {}
    for key, idx in blocks.items():
        ix = np.ix_(idx, idx)
        D = (A - B)[idx]
        out["joint_" + key] = float(np.mean(_block_kl_terms(post.cov[ix], S_hat[ix], D, Z))) if idx.size else np.nan
        out["marg_" + key] = float(np.mean(_marginal_kl_terms(
            np.diag(post.cov)[idx], np.diag(S_hat)[idx], D, Z))) if idx.size else np.nan
    out = {k: _clamp(v) for k, v in out.items()}
    return KLReport(out["joint_pred"], out["joint_obs"], out["marg_pred"], out["marg_obs"], replicates)
