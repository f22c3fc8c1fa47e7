"""Vecchia log-likelihood of the observations and parameter fitting."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .conditioning import Scheme, build_plan
from .covariance import MaternParams, NoiseModel
from .geometry import GeometryModel
from .prediction import response_vector
from .sparse_engine import NumericalError, SparseTriangularFactor, build_U, derive_V, solve_upper

__all__ = ["vecchia_loglik", "loglik_at", "FitResult", "fit_parameters"]

log = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)


def vecchia_loglik(U: SparseTriangularFactor, V: SparseTriangularFactor, z_o) -> float:
    """Log-density of z_o under the Vecchia approximation, latents integrated out.

    With ``zt = U_r' z_o``::

        log f = sum log U_ii - sum log V_ii - zt'zt / 2
                + |V^{-1} U_l zt|^2 / 2 - (n_O / 2) log(2 pi)

    Raises
    ------
    NumericalError
        If a diagonal entry of U or V is not positive.
    """
    plan = U.plan
    du, dv = U.diagonal, V.diagonal
    if np.any(du <= 0) or np.any(dv <= 0):
        raise NumericalError("factor diagonals must be positive")
    zr = response_vector(plan, z_o)
    zt = U.mat[plan.r, :].T @ zr
    b = U.mat[plan.ell, :] @ zt
    if V.perm is not None:
        b = b[V.perm]
    w = solve_upper(V, b) if b.size else b
    return float(
        np.sum(np.log(du)) - np.sum(np.log(dv)) - 0.5 * zt @ zt + 0.5 * w @ w - 0.5 * zr.size * _LOG_2PI
    )


def loglik_at(geometry: GeometryModel, scheme: Scheme | str, params: MaternParams, noise: NoiseModel, z_o,
              m: int | None = None, fill_order: str = "mindegree", plan=None) -> float:
    """Vecchia log-likelihood of z_o on the observed locations of ``geometry``.

    Prediction locations are dropped; response-first schemes let each
    response condition on its nearest earlier responses.
    """
    if plan is None:
        obs_geo = geometry.observed_subset() if geometry.n_pred else geometry
        if not isinstance(scheme, Scheme):
            scheme = Scheme(scheme, m if m is not None else 0, likelihood_mode=True)
        plan = build_plan(scheme, obs_geo)
    else:
        obs_geo = geometry
    U = build_U(plan, obs_geo, params, noise)
    V = derive_V(U, fill_order)
    return vecchia_loglik(U, V, z_o)


@dataclass(frozen=True)
class FitResult:
    params: MaternParams
    noise: NoiseModel
    loglik: float
    converged: bool
    iterations: int
    message: str = ""


_NAMES = ("variance", "range", "smoothness", "nugget")


def fit_parameters(z_o, geometry: GeometryModel, scheme: Scheme | str, init: tuple[MaternParams, NoiseModel],
                   bounds: dict | None = None, m: int | None = None, fix_smoothness: bool = False,
                   maxiter: int = 400, xatol: float = 1e-4, fatol: float = 1e-6) -> FitResult:
    """Maximize the Vecchia log-likelihood with a Nelder-Mead simplex.

    The search runs over log(variance), log(range), log(smoothness) and
    log(nugget) within ``bounds`` (a dict of ``(low, high)`` pairs keyed by
    those names). The smoothness is held at its initial value when
    ``fix_smoothness`` is set. A warning is issued if the simplex does not
    converge within ``maxiter`` iterations; the best point found is
    returned either way.
    """
    params0, noise0 = init
    if not noise0.is_scalar:
        raise ValueError("fit_parameters estimates a single scalar nugget")
    defaults = {"variance": (1e-4, 1e4), "range": (1e-6, 1e6), "smoothness": (0.05, 5.0), "nugget": (1e-8, 1e4)}
    bounds = {**defaults, **(bounds or {})}
    x0_all = np.array([params0.variance, params0.range, params0.smoothness, noise0.nugget])
    for name, v in zip(_NAMES, x0_all):
        lo, hi = bounds[name]
        if not 0 < lo <= hi:
            raise ValueError(f"bounds for {name} must be positive and ordered")
        if not lo <= v <= hi:
            raise ValueError(f"initial {name}={v} lies outside its bounds {bounds[name]}")
    free = [i for i, name in enumerate(_NAMES) if not (fix_smoothness and name == "smoothness")]

    obs_geo = geometry.observed_subset() if geometry.n_pred else geometry
    if not isinstance(scheme, Scheme):
        scheme = Scheme(scheme, m if m is not None else 0, likelihood_mode=True)
    plan = build_plan(scheme, obs_geo)
    z_o = np.asarray(z_o, dtype=float)

    def unpack(theta):
        vals = x0_all.copy()
        vals[free] = np.exp(theta)
        return MaternParams(vals[0], vals[1], vals[2]), NoiseModel(vals[3])

    def objective(theta):
        p, nz = unpack(theta)
        try:
            return -loglik_at(obs_geo, scheme, p, nz, z_o, plan=plan)
        except (NumericalError, np.linalg.LinAlgError, ValueError):
            return np.inf

    log_bounds = [(np.log(bounds[_NAMES[i]][0]), np.log(bounds[_NAMES[i]][1])) for i in free]
    theta0 = np.log(x0_all[free])
    f0 = objective(theta0)
    res = optimize.minimize(
        objective, theta0, method="Nelder-Mead", bounds=log_bounds,
        options={"maxiter": maxiter, "xatol": xatol, "fatol": fatol},
    )
    theta, fval = (res.x, res.fun) if res.fun <= f0 else (theta0, f0)
    if not res.success:
        warnings.warn(f"likelihood maximization did not converge: {res.message}", RuntimeWarning, stacklevel=2)
    p, nz = unpack(theta)
    log.info("fit: loglik %.6f after %d iterations", -fval, res.nit)
    return FitResult(p, nz, float(-fval), bool(res.success), int(res.nit), str(res.message))
