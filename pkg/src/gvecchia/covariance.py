"""Matérn covariance kernel and the joint latent/response covariance.

The Matérn kernel uses the ``sqrt(2 nu) d / rho`` scaling::

    K(d) = sigma2 * 2**(1 - nu) / Gamma(nu) * t**nu * K_nu(t),   t = sqrt(2 nu) d / rho

with ``K(0) = sigma2``. Closed forms are used for ``nu`` in {0.5, 1.5, 2.5}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

__all__ = [
    "MaternParams",
    "NoiseModel",
    "matern",
    "model_cov",
    "effective_range_to_rho",
]

_CLOSED_FORMS = (0.5, 1.5, 2.5)


@dataclass(frozen=True)
class MaternParams:
    """Process variance, range and smoothness of a Matérn kernel."""

    variance: float = 1.0
    range: float = 1.0
    smoothness: float = 0.5

    def __post_init__(self):
        for name in ("variance", "range", "smoothness"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"Matérn {name} must be positive and finite, got {v!r}")


@dataclass(frozen=True)
class NoiseModel:
    """Nugget variances, either one scalar or one value per observed location.

    Per-location vectors are indexed by *location* (length ``n`` of the
    geometry, entries at prediction locations are used only by
    response-space prediction) or by observed location (length ``n_O``);
    :meth:`at` resolves both.
    """

    nugget: float | np.ndarray = 0.0

    def __post_init__(self):
        arr = np.asarray(self.nugget, dtype=float)
        if arr.ndim > 1:
            raise ValueError("nugget must be a scalar or a 1-D vector")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("nugget variances must be finite and nonnegative")
        if arr.ndim == 1:
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, "nugget", arr)
        else:
            object.__setattr__(self, "nugget", float(arr))

    @property
    def is_scalar(self) -> bool:
        return np.ndim(self.nugget) == 0

    def at(self, locs, n_locations: int | None = None, observed=None) -> np.ndarray:
        """Nugget variances at location indices ``locs``.

        ``observed`` (sorted observed location indices) is needed only when
        the vector is indexed by observed location.
        """
        locs = np.asarray(locs, dtype=np.int64)
        if self.is_scalar:
            return np.full(locs.shape, self.nugget)
        vec = self.nugget
        if n_locations is not None and vec.size == n_locations:
            return vec[locs]
        if observed is None:
            return vec[locs]
        observed = np.asarray(observed, dtype=np.int64)
        if vec.size != observed.size:
            raise ValueError(
                f"nugget vector has length {vec.size}, expected {observed.size} or {n_locations}"
            )
        rank = np.searchsorted(observed, locs)
        rank = np.clip(rank, 0, observed.size - 1)
        if not np.all(observed[rank] == locs):
            raise ValueError("per-observation nugget requested at an unobserved location")
        return vec[rank]

    def is_zero(self) -> bool:
        return bool(np.all(np.asarray(self.nugget) == 0.0))


def _check_distance(d):
    d = np.asarray(d, dtype=float)
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise ValueError("distances must be finite and nonnegative")
    return d


def _matern_bessel(d, params: MaternParams):
    nu = params.smoothness
    t = np.sqrt(2.0 * nu) * d / params.range
    out = np.full(t.shape, params.variance, dtype=float)
    pos = t > 0
    tp = t[pos]
    # kve(nu, t) = K_nu(t) exp(t); working in logs keeps small nu stable
    with np.errstate(under="ignore"):
        log_val = (
            (1.0 - nu) * np.log(2.0)
            - special.gammaln(nu)
            + nu * np.log(tp)
            + np.log(special.kve(nu, tp))
            - tp
        )
        out[pos] = params.variance * np.exp(log_val)
    return out


def _matern_closed(d, params: MaternParams):
    nu = params.smoothness
    t = np.sqrt(2.0 * nu) * d / params.range
    e = np.exp(-t)
    if nu == 0.5:
        poly = 1.0
    elif nu == 1.5:
        poly = 1.0 + t
    else:
        poly = 1.0 + t + t * t / 3.0
    return params.variance * poly * e


def matern(d, params: MaternParams, method: str = "auto"):
    """Matérn covariance at distance(s) ``d``.

    Parameters
    ----------
    d : float or array_like
        Nonnegative Euclidean distances.
    params : MaternParams
    method : {"auto", "bessel", "closed"}
        ``"auto"`` uses the closed form for nu in {0.5, 1.5, 2.5} and the
        Bessel expression otherwise.

    Returns
    -------
    float or ndarray
        Same shape as ``d``.
    """
    scalar = np.ndim(d) == 0
    d = np.atleast_1d(_check_distance(d))
    if method == "auto":
        method = "closed" if params.smoothness in _CLOSED_FORMS else "bessel"
    if method == "closed":
        if params.smoothness not in _CLOSED_FORMS:
            raise ValueError(f"no closed form for smoothness {params.smoothness}")
        out = _matern_closed(d, params)
    elif method == "bessel":
        out = _matern_bessel(d, params)
    else:
        raise ValueError(f"unknown method {method!r}")
    return float(out[0]) if scalar else out


def model_cov(i: int, j: int, plan, geometry, cov: MaternParams, noise: NoiseModel) -> float:
    """Covariance between entries ``i`` and ``j`` of the stacked vector x.

    The nugget is added only when both entries are responses at the same
    location.
    """
    li, lj = int(plan.loc[i]), int(plan.loc[j])
    d = float(np.linalg.norm(geometry.locations[li] - geometry.locations[lj]))
    c = matern(d, cov)
    if li == lj and plan.kind[i] == RESPONSE and plan.kind[j] == RESPONSE:
        c += float(noise.at([li], geometry.n, geometry.o)[0])
    return c


def effective_range_to_rho(r_eff: float, nu: float, level: float = 0.05) -> float:
    """Range parameter at which correlation drops to ``level`` at ``r_eff``."""
    if not r_eff > 0:
        raise ValueError("effective range must be positive")

    def f(log_rho):
        return matern(r_eff, MaternParams(1.0, float(np.exp(log_rho)), nu)) - level

    lo, hi = np.log(r_eff) - 12.0, np.log(r_eff) + 12.0
    if f(lo) * f(hi) > 0:
        raise ArithmeticError("effective-range search interval does not bracket a root")
    log_rho = optimize.bisect(f, lo, hi, xtol=1e-14, rtol=1e-12, maxiter=500)
    return float(np.exp(log_rho))


# entry kinds shared with the conditioning module
LATENT = 0
RESPONSE = 1
