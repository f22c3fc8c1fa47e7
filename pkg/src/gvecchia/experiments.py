"""Simulation studies, CSV data handling, cross-validation and benchmarks."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.linalg as sla
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .conditioning import ConfigurationError, Scheme, build_plan, collapse_exact_observations
from .covariance import MaternParams, NoiseModel, effective_range_to_rho, matern
from .geometry import build_geometry, min_separation_filter
from .likelihood import fit_parameters
from .oracle import DENSE_CAP, kl_report
from .prediction import conditional_sample, lincomb_distribution, posterior_mean, posterior_variances
from .sparse_engine import build_U, derive_V, dump_factors

__all__ = [
    "DataFormatError",
    "ExperimentConfig",
    "CVConfig",
    "Dataset",
    "SIMULATION_CAP",
    "make_locations",
    "simulate_dataset",
    "write_data_csv",
    "read_data_csv",
    "default_ordering",
    "run_comparison",
    "run_predict",
    "run_cv",
    "run_bench",
    "write_rows",
    "read_rows",
]

log = logging.getLogger(__name__)

SIMULATION_CAP = 10_000
LOGSCORE_CAP = 5000
COMPARISON_COLUMNS = ["scheme", "m", "nu", "snr", "joint_pred", "joint_obs", "marg_pred", "marg_obs", "replicates"]


class DataFormatError(ValueError):
    """Malformed input file."""


def _rng(*key) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Settings of a simulation study.

    ``location_mode="uniform+grid"`` draws observed locations uniformly on
    the unit interval or square (at least ``min_separation`` apart) and
    puts prediction locations on an equidistant grid; ``"file"`` reads
    them from ``location_file`` (data CSV schema).
    """

    dim: int = 1
    n_obs: int = 100
    n_pred: int = 100
    location_mode: str = "uniform+grid"
    location_file: str | None = None
    nus: list = field(default_factory=lambda: [0.5, 1.5])
    snrs: list = field(default_factory=lambda: [10.0])
    range_eff: float = 0.15
    variance: float = 1.0
    schemes: list = field(default_factory=lambda: ["rf-full", "rf-stand", "rf-ind", "lf-full", "lf-ind"])
    ms: list = field(default_factory=lambda: [1, 2, 4, 8, 16])
    replicates: int = 40
    seed: int = 0
    out: str = "results"
    ordering: str | None = None
    min_separation: float = 1e-4

    def validate(self) -> ExperimentConfig:
        if self.dim not in (1, 2):
            raise ConfigurationError("dim must be 1 or 2")
        if self.location_mode not in ("uniform+grid", "file"):
            raise ConfigurationError(f"unknown location mode {self.location_mode!r}")
        if self.location_mode == "file" and not self.location_file:
            raise ConfigurationError("location_mode 'file' needs location_file")
        for name in ("n_obs", "n_pred", "replicates"):
            if int(getattr(self, name)) < (0 if name == "n_pred" else 1):
                raise ConfigurationError(f"{name} must be positive")
        if any(float(s) <= 0 for s in self.snrs):
            raise ConfigurationError("SNR values must be positive")
        if any(float(v) <= 0 for v in self.nus) or self.range_eff <= 0 or self.variance <= 0:
            raise ConfigurationError("smoothness, effective range and variance must be positive")
        self.schemes = [Scheme(s, 0).name for s in self.schemes]
        if self.dim != 1 and "lf-auto" in self.schemes:
            raise ConfigurationError("lf-auto is only available for one-dimensional locations")
        if any(int(m) < 0 for m in self.ms):
            raise ConfigurationError("m values must be nonnegative")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class CVConfig:
    """Hold-out folds for cross-validation.

    ``kind="random"``: ``n_folds`` disjoint random subsets of ``fold_size``
    observed sites (default: a tenth of them). ``kind="block"``: the first coordinate is cut into
    ``n_blocks`` equal strips and ``n_folds`` of them are held out one at a
    time. ``folds`` lists explicit row-index sets instead.
    """

    kind: str = "random"
    n_folds: int = 5
    fold_size: int | None = None
    n_blocks: int = 10
    folds: list | None = None
    scores: tuple = ("rmse", "log_score")
    seed: int = 0

    def make_folds(self, locations, observed_rows) -> list[np.ndarray]:
        obs = np.asarray(observed_rows, dtype=np.int64)
        if self.folds is not None:
            folds = [np.asarray(f, dtype=np.int64) for f in self.folds]
            seen = np.concatenate(folds) if folds else np.empty(0, np.int64)
            if np.unique(seen).size != seen.size:
                raise ConfigurationError("cross-validation folds overlap")
            if not np.all(np.isin(seen, obs)):
                raise ConfigurationError("folds may only contain observed rows")
            return folds
        rng = _rng(self.seed)
        if self.kind == "random":
            size = self.fold_size or max(1, obs.size // 10)
            if self.n_folds * size >= obs.size:
                raise ConfigurationError("random folds would leave no training data")
            perm = rng.permutation(obs)
            return [np.sort(perm[k * size : (k + 1) * size]) for k in range(self.n_folds)]
        if self.kind == "block":
            x = np.asarray(locations, dtype=float)[obs, 0]
            edges = np.linspace(x.min(), x.max(), self.n_blocks + 1)
            strip = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, self.n_blocks - 1)
            chosen = rng.choice(self.n_blocks, size=min(self.n_folds, self.n_blocks), replace=False)
            folds = [np.sort(obs[strip == b]) for b in np.sort(chosen)]
            return [f for f in folds if f.size]
        raise ConfigurationError(f"unknown fold kind {self.kind!r}")


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Locations in input order; ``z`` is NaN at prediction rows."""

    locations: np.ndarray
    observed: np.ndarray
    z: np.ndarray
    y: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.locations.shape[1]


def _grid(n: int, dim: int) -> np.ndarray:
    if n == 0:
        return np.empty((0, dim))
    if dim == 1:
        return np.linspace(0.0, 1.0, n)[:, None]
    k = math.ceil(math.sqrt(n))
    g = np.linspace(0.0, 1.0, k)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])[:n]


def make_locations(config: ExperimentConfig, rng: np.random.Generator):
    """Observed and prediction locations; returns (points, observed mask)."""
    if config.location_mode == "file":
        data = read_data_csv(config.location_file)
        return data.locations, data.observed
    d, n_o = config.dim, config.n_obs
    sp = _grid(config.n_pred, d)
    grid = cKDTree(sp) if sp.shape[0] else None
    so = np.empty((0, d))
    while so.shape[0] < n_o:
        new = rng.uniform(size=(2 * n_o, d))
        if grid is not None:
            # observed sites must also keep their distance from the grid
            new = new[grid.query(new)[0] >= config.min_separation]
        cand = np.vstack([so, new])
        so = cand[min_separation_filter(cand, config.min_separation)]
    so = so[:n_o]
    pts = np.vstack([so, sp])
    obs = np.r_[np.ones(n_o, dtype=bool), np.zeros(sp.shape[0], dtype=bool)]
    return pts, obs


def simulate_dataset(config: ExperimentConfig, seed: int | None = None, nu: float | None = None,
                     snr: float | None = None) -> Dataset:
    """Draw y ~ N(0, K) at all locations and z_o = y_o + noise.

    Uses a dense Cholesky factor, so at most ``SIMULATION_CAP`` locations.
    """
    seed = config.seed if seed is None else seed
    nu = config.nus[0] if nu is None else nu
    snr = config.snrs[0] if snr is None else snr
    rng = _rng(seed)
    pts, obs = make_locations(config, rng)
    n = pts.shape[0]
    if n > SIMULATION_CAP:
        raise ConfigurationError(
            f"exact simulation is limited to {SIMULATION_CAP} locations (got {n}); "
            "simulate on a coarser grid and subsample instead"
        )
    params = MaternParams(config.variance, effective_range_to_rho(config.range_eff, nu), nu)
    K = matern(cdist(pts, pts), params)
    K[np.diag_indices(n)] += 1e-10 * config.variance
    L = np.linalg.cholesky(K)
    y = L @ rng.standard_normal(n)
    tau = math.sqrt(1.0 / snr)
    z = np.full(n, np.nan)
    z[obs] = y[obs] + tau * rng.standard_normal(int(obs.sum()))
    return Dataset(pts, obs, z, y)


def _coord_names(dim):
    return ["x", "y"][:dim]


def write_data_csv(path, data: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_coord_names(data.dim) + ["z"])
        for loc, z in zip(data.locations, data.z):
            w.writerow([repr(float(c)) for c in loc] + ["" if np.isnan(z) else repr(float(z))])


def read_data_csv(path, require_z: bool = False) -> Dataset:
    """Read ``x[,y],z`` (or ``x[,y]``) CSV; an empty z marks a prediction row."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[:1] != ["x"] or not set(header) <= {"x", "y", "z"} or len(set(header)) != len(header):
        raise DataFormatError(f"{path}:1: header must be x[,y][,z], got {rows[0]}")
    has_z = "z" in header
    if has_z and header[-1] != "z":
        raise DataFormatError(f"{path}:1: z must be the last column")
    if require_z and not has_z:
        raise DataFormatError(f"{path}:1: a z column is required")
    dim = len(header) - int(has_z)
    locs, zs = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            loc = [float(c) for c in row[:dim]]
            zc = row[dim].strip() if has_z else ""
            z = float(zc) if zc else np.nan
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from None
        if not all(np.isfinite(loc)) or (zc and not np.isfinite(z)):
            raise DataFormatError(f"{path}:{lineno}: non-finite value")
        locs.append(loc)
        zs.append(z)
    locations = np.asarray(locs, dtype=float).reshape(-1, dim)
    z = np.asarray(zs, dtype=float)
    return Dataset(locations, ~np.isnan(z), z)


def write_rows(path, rows: list[dict], columns: list[str]) -> None:
    """Write dict rows as CSV; floats at 17 significant digits."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def default_ordering(dim: int, scheme: str) -> str:
    if Scheme(scheme, 0).name == "lf-auto":
        return "coordinate"
    return "coordinate-op" if dim == 1 else "maxmin"


# ---------------------------------------------------------------------------
# comparison study
# ---------------------------------------------------------------------------


def run_comparison(config: ExperimentConfig, out_csv: str | None = None) -> list[dict]:
    """KL divergences of every (scheme, m, nu, SNR) cell, averaged over replicates.

    Each replicate draws new observed locations and one z_o; the joint and
    marginal divergences are averaged over replicates.
    """
    config.validate()
    n = config.n_obs + config.n_pred
    if n > DENSE_CAP:
        raise ConfigurationError(f"KL comparisons need dense algebra; n={n} exceeds {DENSE_CAP}")
    bad_m = [m for m in config.ms if m > n - 1]
    if bad_m:
        raise ConfigurationError(f"m values {bad_m} exceed n - 1 = {n - 1}")
    rows = []
    for ci, (nu, snr) in enumerate((nu, snr) for nu in config.nus for snr in config.snrs):
        params = MaternParams(config.variance, effective_range_to_rho(config.range_eff, nu), nu)
        noise = NoiseModel(1.0 / snr)
        acc = {}
        for rep in range(config.replicates):
            pts, obs = make_locations(config, _rng(config.seed, ci, rep))
            geos = {}
            for scheme in config.schemes:
                order = config.ordering or default_ordering(config.dim, scheme)
                if order not in geos:
                    geos[order] = build_geometry(pts, obs, order)
                for m in config.ms:
                    rep_seed = int(np.random.SeedSequence([config.seed, ci, rep]).generate_state(1)[0])
                    r = kl_report(geos[order], scheme, params, noise, m=m, replicates=1, seed=rep_seed)
                    acc.setdefault((scheme, m), []).append(r.as_row())
        for (scheme, m), reps in acc.items():
            row = {"scheme": scheme, "m": m, "nu": float(nu), "snr": float(snr)}
            for key in ("joint_pred", "joint_obs", "marg_pred", "marg_obs"):
                row[key] = float(np.mean([r[key] for r in reps]))
            row["replicates"] = len(reps)
            rows.append(row)
        log.info("comparison cell nu=%g snr=%g done", nu, snr)
    if out_csv:
        write_rows(out_csv, rows, COMPARISON_COLUMNS)
    return rows


# ---------------------------------------------------------------------------
# prediction on user data
# ---------------------------------------------------------------------------


def _factor(geometry, scheme, m, params, noise, fill_order="mindegree"):
    plan = build_plan(Scheme(scheme, m), geometry)
    zero = np.zeros(geometry.n, dtype=bool)
    zero[geometry.o] = noise.at(geometry.o, geometry.n, geometry.o) == 0.0
    plan = collapse_exact_observations(plan, zero)
    t0 = time.perf_counter()
    U = build_U(plan, geometry, params, noise)
    t1 = time.perf_counter()
    V = derive_V(U, fill_order)
    t2 = time.perf_counter()
    return U, V, t1 - t0, t2 - t1


def run_predict(data: Dataset | str, params: MaternParams | None, noise: NoiseModel | None, scheme: str, m: int,
                out_csv: str | None = None, exact_variances: bool = False, n_samples: int = 0, seed: int = 0,
                dump_dir: str | None = None, ordering: str | None = None, fit_init=None) -> list[dict]:
    """Predict at every row of a data set and write ``loc_id, coord..., mean, variance[, sample_k]``.

    Rows are reported in input order; ``loc_id`` is the zero-based data row.
    With ``params=None`` the parameters are first fitted by maximum Vecchia
    likelihood starting from ``fit_init``.
    """
    if isinstance(data, str):
        data = read_data_csv(data)
    if not data.observed.any():
        raise ConfigurationError("the data set has no observed rows")
    order = ordering or default_ordering(data.dim, scheme)
    geo = build_geometry(data.locations, data.observed, order)
    z_o = data.z[geo.permutation][geo.o]
    if params is None:
        init = fit_init or (MaternParams(float(np.var(z_o)) or 1.0, 0.1, 1.0), NoiseModel(0.1 * (float(np.var(z_o)) or 1.0)))
        fit = fit_parameters(z_o, geo, scheme, init, m=m)
        params, noise = fit.params, fit.noise
        log.info("fitted %s, nugget %.6g, loglik %.6f", params, noise.nugget, fit.loglik)
    U, V, t_u, t_v = _factor(geo, scheme, m, params, noise)
    mu = posterior_mean(U, V, z_o)
    var = posterior_variances(V, "exact" if exact_variances else "fast")
    samples = conditional_sample(V, mu, n_samples, seed) if n_samples else None
    log.info("U: nnz=%d (%.3fs)  V: nnz=%d, method=%s (%.3fs)", U.mat.nnz, t_u, V.mat.nnz, V.method, t_v)
    if dump_dir:
        dump_factors(dump_dir, U, V)
    inv = geo.inverse_permutation()
    rows = []
    coords = _coord_names(data.dim)
    for raw in range(data.locations.shape[0]):
        k = inv[raw]
        row = {"loc_id": raw}
        row.update({c: float(v) for c, v in zip(coords, data.locations[raw])})
        row["mean"] = float(mu[k])
        row["variance"] = float(var[k])
        for s in range(n_samples):
            row[f"sample_{s + 1}"] = float(samples[k, s])
        rows.append(row)
    if out_csv:
        cols = ["loc_id"] + coords + ["mean", "variance"] + [f"sample_{s + 1}" for s in range(n_samples)]
        write_rows(out_csv, rows, cols)
    return rows


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


def _fold_scores(data, train_mask, held, scheme, m, params, noise, ordering):
    geo = build_geometry(data.locations, train_mask, ordering or default_ordering(data.dim, scheme))
    inv = geo.inverse_permutation()
    z_o = data.z[geo.permutation][geo.o]
    U, V, _, _ = _factor(geo, scheme, m, params, noise)
    mu = posterior_mean(U, V, z_o)
    sites = inv[held]
    z_h = data.z[held]
    tau2 = noise.nugget if noise.is_scalar else np.asarray(noise.nugget)[held]
    err = z_h - mu[sites]
    if sites.size <= LOGSCORE_CAP:
        H = np.zeros((sites.size, geo.n))
        H[np.arange(sites.size), sites] = 1.0
        _, cov = lincomb_distribution(V, mu, H)
        cov[np.diag_indices_from(cov)] += tau2
        cf = sla.cho_factor(cov, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
        nll = 0.5 * (logdet + err @ sla.cho_solve(cf, err) + sites.size * np.log(2 * np.pi))
    else:
        warnings.warn("fold exceeds the joint log-score cap; using summed marginal log scores", RuntimeWarning,
                      stacklevel=3)
        v = posterior_variances(V, "fast")[sites] + tau2
        nll = 0.5 * float(np.sum(np.log(2 * np.pi * v) + err**2 / v))
    return float(np.sum(err**2)), float(nll), int(sites.size)


def run_cv(data: Dataset | str, cv: CVConfig, schemes, ms, params: MaternParams, noise: NoiseModel,
           out_csv: str | None = None, ordering: str | None = None) -> list[dict]:
    """RMSE and total negative log score of held-out responses per (scheme, m).

    ``rel_log_score`` subtracts the lowest total log score in the report.
    """
    if isinstance(data, str):
        data = read_data_csv(data)
    obs_rows = np.flatnonzero(data.observed)
    folds = cv.make_folds(data.locations, obs_rows)
    rows = []
    for scheme in schemes:
        for m in ms:
            sse = nll = cnt = 0
            for held in folds:
                train = data.observed.copy()
                train[held] = False
                s, l, c = _fold_scores(data, train, held, scheme, m, params, noise, ordering)
                sse, nll, cnt = sse + s, nll + l, cnt + c
            rows.append({"scheme": Scheme(scheme, 0).name, "m": int(m), "rmse": math.sqrt(sse / cnt),
                         "log_score": nll, "folds": len(folds)})
    best = min(r["log_score"] for r in rows)
    for r in rows:
        r["rel_log_score"] = r["log_score"] - best
    if out_csv:
        write_rows(out_csv, rows, ["scheme", "m", "rmse", "log_score", "rel_log_score", "folds"])
    return rows


# ---------------------------------------------------------------------------
# benchmarks
# ---------------------------------------------------------------------------


def run_bench(ns, ms, schemes, seed: int = 0, dim: int = 2, params: MaternParams | None = None,
              noise: NoiseModel | None = None, out_csv: str | None = None, ordering: str = "maxmin",
              repeats: int = 1) -> list[dict]:
    """Wall time of building U and deriving V, and average nonzeros per column of V.

    Locations are uniform on the unit square (or interval) with half of
    them observed. Times are medians over ``repeats`` runs.
    """
    params = params or MaternParams(1.0, effective_range_to_rho(0.15, 0.5), 0.5)
    noise = noise or NoiseModel(0.1)
    rows = []
    for n in ns:
        rng = _rng(seed, n)
        pts = rng.uniform(size=(n, dim))
        obs = np.arange(n) < n // 2
        geos = {}
        for scheme in schemes:
            order = "coordinate" if Scheme(scheme, 0).name == "lf-auto" else ordering
            if order not in geos:
                geos[order] = build_geometry(pts, obs, order, seed=seed)
            geo = geos[order]
            for m in ms:
                plan = build_plan(Scheme(scheme, m), geo)
                tu, tv = [], []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    U = build_U(plan, geo, params, noise)
                    t1 = time.perf_counter()
                    V = derive_V(U)
                    t2 = time.perf_counter()
                    tu.append(t1 - t0)
                    tv.append(t2 - t1)
                rows.append({
                    "scheme": plan.scheme.name, "n": int(n), "m": int(m),
                    "t_U": float(np.median(tu)), "t_V": float(np.median(tv)),
                    "annzc_V": float(V.offdiag_counts().mean()),
                    "max_offdiag_V": int(V.offdiag_counts().max()) if V.n else 0,
                    "bandwidth_V": V.bandwidth(), "nnz_V": int(V.mat.nnz), "V_method": V.method,
                })
                log.info("bench %s n=%d m=%d: U %.3fs V %.3fs", scheme, n, m, rows[-1]["t_U"], rows[-1]["t_V"])
    if out_csv:
        write_rows(out_csv, rows, list(rows[0]) if rows else [])
    return rows


def save_config(path, config) -> None:
    with open(path, "w") as fh:
        json.dump(asdict(config), fh, indent=2)
