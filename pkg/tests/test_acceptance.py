"""Acceptance suite: one check per criterion, each reporting PASS or FAIL.

Run with ``pytest tests/test_acceptance.py -v``; the per-criterion lines
are repeated in the terminal summary.
"""

import time

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from gvecchia import (
    MaternParams,
    NoiseModel,
    Scheme,
    build_geometry,
    build_plan,
    build_U,
    conditional_sample,
    derive_V,
    effective_range_to_rho,
    exact_posterior,
    kl_report,
    posterior_mean,
    posterior_variances,
    predict,
    selected_inverse,
    vecchia_loglik,
)
from gvecchia.covariance import LATENT, RESPONSE
from gvecchia.experiments import ExperimentConfig, run_comparison
from gvecchia.oracle import ckl_vecchia, conditional_kl, dense_x_covariance, vecchia_covariance
from gvecchia.sparse_engine import exact_variances

from ._oracles import brute_knn, kl_mvn, matern_np, mvn_logpdf

RESULTS: dict[str, list[tuple[bool, str]]] = {}

PARAMS, NOISE = MaternParams(1.0, 0.2, 1.5), NoiseModel(0.1)


def record(name, ok, detail):
    RESULTS.setdefault(name, []).append((bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"{name}: {detail}"


def relerr(a, b):
    return float(np.linalg.norm(np.asarray(a) - b) / max(np.linalg.norm(b), 1e-300))


def geometry(n_obs, n_pred, dim, seed, ordering):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(size=(n_obs + n_pred, dim))
    obs = np.r_[np.ones(n_obs, bool), np.zeros(n_pred, bool)]
    return build_geometry(pts, obs, ordering)


def latent_factors(scheme, geo, m, params=PARAMS, noise=NOISE, likelihood_mode=False):
    plan = build_plan(Scheme(scheme, m, likelihood_mode), geo)
    U = build_U(plan, geo, params, noise)
    return plan, U, derive_V(U)


# --- 1 ----------------------------------------------------------------------


@pytest.mark.parametrize("scheme", ["rf-full", "rf-stand", "lf-full", "lf-auto"])
def test_c01_exact_at_full_conditioning(scheme):
    t0 = time.perf_counter()
    if scheme == "lf-auto":
        geo = geometry(60, 40, 1, 1, "coordinate")
    else:
        geo = geometry(60, 40, 2, 1, "maxmin")
    z = np.random.default_rng(2).normal(size=geo.n_obs)
    truth = exact_posterior(geo, PARAMS, NOISE, z)
    res, U, V = predict(geo, scheme, PARAMS, NOISE, z, m=geo.n - 1, variances="exact", return_factors=True)
    e_mean = relerr(res.mean, truth.mean)
    e_cov = relerr(vecchia_covariance(V), truth.cov)
    rep = kl_report(geo, scheme, PARAMS, NOISE, factors=(U, V), replicates=10)
    kl = max(abs(v) for k, v in rep.as_row().items() if k != "replicates")
    dt = time.perf_counter() - t0
    record(f"criterion 1 [{scheme}]", e_mean <= 1e-8 and e_cov <= 1e-8 and kl <= 1e-8 and dt < 30,
           f"mean rel {e_mean:.1e}, covariance rel {e_cov:.1e}, max KL {kl:.1e}, {dt:.1f}s")


# --- 2 ----------------------------------------------------------------------


def test_c02_lf_auto_exponential_exact():
    rng = np.random.default_rng(5)
    geo = build_geometry(rng.uniform(size=200), rng.uniform(size=200) < 0.5, "coordinate")
    params = MaternParams(1.0, effective_range_to_rho(0.15, 0.5), 0.5)
    plan = build_plan("lf-auto", geo, 1)
    kl = ckl_vecchia(plan, dense_x_covariance(plan, geo, params, NOISE))
    record("criterion 2", abs(kl) <= 1e-10, f"KL(x) = {kl:.2e} at n=200, m=1")


# --- 3 and 4 ----------------------------------------------------------------

GRID_SEEDS = range(10)
GRID_MS = range(1, 9)


def grid_geometry(seed, scheme):
    # 40 observed and 30 prediction sites, alternating 1-D and 2-D layouts
    if scheme == "lf-auto":
        return geometry(40, 30, 1, seed, "coordinate")
    return geometry(40, 30, 1 + seed % 2, seed, "coordinate-op" if seed % 2 == 0 else "maxmin")


def named_divergences(scheme, geo, m):
    """Every divergence the monotonicity property covers for this scheme."""
    n, n_o = geo.n, geo.n_obs
    out = {}
    lik = scheme.startswith("rf")
    plan = build_plan(Scheme(scheme, m, likelihood_mode=lik), geo)
    C = dense_x_covariance(plan, geo, PARAMS, NOISE)
    out["KL(x)"] = ckl_vecchia(plan, C)
    if scheme == "lf-auto":
        return out
    plan, U, _ = latent_factors(scheme, geo, m)
    C = dense_x_covariance(plan, geo, PARAMS, NOISE)
    Ud = U.toarray()
    S = np.linalg.inv(Ud @ Ud.T)
    pos = {(int(k), int(l)): i for i, (k, l) in enumerate(zip(plan.kind, plan.loc))}

    def y(locs):
        return np.array([pos[(LATENT, j)] for j in locs], dtype=np.int64)

    zo = np.array([pos[(RESPONSE, j)] for j in geo.o], dtype=np.int64)
    out["CKL(y_p|y_o,z_o)"] = conditional_kl(C, S, y(geo.p), np.r_[y(geo.o), zo])
    if lik:
        out["CKL(y|z_o)"] = conditional_kl(C, S, y(range(n)), zo)
    if scheme in ("rf-stand", "rf-ind"):
        out["CKL(y_p|z_o)"] = conditional_kl(C, S, y(geo.p), zo)
    assert n_o == zo.size
    return out


@pytest.mark.parametrize("scheme", ["rf-full", "rf-stand", "rf-ind", "lf-full", "lf-ind", "lf-auto"])
def test_c03_kl_monotone_in_m(scheme):
    worst, where = -np.inf, ""
    for seed in GRID_SEEDS:
        geo = grid_geometry(seed, scheme)
        prev = None
        for m in GRID_MS:
            cur = named_divergences(scheme, geo, m)
            if prev is not None:
                for key, v in cur.items():
                    if v - prev[key] > worst:
                        worst, where = v - prev[key], f"{key}, seed {seed}, m={m}"
            prev = cur
    record(f"criterion 3 [{scheme}]", worst <= 1e-9, f"largest increase {worst:.1e} ({where})")


def test_c04_rf_full_dominates_rf_stand():
    worst, where = -np.inf, ""
    for seed in GRID_SEEDS:
        geo = grid_geometry(seed, "rf-full")
        for m in GRID_MS:
            full = named_divergences("rf-full", geo, m)
            stand = named_divergences("rf-stand", geo, m)
            for key in ("KL(x)", "CKL(y|z_o)"):
                if full[key] - stand[key] > worst:
                    worst, where = full[key] - stand[key], f"{key}, seed {seed}, m={m}"
    record("criterion 4", worst <= 1e-9, f"largest excess of rf-full over rf-stand {worst:.1e} ({where})")


# --- 5 ----------------------------------------------------------------------


def test_c05_rf_ind_local_kriging():
    geo = geometry(300, 200, 2, 7, "maxmin")
    m = 10
    _, U, V = latent_factors("rf-ind", geo, m)
    z = np.random.default_rng(8).normal(size=geo.n_obs)
    mu, var = posterior_mean(U, V, z), posterior_variances(V, "fast")
    pts, p = geo.locations, PARAMS
    e_mu = e_var = 0.0
    for i in range(geo.n):
        q = np.array(brute_knn(pts[i], pts, range(geo.n_obs), m))
        C = matern_np(cdist(pts[q], pts[q]), p.variance, p.range, p.smoothness) + NOISE.nugget * np.eye(m)
        c = matern_np(cdist(pts[[i]], pts[q]), p.variance, p.range, p.smoothness)[0]
        w = np.linalg.solve(C, c)
        e_mu = max(e_mu, abs(mu[i] - w @ z[q]))
        e_var = max(e_var, abs(var[i] - (p.variance - w @ c)))
    record("criterion 5", max(e_mu, e_var) <= 1e-10, f"max mean error {e_mu:.1e}, max variance error {e_var:.1e}")


# --- 6 ----------------------------------------------------------------------


def test_c06_joint_versus_marginal_plateau():
    t0 = time.perf_counter()
    cfg = ExperimentConfig(dim=1, n_obs=100, n_pred=100, nus=[1.5], snrs=[10.0], ms=[4, 20],
                           schemes=["rf-full", "rf-ind", "lf-ind"], replicates=40)
    kl = {(r["scheme"], r["m"]): r["joint_pred"] for r in run_comparison(cfg)}
    dt = time.perf_counter() - t0
    ratios = {s: kl[(s, 20)] / kl[(s, 4)] for s in ("rf-full", "rf-ind", "lf-ind")}
    ok = ratios["rf-ind"] >= 0.5 and ratios["lf-ind"] >= 0.5 and ratios["rf-full"] <= 0.1 and dt < 300
    record("criterion 6", ok, ", ".join(f"{s} KL20/KL4 {r:.3f}" for s, r in ratios.items()) + f", {dt:.1f}s")


# --- 7 ----------------------------------------------------------------------


@pytest.mark.parametrize("scheme", ["rf-full", "rf-stand", "rf-ind", "lf-full", "lf-ind", "lf-auto"])
def test_c07_likelihood_identity(scheme):
    # the simulation study's model: effective range 0.15, signal-to-noise 10
    n_o = 200
    p = MaternParams(1.0, effective_range_to_rho(0.15, 1.5), 1.5)
    geo = geometry(n_o, 0, 1 if scheme == "lf-auto" else 2, 9, "coordinate" if scheme == "lf-auto" else "maxmin")
    _, U, V = latent_factors(scheme, geo, n_o - 1, p, NOISE, likelihood_mode=True)
    z = np.random.default_rng(10).normal(size=n_o)
    P = geo.locations
    C = matern_np(cdist(P, P), p.variance, p.range, p.smoothness) + NOISE.nugget * np.eye(n_o)
    dense = mvn_logpdf(z, C)
    err = abs(vecchia_loglik(U, V, z) - dense)
    record(f"criterion 7 [{scheme}]", err <= 1e-8, f"|loglik - dense| = {err:.1e} (dense {dense:.3f})")


@pytest.mark.parametrize("scheme,m", [("rf-full", 3), ("rf-stand", 5), ("rf-ind", 2), ("lf-full", 4),
                                      ("lf-ind", 3), ("lf-auto", 2)])
def test_c07_ckl_identity(scheme, m):
    geo = geometry(30, 20, 1, 11, "coordinate" if scheme == "lf-auto" else "coordinate-op")
    plan, U, _ = latent_factors(scheme, geo, m, likelihood_mode=scheme.startswith("rf"))
    C = dense_x_covariance(plan, geo, PARAMS, NOISE)
    Ud = U.toarray()
    zero = np.zeros(plan.size)
    dense = kl_mvn(zero, C, zero, np.linalg.inv(Ud @ Ud.T))
    err = abs(ckl_vecchia(plan, C) - dense)
    record(f"criterion 7 CKL [{scheme}]", err <= 1e-8, f"|CKL - dense KL| = {err:.1e} (KL {dense:.4f})")


# --- 8 ----------------------------------------------------------------------


@pytest.mark.slow
def test_c08_sparsity():
    n, m = 100_000, 10
    geo = geometry(n // 2, n // 2, 2, 12, "maxmin")
    worst = {}
    for scheme in ("rf-full", "rf-stand", "rf-ind"):
        _, _, V = latent_factors(scheme, geo, m)
        worst[scheme] = int(V.offdiag_counts().max())
    # a jittered grid: i.i.d. uniform points at this n include near-duplicates
    rng = np.random.default_rng(13)
    x = (np.arange(n) + rng.uniform(0.1, 0.9, size=n)) / n
    geo1 = build_geometry(x, rng.uniform(size=n) < 0.5, "coordinate")
    # exponential covariance: at this spacing a smoother field is numerically singular
    exp_params = MaternParams(1.0, effective_range_to_rho(0.15, 0.5), 0.5)
    _, _, V = latent_factors("lf-auto", geo1, m, exp_params)
    band = V.bandwidth()
    ok = max(worst.values()) <= m and band <= m
    record("criterion 8", ok, ", ".join(f"{s} max off-diagonal {v}" for s, v in worst.items())
           + f", lf-auto bandwidth {band} (n={n}, m={m})")


# --- 9 ----------------------------------------------------------------------


def _factor_time(n, m=10, repeats=3):
    geo = geometry(n // 2, n - n // 2, 2, 14, "maxmin")
    plan = build_plan("rf-full", geo, m)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        derive_V(build_U(plan, geo, PARAMS, NOISE))
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


@pytest.mark.slow
def test_c09_linear_scaling():
    t_small, t_large = _factor_time(20_000), _factor_time(200_000)
    ratio = t_large / t_small
    ok = 10 / 3 <= ratio <= 30 and t_large < 120
    record("criterion 9", ok, f"t(20k) {t_small:.3f}s, t(200k) {t_large:.3f}s, ratio {ratio:.1f}")


# --- 10 ---------------------------------------------------------------------


@pytest.mark.parametrize("scheme", ["rf-full", "lf-full"])
def test_c10_padded_selected_inverse(scheme):
    geo = geometry(120, 80, 2, 15, "maxmin")
    _, U, V = latent_factors(scheme, geo, 8)
    S = selected_inverse(V, exact=True)
    M = V.toarray()
    Winv = np.linalg.inv(M @ M.T)
    coo = S.mat.tocoo()
    err = np.max(np.abs(coo.data - Winv[coo.row, coo.col])) / np.abs(Winv).max()
    record(f"criterion 10 padded [{scheme}]", err <= 1e-10, f"max entry error {err:.1e} on {coo.nnz} entries")


def test_c10_fast_selected_inverse():
    nu = 0.5
    params = MaternParams(1.0, effective_range_to_rho(0.15, nu), nu)
    geo = geometry(150, 150, 2, 16, "maxmin")
    _, _, V = latent_factors("rf-full", geo, 10, params, NoiseModel(0.1))
    fast, exact = selected_inverse(V).diag(), exact_variances(V)
    err = np.abs(fast - exact) / exact
    record("criterion 10 fast", err.max() <= 1e-6,
           f"max relative variance error {err.max():.1e}, mean {err.mean():.1e} (n=300, m=10)")


# --- 11 ---------------------------------------------------------------------


def test_c11_zero_noise_collapse():
    geo = geometry(40, 30, 2, 17, "maxmin")
    z = np.random.default_rng(18).normal(size=geo.n_obs)
    res = {s: predict(geo, s, PARAMS, NoiseModel(0.0), z, m=6, variances="exact")
           for s in ("rf-full", "rf-stand", "rf-ind", "lf-full", "lf-ind")}
    err = 0.0
    for a, b in (("rf-full", "rf-stand"), ("rf-full", "lf-full"), ("rf-ind", "lf-ind")):
        err = max(err, np.abs(res[a].mean - res[b].mean).max(), np.abs(res[a].variances - res[b].variances).max())
    record("criterion 11", err <= 1e-9, f"max disagreement {err:.1e}")


# --- 12 ---------------------------------------------------------------------


def test_c12_sampling():
    geo = geometry(12, 8, 2, 19, "maxmin")
    _, U, V = latent_factors("rf-full", geo, geo.n - 1)
    z = np.random.default_rng(20).normal(size=geo.n_obs)
    mu = posterior_mean(U, V, z)
    target = exact_posterior(geo, PARAMS, NOISE, z).cov
    draws = conditional_sample(V, mu, 100_000, seed=21)
    err = relerr(np.cov(draws), target)
    record("criterion 12", err <= 0.05, f"relative Frobenius error {err:.4f} from 100000 samples")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
