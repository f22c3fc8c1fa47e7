import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gvecchia import MaternParams, NoiseModel, build_geometry, build_plan, effective_range_to_rho, matern
from gvecchia.covariance import model_cov

from ._oracles import matern_mp


def test_value_at_zero_is_variance():
    for nu in (0.3, 0.5, 1.5, 2.2):
        assert matern(0.0, MaternParams(2.5, 0.7, nu)) == 2.5


def test_exponential_closed_form():
    assert matern(1.0, MaternParams(1.0, 1.0, 0.5)) == pytest.approx(math.exp(-1.0), abs=1e-15)


def test_nu15_closed_form_matches_bessel():
    p = MaternParams(1.0, 1.0, 1.5)
    closed = matern(0.7, p, method="closed")
    bessel = matern(0.7, p, method="bessel")
    t = math.sqrt(3) * 0.7
    assert closed == pytest.approx((1 + t) * math.exp(-t), abs=1e-15)
    assert abs(closed - bessel) < 1e-10


@pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
def test_closed_and_bessel_agree_on_grid(nu):
    p = MaternParams(1.3, 0.4, nu)
    d = np.linspace(0, 3, 301)
    assert np.max(np.abs(matern(d, p, "closed") - matern(d, p, "bessel"))) < 1e-10


@pytest.mark.parametrize("nu", [0.0982, 0.3, 0.8, 1.7, 3.4])
def test_general_nu_against_high_precision(nu):
    p = MaternParams(1.0, 0.3, nu)
    for d in (1e-6, 1e-3, 0.05, 0.3, 1.0, 4.0):
        assert matern(d, p) == pytest.approx(matern_mp(d, 1.0, 0.3, nu), rel=1e-10, abs=1e-300)


@given(st.floats(0.05, 4.0), st.floats(0.05, 2.0))
@settings(max_examples=40, deadline=None)
def test_positive_and_decreasing(nu, rho):
    p = MaternParams(1.0, rho, nu)
    d = np.linspace(0, 3 * rho, 200)
    v = matern(d, p)
    assert np.all(v > 0)
    assert np.all(np.diff(v) < 0)


def test_rejects_bad_input():
    p = MaternParams()
    with pytest.raises(ValueError):
        matern(-1.0, p)
    with pytest.raises(ValueError):
        matern(np.nan, p)
    with pytest.raises(ValueError):
        MaternParams(0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        MaternParams(1.0, -1.0, 1.0)
    with pytest.raises(ValueError):
        matern(1.0, MaternParams(1, 1, 0.7), method="closed")
    with pytest.raises(ValueError):
        NoiseModel(-0.1)


def test_effective_range_exponential():
    assert effective_range_to_rho(0.15, 0.5) == pytest.approx(0.15 / math.log(20), rel=1e-10)
    assert effective_range_to_rho(3 * math.log(20), 0.5) == pytest.approx(3.0, rel=1e-10)


@pytest.mark.parametrize("nu", [1.5, 2.5, 0.9])
def test_effective_range_root(nu):
    rho = effective_range_to_rho(0.15, nu)
    assert matern(0.15, MaternParams(1.0, rho, nu)) == pytest.approx(0.05, abs=1e-9)


def test_effective_range_invalid():
    with pytest.raises(ValueError):
        effective_range_to_rho(0.0, 0.5)


def test_noise_model_indexing():
    nz = NoiseModel(np.array([0.1, 0.2, 0.3]))
    assert not nz.is_scalar
    np.testing.assert_array_equal(nz.at([0, 2, 5], observed=[0, 2, 5]), [0.1, 0.2, 0.3])
    assert NoiseModel(0.0).is_zero()
    with pytest.raises(ValueError):
        nz.at([1], observed=[0, 2, 5])


def test_model_cov_entries():
    pts = np.array([[0.0, 0.0], [0.3, 0.4]])
    geo = build_geometry(pts, [True, False], "none")
    plan = build_plan("rf-full", geo, 1)
    p, nz = MaternParams(1.0, 0.5, 0.5), NoiseModel(0.25)
    z0, y0, y1 = 0, 1, 2
    assert plan.kind[z0] == 1 and plan.kind[y0] == 0
    assert model_cov(y0, y0, plan, geo, p, nz) == 1.0
    assert model_cov(z0, z0, plan, geo, p, nz) == 1.25
    assert model_cov(z0, y1, plan, geo, p, nz) == pytest.approx(matern(0.5, p))
    for i in range(3):
        for j in range(3):
            assert model_cov(i, j, plan, geo, p, nz) == model_cov(j, i, plan, geo, p, nz)


def test_assembled_covariances_are_pd():
    rng = np.random.default_rng(0)
    pts = rng.uniform(size=(50, 2))
    geo = build_geometry(pts, rng.uniform(size=50) < 0.6, "maxmin")
    plan = build_plan("lf-full", geo, 3)
    p, nz = MaternParams(1.0, 0.3, 2.1), NoiseModel(0.05)
    C = np.array([[model_cov(i, j, plan, geo, p, nz) for j in range(plan.size)] for i in range(plan.size)])
    assert np.allclose(C, C.T)
    assert np.linalg.eigvalsh(C).min() > -1e-8 * np.trace(C)
