import math

import numpy as np
import pytest

from klrobust.core import Claim, DimensionError, InfeasibleClaimError, KLRobustError
from klrobust.parametric import NormalModel, QuadraticCate, normal_kl, normal_lf
from klrobust.solver import tilt_solve

MU = np.array([4.0, 3.0])
SIGMA = np.array([[2.0, 0.5], [0.5, 2.0]])
BETA = np.array([4.0, 1.0])


def test_linear_closed_form():
    lf = normal_lf(NormalModel(MU, SIGMA), QuadraticCate(None, BETA), 15.0)
    lam = 4.0 / 38.0
    assert lf.lambda_ == pytest.approx(lam, abs=1e-12)
    assert lf.delta_star == pytest.approx(0.5 * lam**2 * 38.0, abs=1e-12)
    assert np.allclose(lf.mu_star, [3.1053, 2.5789], atol=1e-4)
    # the published least favorable mean satisfies beta'mu* = 15
    assert BETA @ lf.mu_star == pytest.approx(15.0, abs=1e-12)
    assert np.array_equal(lf.sigma_star, SIGMA)


def test_linear_at_base_mean():
    lf = normal_lf(NormalModel(MU, SIGMA), QuadraticCate(None, BETA), 19.0)
    assert lf.lambda_ == 0.0 and lf.delta_star == 0.0 and np.array_equal(lf.mu_star, MU)


def test_univariate_display():
    lf = normal_lf(NormalModel([4.0], [[4.0]]), QuadraticCate(None, [1.0]), 0.0)
    assert lf.lambda_ == pytest.approx(1.0) and lf.mu_star[0] == pytest.approx(0.0)


def test_constant_cate_is_infeasible():
    with pytest.raises(InfeasibleClaimError):
        normal_lf(NormalModel(MU, SIGMA), QuadraticCate(None, [0.0, 0.0], c=2.0), 1.0)


def test_kl_reductions():
    a = NormalModel(MU, SIGMA)
    assert normal_kl(a, a) == 0.0
    b = NormalModel(MU + [1.0, -0.5], SIGMA)
    dmu = np.array([1.0, -0.5])
    assert normal_kl(a, b) == pytest.approx(0.5 * dmu @ np.linalg.solve(SIGMA, dmu))
    assert normal_kl(NormalModel([0.0], [[1.0]]), NormalModel([0.0], [[4.0]])) == pytest.approx(
        0.5 * (math.log(4) + 0.25 - 1)
    )


def test_kl_errors():
    with pytest.raises(DimensionError):
        normal_kl(NormalModel([0.0], [[1.0]]), NormalModel(MU, SIGMA))
    with pytest.raises(ValueError, match="positive definite"):
        NormalModel([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])


def test_two_routes_to_delta():
    model = NormalModel(MU, SIGMA)
    for cate, tt in [(QuadraticCate(None, BETA), 15.0),
                     (QuadraticCate([[0.1, 0.02], [0.02, 0.05]], BETA), 15.0),
                     (QuadraticCate([[-0.1, 0.0], [0.0, -0.05]], BETA), 5.0)]:
        lf = normal_lf(model, cate, tt)
        assert normal_kl(NormalModel(lf.mu_star, lf.sigma_star), model) == pytest.approx(lf.delta_star, abs=1e-10)
        assert cate.mean_under(lf.mu_star, lf.sigma_star) == pytest.approx(tt, abs=1e-9)


def test_quadratic_symmetrizes_A():
    q = QuadraticCate([[1.0, 2.0], [0.0, 1.0]], [0.0, 0.0])
    assert np.array_equal(q.A, [[1.0, 1.0], [1.0, 1.0]])


def test_quadratic_unreachable_target():
    # tau = x'x >= 0 cannot average below zero
    with pytest.raises(InfeasibleClaimError):
        normal_lf(NormalModel(MU, SIGMA), QuadraticCate(np.eye(2), [0.0, 0.0]), -1.0)


@pytest.mark.parametrize(
    "cate, tt",
    [(QuadraticCate(None, BETA), 15.0), (QuadraticCate([[0.1, 0.02], [0.02, 0.05]], BETA), 15.0)],
)
def test_sampled_tilt_agrees(cate, tt):
    model = NormalModel(MU, SIGMA)
    lf = normal_lf(model, cate, tt)
    x = model.sample(200_000, np.random.default_rng(1))
    sol = tilt_solve(cate(x), Claim("geq", tt))
    assert sol.lambda_ == pytest.approx(lf.lambda_, rel=0.02)
    assert sol.delta_star == pytest.approx(lf.delta_star, rel=0.02)


def test_linear_tilt_keeps_covariance():
    model = NormalModel(MU, SIGMA)
    x = model.sample(200_000, np.random.default_rng(2))
    sol = tilt_solve(x @ BETA, Claim("geq", 15.0))
    p = sol.lf_probs
    m = p @ x
    cov = (x - m).T @ ((x - m) * p[:, None])
    assert np.linalg.norm(cov - SIGMA) / np.linalg.norm(SIGMA) < 0.03
