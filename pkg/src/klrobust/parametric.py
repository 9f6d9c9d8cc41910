"""Closed-form least favorable laws for Normal covariates.

With ``X ~ N(mu, Sigma)`` and a CATE that is quadratic in ``x``, exponential
tilting keeps the law Normal. A linear CATE only shifts the mean; a quadratic
one also rescales the covariance. These serve as exact oracles for the
sample-based solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

from .core import DimensionError, InfeasibleClaimError, KLRobustError


def _cholesky(m, what):
    try:
        return linalg.cholesky(m, lower=True)
    except linalg.LinAlgError as exc:
        raise ValueError(f"{what} is not positive definite") from exc


@dataclass(frozen=True)
class NormalModel:
    mu: np.ndarray
    sigma: np.ndarray

    def __init__(self, mu, sigma):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        if sigma.shape != (mu.size, mu.size):
            raise DimensionError(f"sigma has shape {sigma.shape} for a mean of length {mu.size}")
        if not np.allclose(sigma, sigma.T, rtol=0, atol=1e-12 * max(1.0, np.abs(sigma).max())):
            raise ValueError("sigma must be symmetric")
        sigma = 0.5 * (sigma + sigma.T)
        _cholesky(sigma, "sigma")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def k(self) -> int:
        return self.mu.size

    def sample(self, n, rng) -> np.ndarray:
        return rng.multivariate_normal(self.mu, self.sigma, size=n, method="cholesky")


@dataclass(frozen=True)
class QuadraticCate:
    """``tau(x) = x'Ax + beta'x + c``; ``A`` is symmetrized on input."""

    A: np.ndarray
    beta: np.ndarray
    c: float = 0.0

    def __init__(self, A, beta, c=0.0):
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        A = np.zeros((beta.size, beta.size)) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
        if A.shape != (beta.size, beta.size):
            raise DimensionError(f"A has shape {A.shape} for beta of length {beta.size}")
        object.__setattr__(self, "A", 0.5 * (A + A.T))
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "c", float(c))

    @property
    def is_linear(self) -> bool:
        return not np.any(self.A)

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.einsum("ij,jk,ik->i", x, self.A, x) + x @ self.beta + self.c

    def mean_under(self, mu, sigma) -> float:
        return float(np.trace(self.A @ sigma) + mu @ self.A @ mu + self.beta @ mu + self.c)


@dataclass(frozen=True)
class NormalLF:
    lambda_: float
    mu_star: np.ndarray
    sigma_star: np.ndarray
    delta_star: float


def normal_kl(a: NormalModel, b: NormalModel) -> float:
    """``KL(a || b)`` between two multivariate Normals."""
    if a.k != b.k:
        raise DimensionError(f"dimension mismatch: {a.k} vs {b.k}")
    La = _cholesky(a.sigma, "first covariance")
    Lb = _cholesky(b.sigma, "second covariance")
    logdet_a = 2.0 * np.sum(np.log(np.diag(La)))
    logdet_b = 2.0 * np.sum(np.log(np.diag(Lb)))
    diff = linalg.solve_triangular(Lb, b.mu - a.mu, lower=True)
    M = linalg.solve_triangular(Lb, La, lower=True)
    value = 0.5 * (logdet_b - logdet_a - a.k + float(diff @ diff) + float(np.sum(M * M)))
    return max(value, 0.0)


def _pd_interval(model: NormalModel, A):
    """Open interval of ``lambda`` keeping ``Sigma^-1 + 2 lambda A`` positive definite."""
    L = _cholesky(model.sigma, "sigma")
    ev = linalg.eigvalsh(L.T @ A @ L)
    pos, neg = ev[ev > 0], ev[ev < 0]
    lo = -1.0 / (2.0 * pos.max()) if pos.size else -math.inf
    hi = 1.0 / (2.0 * -neg.min()) if neg.size else math.inf
    return lo, hi


def _tilted_params(model: NormalModel, cate: QuadraticCate, lam):
    prec = linalg.inv(model.sigma) + 2.0 * lam * cate.A
    try:
        c = linalg.cho_factor(prec, lower=True)
    except linalg.LinAlgError as exc:
        raise KLRobustError(f"positive definiteness lost at lambda={lam!r}") from exc
    rhs = linalg.cho_solve(linalg.cho_factor(model.sigma, lower=True), model.mu) - lam * cate.beta
    mu_star = linalg.cho_solve(c, rhs)
    sigma_star = linalg.cho_solve(c, np.eye(model.k))
    return mu_star, 0.5 * (sigma_star + sigma_star.T)


def normal_lf(model: NormalModel, cate: QuadraticCate, tau_tilde: float, tol: float = 1e-12) -> NormalLF:
    """Least favorable Normal law pinning ``E[tau(X)]`` at ``tau_tilde``.

    Raises:
        InfeasibleClaimError: the CATE is constant and differs from ``tau_tilde``,
            or ``tau_tilde`` is outside the range reachable inside the
            positive definite region.
    """
    if cate.beta.size != model.k:
        raise DimensionError(f"CATE of dimension {cate.beta.size} for a model of dimension {model.k}")
    base_mean = cate.mean_under(model.mu, model.sigma)
    if tau_tilde == base_mean:
        return NormalLF(0.0, model.mu.copy(), model.sigma.copy(), 0.0)

    if cate.is_linear:
        if not np.any(cate.beta):
            raise InfeasibleClaimError("constant CATE: the target ATE cannot be reached by any shift")
        sb = model.sigma @ cate.beta
        var = float(cate.beta @ sb)
        lam = (base_mean - tau_tilde) / var
        mu_star = model.mu - lam * sb
        return NormalLF(lam, mu_star, model.sigma.copy(), 0.5 * lam * lam * var)

    lo, hi = _pd_interval(model, cate.A)

    def h(lam):
        m, s = _tilted_params(model, cate, lam)
        return cate.mean_under(m, s) - tau_tilde

    # h is decreasing; search the side of zero that carries the root
    going_up = base_mean > tau_tilde
    edge = hi if going_up else lo
    a, step = 0.0, 1.0
    b = None
    for _ in range(200):
        cand = a + step if going_up else a - step
        if math.isfinite(edge) and (cand >= edge if going_up else cand <= edge):
            cand = 0.5 * (a + edge)
            if abs(cand - edge) <= 1e-15 * max(1.0, abs(edge)):
                break
        value = h(cand)
        if (value < 0) == going_up or value == 0:
            b = cand
            break
        a, step = cand, 2.0 * step
    if b is None:
        raise InfeasibleClaimError(
            f"tau_tilde={tau_tilde!r} not reachable before positive definiteness fails near lambda={edge!r}"
        )
    lam = optimize.brentq(h, min(a, b), max(a, b), xtol=tol, rtol=4 * np.finfo(float).eps)
    mu_star, sigma_star = _tilted_params(model, cate, lam)
    delta = normal_kl(NormalModel(mu_star, sigma_star), model)
    return NormalLF(float(lam), mu_star, sigma_star, delta)
