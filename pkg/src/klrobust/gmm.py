"""Plug-in and de-biased GMM estimation of ``theta = (nu, lambda)``.

The robustness metric is ``delta* = -log nu``. The de-biased estimator adds an
influence-function correction built from the AIPW residual so that first-stage
estimation error in the CATE enters only at second order. Inference uses the
usual sandwich ``G^-1 Omega G^-T`` for the just-identified system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .core import (
    Claim,
    ConvergenceError,
    Dataset,
    KLRobustError,
    claim_holds,
)
from .solver import DEFAULT_TOL, feasibility_check, find_decreasing_root, partition_support, solve_lambda

_EXP_CAP = 700.0


@dataclass(frozen=True)
class Theta:
    nu: float
    lambda_: float

    def __post_init__(self):
        if not (np.isfinite(self.nu) and np.isfinite(self.lambda_)):
            raise ValueError("theta must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.nu, self.lambda_])


@dataclass(frozen=True)
class MomentFrame:
    """Per-observation moments: ``g``, the correction ``phi`` and ``psi = g + phi``.

    ``theta_tilde`` is the preliminary estimate at which ``phi`` was evaluated.
    """

    g: np.ndarray
    phi: np.ndarray
    theta_tilde: Theta

    @property
    def psi(self) -> np.ndarray:
        return self.g + self.phi

    @property
    def n(self) -> int:
        return self.g.shape[0]


@dataclass(frozen=True)
class DeltaInference:
    delta_hat: float
    se: float
    lower_bound: float
    alpha: float


@dataclass(frozen=True)
class ZetaResult:
    labels: tuple
    estimates: np.ndarray
    se: np.ndarray


@dataclass
class RobustnessReport:
    """Everything reported for one claim on one dataset.

    ``status`` is ``"ok"``, ``"claim invalid at baseline"`` (the claim already
    fails, so ``delta* = 0``) or ``"robustness infinite"`` (no shift can
    overturn the claim; numeric fields are ``None``).
    """

    status: str
    claim: Claim
    n: int
    alpha: float
    debiased: bool
    theta_hat: Theta | None = None
    delta_star_hat: float | None = None
    se_delta: float | None = None
    lower_bound: float | None = None
    sandwich: np.ndarray | None = None
    ate_hat: float | None = None
    plugin: dict | None = None
    zeta: ZetaResult | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "status": self.status,
            "claim": {"direction": self.claim.direction.value, "tau_tilde": self.claim.tau_tilde},
            "n": self.n,
            "alpha": self.alpha,
            "debiased": self.debiased,
            "ate_hat": _num(self.ate_hat),
            "theta_hat": None
            if self.theta_hat is None
            else {"nu": self.theta_hat.nu, "lambda": self.theta_hat.lambda_},
            "delta_star_hat": _num(self.delta_star_hat),
            "se_delta": _num(self.se_delta),
            "lower_bound": _num(self.lower_bound),
            "sandwich": None if self.sandwich is None else np.asarray(self.sandwich).tolist(),
            "plugin": self.plugin,
            "zeta": None
            if self.zeta is None
            else {
                "labels": list(self.zeta.labels),
                "estimates": [float(v) for v in self.zeta.estimates],
                "se": [float(v) for v in self.zeta.se],
            },
            "diagnostics": self.diagnostics,
        }
        return out


def _num(v):
    return None if v is None else float(v)


def _tilt_exp(lam, centered):
    return np.exp(np.minimum(-lam * centered, _EXP_CAP))


def moment_g(theta: Theta, tau_i, tau_tilde: float) -> np.ndarray:
    """``(e - nu, e (tau - tau_tilde))`` with ``e = exp(-lambda (tau - tau_tilde))``.

    Vectorized: an array of ``n`` CATE values gives an ``(n, 2)`` array.
    """
    tau = np.asarray(tau_i, dtype=float)
    c = tau - tau_tilde
    e = _tilt_exp(theta.lambda_, c)
    return np.stack([e - theta.nu, e * c], axis=-1)


def _check_pi(pi):
    pi = np.asarray(pi, dtype=float)
    if np.any(~((pi > 0) & (pi < 1))):
        raise ValueError("propensity outside (0, 1); trimming must happen upstream")
    return pi


def _aipw_residual(gamma1, gamma0, pi, d, y):
    return d * (y - gamma1) / pi - (1 - d) * (y - gamma0) / (1 - pi)


def influence_phi(theta: Theta, gamma1_i, gamma0_i, pi_i, d_i, y_i, tau_tilde: float) -> np.ndarray:
    """De-biasing correction for ``g``; vectorized over observations."""
    pi = _check_pi(pi_i)
    g1 = np.asarray(gamma1_i, dtype=float)
    g0 = np.asarray(gamma0_i, dtype=float)
    d = np.asarray(d_i, dtype=float)
    y = np.asarray(y_i, dtype=float)
    lam = theta.lambda_
    c = g1 - g0 - tau_tilde
    e = _tilt_exp(lam, c)
    r = _aipw_residual(g1, g0, pi, d, y)
    return np.stack([e * (-lam) * r, e * (1 - lam * c) * r], axis=-1)


def _tau_of(cate) -> np.ndarray:
    tau = getattr(cate, "tau_hat", cate)
    return np.asarray(tau, dtype=float).ravel()


def solve_theta_plugin(cate, tau_tilde: float, tol: float = DEFAULT_TOL) -> Theta:
    """Plug-in ``theta`` from the CATE values alone.

    ``cate`` is a :class:`~klrobust.learners.CateEstimate` or an array of
    CATE values.
    """
    tau = _tau_of(cate)
    if np.mean(tau) == tau_tilde:
        return Theta(1.0, 0.0)
    lam = solve_lambda(tau, None, tau_tilde, tol)
    nu = float(np.mean(_tilt_exp(lam, tau - tau_tilde)))
    return Theta(nu, lam)


def _solve_corrected(tau, tau_tilde, offset, tol, lam0):
    """Root in ``lambda`` of ``mean e (tau - tau_tilde) + offset``."""
    c = tau - tau_tilde

    def fun(lam):
        a = -lam * c
        shift = float(np.max(a))
        s = np.exp(a - shift)
        scale = math.exp(min(shift, _EXP_CAP))
        val = scale * float(np.mean(s * c)) + offset
        der = -scale * float(np.mean(s * c * c))
        return val, der

    eff = tol * max(1.0, float(np.max(np.abs(c))))
    try:
        lam, resid = find_decreasing_root(fun, eff, x0=lam0)
    except ConvergenceError:
        lam, resid = math.nan, math.inf
    if not abs(resid) <= 10 * eff:
        # derivative-free fallback on a wide bracket
        try:
            lam = optimize.brentq(lambda t: fun(t)[0], lam0 - 50.0, lam0 + 50.0, xtol=1e-14)
            resid = fun(lam)[0]
        except (ValueError, RuntimeError) as exc:
            raise ConvergenceError(
                f"de-biased lambda solve failed; last residual {resid!r}", residual=resid
            ) from exc
    return float(lam), float(resid)


def solve_theta_debiased(
    cate, data: Dataset, tau_tilde: float, tol: float = DEFAULT_TOL, iterations: int = 1
):
    """De-biased ``theta`` solving ``mean[g(theta) + phi(theta_tilde)] = 0``.

    ``theta_tilde`` starts at the plug-in solution; ``iterations > 1`` re-evaluates
    ``phi`` at the latest estimate that many times in total.

    Returns:
        tuple: ``(Theta, MomentFrame)``.
    """
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    tau = _tau_of(cate)
    theta_tilde = solve_theta_plugin(tau, tau_tilde, tol)
    args = (cate.gamma1_hat, cate.gamma0_hat, cate.pi_hat, data.d, data.y, tau_tilde)
    c = tau - tau_tilde
    theta = theta_tilde
    for _ in range(iterations):
        theta_tilde = theta
        phi = influence_phi(theta_tilde, *args)
        off = phi.mean(axis=0)
        lam, resid = _solve_corrected(tau, tau_tilde, float(off[1]), tol, theta_tilde.lambda_)
        nu = float(np.mean(_tilt_exp(lam, c))) + float(off[0])
        if not nu > 0:
            raise ConvergenceError(
                f"de-biased normalizer is not positive (nu={nu!r})", residual=resid
            )
        theta = Theta(nu, lam)
    frame = MomentFrame(moment_g(theta, tau, tau_tilde), phi, theta_tilde)
    return theta, frame


def moment_jacobian(theta: Theta, tau, tau_tilde: float) -> np.ndarray:
    """Sample average of the analytic Jacobian of ``g`` in ``(nu, lambda)``."""
    c = _tau_of(tau) - tau_tilde
    e = _tilt_exp(theta.lambda_, c)
    return np.array([[-1.0, -float(np.mean(e * c))], [0.0, -float(np.mean(e * c * c))]])


def sandwich_variance(frame: MomentFrame, theta: Theta, cate, tau_tilde: float) -> np.ndarray:
    """``S = G^-1 Omega G^-T`` with ``Omega`` the mean outer product of ``psi``."""
    tau = _tau_of(cate)
    G = moment_jacobian(theta, tau, tau_tilde)
    e_mean = float(np.mean(_tilt_exp(theta.lambda_, tau - tau_tilde)))
    if abs(G[1, 1]) <= 1e-12 * max(1.0, e_mean):
        raise KLRobustError(
            "singular moment Jacobian: the lambda direction is degenerate "
            "(CATE values have near-zero variance)"
        )
    psi = moment_g(theta, tau, tau_tilde) + frame.phi
    omega = psi.T @ psi / psi.shape[0]
    ginv = np.linalg.inv(G)
    S = ginv @ omega @ ginv.T
    return 0.5 * (S + S.T)


def delta_inference(theta: Theta, S, n: int, alpha: float = 0.05) -> DeltaInference:
    """Point estimate, standard error and one-sided lower bound for ``delta*``."""
    if not theta.nu > 0:
        raise ValueError("nu must be positive")
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    S = np.asarray(S, dtype=float)
    delta = -math.log(theta.nu)
    se = math.sqrt(max(S[0, 0], 0.0) / theta.nu**2 / n)
    z = float(stats.norm.ppf(1 - alpha))
    return DeltaInference(delta, se, delta - z * se, alpha)


def zeta_moments(
    cate,
    data: Dataset,
    theta: Theta,
    u_values,
    tau_tilde: float,
    theta_tilde: Theta | None = None,
    debias: bool = True,
    labels=None,
) -> ZetaResult:
    """Least favorable means ``zeta_j = E*[u_j(X)]`` with sandwich standard errors.

    ``theta`` is the converged estimate. The correction is evaluated at
    ``theta_tilde`` (defaults to ``theta``), matching how ``nu`` was solved,
    so ``u = 1`` returns exactly one. With ``debias=False`` the correction is
    dropped everywhere, including the variance.
    """
    u = np.asarray(u_values, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    tau = _tau_of(cate)
    n, s = u.shape
    if n != tau.shape[0]:
        raise ValueError(f"{n} rows of u for {tau.shape[0]} observations")
    if not np.all(np.isfinite(u)):
        raise ValueError("u values must be finite")
    if np.linalg.matrix_rank(u) < s:
        raise KLRobustError("u columns are collinear")
    labels = tuple(labels) if labels is not None else tuple(f"u{j}" for j in range(s))
    if len(labels) != s:
        raise ValueError("one label per u column is required")

    c = tau - tau_tilde
    e = _tilt_exp(theta.lambda_, c)
    g = moment_g(theta, tau, tau_tilde)
    if debias:
        tt = theta if theta_tilde is None else theta_tilde
        phi = influence_phi(tt, cate.gamma1_hat, cate.gamma0_hat, cate.pi_hat, data.d, data.y, tau_tilde)
        ct = tau - tau_tilde
        r = _aipw_residual(cate.gamma1_hat, cate.gamma0_hat, cate.pi_hat, data.d, data.y)
        phi_u = u * (_tilt_exp(tt.lambda_, ct) * (-tt.lambda_) * r)[:, None]
    else:
        phi = np.zeros_like(g)
        phi_u = np.zeros_like(u)
    zeta = (np.mean(u * e[:, None], axis=0) + phi_u.mean(axis=0)) / theta.nu

    # augmented just-identified system in (nu, lambda, zeta)
    psi = np.hstack([g + phi, u * e[:, None] - theta.nu * zeta + phi_u])
    G = np.zeros((s + 2, s + 2))
    G[:2, :2] = moment_jacobian(theta, tau, tau_tilde)
    G[2:, 0] = -zeta
    G[2:, 1] = -np.mean(u * (e * c)[:, None], axis=0)
    G[2:, 2:] = -theta.nu * np.eye(s)
    omega = psi.T @ psi / n
    ginv = np.linalg.inv(G)
    S = ginv @ omega @ ginv.T
    se = np.sqrt(np.maximum(np.diag(S)[2:], 0.0) / n)
    return ZetaResult(labels, zeta, se)


@dataclass(frozen=True)
class NeymanCheck:
    """Finite-difference sensitivity of the averaged moments to the nuisances.

    ``rows`` holds ``(r, |d mean psi|, |d mean g|)``. The linear coefficients
    come from regressing the per-observation differences on ``(r, r^2)``.
    """

    rows: list
    psi_linear: np.ndarray
    psi_linear_se: np.ndarray
    g_linear: np.ndarray
    g_linear_se: np.ndarray


def _default_direction1(x):
    return 0.5 * np.sin(2 * np.pi * x[:, 0]) + 0.3


def _default_direction0(x):
    return 0.4 * x[:, 0] ** 2 - 0.2


def neyman_check(
    data: Dataset,
    truth,
    theta0: Theta,
    r_grid,
    tau_tilde: float,
    direction1=_default_direction1,
    direction0=_default_direction0,
) -> NeymanCheck:
    """Perturb the true outcome regressions along ``r * h`` and track the moments.

    ``truth`` exposes ``gamma1(x)``, ``gamma0(x)`` and ``propensity(x)``.
    The propensity is kept at its true value.
    """
    x = data.x
    g1 = truth.gamma1(x)
    g0 = truth.gamma0(x)
    pi = np.broadcast_to(np.asarray(truth.propensity(x), dtype=float), g1.shape)
    h1, h0 = direction1(x), direction0(x)

    def moments(r):
        a1, a0 = g1 + r * h1, g0 + r * h0
        g = moment_g(theta0, a1 - a0, tau_tilde)
        return g, g + influence_phi(theta0, a1, a0, pi, data.d, data.y, tau_tilde)

    g_base, psi_base = moments(0.0)
    r_grid = np.asarray(r_grid, dtype=float)
    dg, dpsi, rows = [], [], []
    for r in r_grid:
        g_r, psi_r = moments(r)
        dg.append(g_r - g_base)
        dpsi.append(psi_r - psi_base)
        rows.append(
            (float(r), float(np.linalg.norm(dpsi[-1].mean(axis=0))), float(np.linalg.norm(dg[-1].mean(axis=0))))
        )
    Z = np.column_stack([r_grid, r_grid**2])
    C = np.linalg.pinv(Z)  # (2, R)

    def linear(diffs):
        b = np.einsum("r,rnj->nj", C[0], np.asarray(diffs))
        return b.mean(axis=0), b.std(axis=0, ddof=1) / math.sqrt(b.shape[0])

    pl, pse = linear(dpsi)
    gl, gse = linear(dg)
    return NeymanCheck(rows, pl, pse, gl, gse)


def _plugin_inference(tau, tau_tilde, theta, alpha):
    g = moment_g(theta, tau, tau_tilde)
    frame = MomentFrame(g, np.zeros_like(g), theta)
    S = sandwich_variance(frame, theta, tau, tau_tilde)
    return S, delta_inference(theta, S, tau.shape[0], alpha)


def estimate_robustness(
    data: Dataset,
    cate,
    claim: Claim,
    alpha: float = 0.05,
    tol: float = DEFAULT_TOL,
    debias: bool = True,
    iterations: int = 1,
    zeta_u=None,
    zeta_labels=None,
) -> RobustnessReport:
    """Full pipeline from cross-fitted nuisances to a :class:`RobustnessReport`."""
    tau = _tau_of(cate)
    tt = claim.tau_tilde
    resid = cate.aipw_residual(data)
    ate = float(np.mean(tau + resid)) if debias else float(np.mean(tau))
    verdict = feasibility_check(tau, tt)
    diag = {
        "feasibility_margin": verdict.margin,
        "tau_hat_min": verdict.tau_min,
        "tau_hat_max": verdict.tau_max,
        "trim_fraction": float(getattr(cate, "trim_fraction", 0.0)),
    }
    report = RobustnessReport("ok", claim, int(tau.shape[0]), alpha, debias, ate_hat=ate, diagnostics=diag)
    strict = claim_holds(ate, claim) and ate != tt
    if not strict:
        report.status = "claim invalid at baseline"
        report.theta_hat = Theta(1.0, 0.0)
        report.delta_star_hat = 0.0
        report.se_delta = 0.0
        report.lower_bound = 0.0
        return report
    if not verdict.feasible:
        report.status = "robustness infinite"
        return report

    plug = solve_theta_plugin(tau, tt, tol)
    S_plug, inf_plug = _plugin_inference(tau, tt, plug, alpha)
    report.plugin = {
        "nu": plug.nu,
        "lambda": plug.lambda_,
        "delta_star": inf_plug.delta_hat,
        "se": inf_plug.se,
        "lower_bound": inf_plug.lower_bound,
    }
    if debias:
        theta, frame = solve_theta_debiased(cate, data, tt, tol, iterations)
        S = sandwich_variance(frame, theta, tau, tt)
        inf = delta_inference(theta, S, tau.shape[0], alpha)
        diag["lambda_residual"] = float(frame.psi.mean(axis=0)[1])
        theta_tilde = frame.theta_tilde
    else:
        theta, S, inf = plug, S_plug, inf_plug
        diag["lambda_residual"] = float(moment_g(plug, tau, tt).mean(axis=0)[1])
        theta_tilde = None
    labels = partition_support(tau - tt, theta.lambda_)
    diag["partition"] = {k: int(np.sum(labels == k)) for k in ("UP", "DOWN", "NEUTRAL")}
    report.theta_hat = theta
    report.delta_star_hat = inf.delta_hat
    report.se_delta = inf.se
    report.lower_bound = inf.lower_bound
    report.sandwich = S
    if zeta_u is not None:
        report.zeta = zeta_moments(
            cate, data, theta, zeta_u, tt, theta_tilde=theta_tilde, debias=debias, labels=zeta_labels
        )
    return report
