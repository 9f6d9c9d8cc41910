"""Exponential tilting toward the closest claim-invalidating distribution.

The least favorable reweighting of a (possibly weighted) sample with CATE
values ``tau_i`` is ``w_i ∝ exp(-lam (tau_i - tau_tilde))`` where ``lam`` zeroes
the tilted moment ``sum_i p_i w_i (tau_i - tau_tilde)``. The robustness metric is
``delta* = -log(nu)`` with ``nu`` the mean of the unnormalized tilt.

All exponentials are shifted by their maximum before evaluation so that the
solver stays finite when ``|lam|`` is large near the edge of the CATE range.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from .core import (
    Claim,
    ConvergenceError,
    DimensionError,
    Direction,
    InfeasibleClaimError,
    WeightedEmpirical,
    base_probs,
    claim_holds,
)

DEFAULT_TOL = 1e-10
_BRACKET_CAP = 2.0**60
_DEGENERATE_RANGE = 1e-12
_NEUTRAL_TOL = 1e-10


@dataclass(frozen=True)
class FeasibilityVerdict:
    feasible: bool
    tau_min: float
    tau_max: float
    margin: float


@dataclass(frozen=True)
class TiltSolution:
    lambda_: float
    nu: float
    delta_star: float
    weights: WeightedEmpirical
    achieved_ate: float
    residual: float = 0.0
    trivial: bool = False

    @property
    def lf_probs(self) -> np.ndarray:
        """Least favorable probability of each point."""
        return self.weights.tilted_probs()


@dataclass(frozen=True)
class ConstrainedTiltSolution(TiltSolution):
    mu: tuple = ()
    moment_residuals: tuple = ()


@dataclass(frozen=True)
class ConstraintSpec:
    """Extra moment restriction ``E_{F'}[q(X)] = target``."""

    values: np.ndarray
    target: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(v)) or not np.isfinite(self.target):
            raise ValueError("constraint values and target must be finite")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "target", float(self.target))


@dataclass(frozen=True)
class PhiDivergenceSpec:
    """A phi-divergence described by its Fenchel conjugate and derivative.

    The caller vouches that ``conjugate`` is the convex conjugate of a convex
    ``phi`` with ``phi(1) = 0``; only monotonicity of the derivative is checked.
    """

    conjugate: Callable[[np.ndarray], np.ndarray]
    conjugate_derivative: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"

    def check_monotone(self, grid=None) -> bool:
        grid = np.linspace(-20, 5, 2001) if grid is None else np.asarray(grid)
        vals = np.asarray(self.conjugate_derivative(grid), dtype=float)
        return bool(np.all(np.diff(vals) >= -1e-12 * np.maximum(1.0, np.abs(vals[1:]))))


def kl_phi_spec() -> PhiDivergenceSpec:
    """KL divergence: ``phi(t) = t log t``, conjugate ``exp(s - 1)``."""
    return PhiDivergenceSpec(
        conjugate=lambda s: np.exp(np.asarray(s) - 1.0),
        conjugate_derivative=lambda s: np.exp(np.asarray(s) - 1.0),
        name="kl",
    )


def chi2_phi_spec() -> PhiDivergenceSpec:
    """Pearson chi-square ``phi(t) = (t - 1)^2 / 2`` restricted to ``t >= 0``."""

    def conj(s):
        s = np.asarray(s, dtype=float)
        return np.where(s >= -1.0, s + 0.5 * s * s, -0.5)

    def dconj(s):
        return np.maximum(1.0 + np.asarray(s, dtype=float), 0.0)

    return PhiDivergenceSpec(conj, dconj, name="chi2")


def _as_tau(tau_values) -> np.ndarray:
    tau = np.asarray(tau_values, dtype=float).ravel()
    if tau.size == 0:
        raise ValueError("tau_values must be nonempty")
    if not np.all(np.isfinite(tau)):
        raise ValueError("tau_values must be finite")
    return tau


def _tau_tilde(claim) -> float:
    return claim.tau_tilde if isinstance(claim, Claim) else float(claim)


def feasibility_check(tau_values, claim, base_weights=None) -> FeasibilityVerdict:
    """Whether ``tau_tilde`` lies strictly inside the observed CATE range.

    Points with zero base weight do not count toward the range.
    """
    tau = _as_tau(tau_values)
    if base_weights is not None:
        tau = tau[base_probs(tau.size, base_weights) > 0]
    tt = _tau_tilde(claim)
    lo, hi = float(tau.min()), float(tau.max())
    degenerate = hi - lo < _DEGENERATE_RANGE
    feasible = (lo < tt < hi) and not degenerate
    return FeasibilityVerdict(feasible, lo, hi, float(min(tt - lo, hi - tt)))


def find_decreasing_root(fun, tol, x0=0.0, scale=1.0, max_iter=400):
    """Root of a strictly decreasing function by safeguarded Newton.

    ``fun(x)`` returns ``(value, derivative)``. The bracket starts at
    ``x0 ± scale`` and doubles outward until it straddles a sign change, then
    Newton steps are taken whenever they stay inside the bracket and bisection
    is used otherwise.

    Returns:
        tuple: ``(root, value_at_root)``.
    """
    lo, hi = x0 - scale, x0 + scale
    f_lo, _ = fun(lo)
    f_hi, _ = fun(hi)
    width = scale
    while f_lo < 0:
        hi, f_hi = lo, f_lo
        width *= 2.0
        lo = x0 - width
        if width > _BRACKET_CAP:
            raise ConvergenceError("bracket expansion exceeded cap", residual=f_lo)
        f_lo, _ = fun(lo)
    while f_hi > 0:
        lo, f_lo = hi, f_hi
        width *= 2.0
        hi = x0 + width
        if width > _BRACKET_CAP:
            raise ConvergenceError("bracket expansion exceeded cap", residual=f_hi)
        f_hi, _ = fun(hi)
    if f_lo == 0:
        return lo, 0.0
    if f_hi == 0:
        return hi, 0.0

    x = min(max(x0, lo), hi)
    if not lo < x < hi:
        x = 0.5 * (lo + hi)
    fx, dfx = fun(x)
    best = (abs(fx), x, fx)
    for _ in range(max_iter):
        if abs(fx) <= tol:
            return x, fx
        if fx > 0:
            lo = x
        else:
            hi = x
        step_ok = dfx < 0 and np.isfinite(dfx)
        x_new = x - fx / dfx if step_ok else None
        if x_new is None or not (lo < x_new < hi):
            x_new = 0.5 * (lo + hi)
        if x_new == x or hi - lo <= 4 * np.finfo(float).eps * max(1.0, abs(x)):
            break
        x = x_new
        fx, dfx = fun(x)
        if abs(fx) < best[0]:
            best = (abs(fx), x, fx)
    return best[1], best[2]


def _tilt_parts(tau, probs, tau_tilde, lam):
    """Shifted tilt terms: ``(centered, shift, scaled, scaled_sum)``.

    ``exp(-lam (tau - tau_tilde)) = exp(shift) * scaled`` elementwise.
    """
    centered = tau - tau_tilde
    a = -lam * centered
    live = probs > 0
    shift = float(np.max(a[live])) if not np.all(live) else float(np.max(a))
    scaled = np.exp(a - shift)
    return centered, shift, scaled, float(np.dot(probs, scaled))


def _tilted_moment(tau, probs, tau_tilde):
    """Tilted mean of ``tau - tau_tilde`` and minus its tilted variance."""

    def fun(lam):
        centered, _, scaled, total = _tilt_parts(tau, probs, tau_tilde, lam)
        w = probs * scaled / total
        m1 = float(np.dot(w, centered))
        m2 = float(np.dot(w, centered * centered))
        return m1, -(m2 - m1 * m1)

    return fun


def _effective_tol(tol, tau, tau_tilde):
    return tol * max(1.0, float(np.max(np.abs(tau - tau_tilde))))


def solve_lambda(tau_values, base_weights=None, tau_tilde=0.0, tol=DEFAULT_TOL) -> float:
    """Lagrange multiplier of the tilt that pins the ATE at ``tau_tilde``.

    The residual controlled by ``tol`` is the tilted ATE minus ``tau_tilde``;
    ``tol`` is relative to ``max|tau - tau_tilde|`` when that exceeds one.

    Raises:
        InfeasibleClaimError: ``tau_tilde`` is not strictly inside the CATE range.
        ConvergenceError: the bracket could not be found or the residual stalls.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    tau = _as_tau(tau_values)
    probs = base_probs(tau.size, base_weights)
    verdict = feasibility_check(tau, tau_tilde, base_weights)
    if not verdict.feasible:
        raise InfeasibleClaimError(
            "non-emptiness violated; robustness metric infinite "
            f"(tau_tilde={tau_tilde!r} outside ({verdict.tau_min!r}, {verdict.tau_max!r}))",
            verdict=verdict,
        )
    fun = _tilted_moment(tau, probs, tau_tilde)
    eff = _effective_tol(tol, tau, tau_tilde)
    spread = verdict.tau_max - verdict.tau_min
    lam, resid = find_decreasing_root(fun, eff)
    if not abs(resid) <= max(eff, 1e3 * np.finfo(float).eps * max(1.0, spread)):
        raise ConvergenceError(f"lambda residual {resid!r} above tolerance {eff!r}", residual=resid)
    return float(lam)


def _trivial_solution(tau, probs, base) -> TiltSolution:
    ones = np.ones_like(tau)
    return TiltSolution(
        lambda_=0.0,
        nu=1.0,
        delta_star=0.0,
        weights=WeightedEmpirical(ones, base),
        achieved_ate=float(np.dot(probs, tau)),
        residual=0.0,
        trivial=True,
    )


def _violated_at_baseline(ate, claim: Claim) -> bool:
    """True when the claim does not hold strictly at the empirical ATE."""
    if claim.direction is Direction.GEQ:
        return not ate > claim.tau_tilde
    return not ate < claim.tau_tilde


def tilt_from_lambda(tau_values, lam, tau_tilde, base_weights=None):
    """``(nu, delta_star, weights)`` of the tilt at a given multiplier."""
    tau = _as_tau(tau_values)
    probs = base_probs(tau.size, base_weights)
    _, shift, scaled, total = _tilt_parts(tau, probs, tau_tilde, lam)
    delta = -shift - math.log(total)
    nu = math.exp(shift) * total if shift < 700 else math.inf
    return nu, delta, scaled / total


def tilt_solve(tau_values, claim: Claim, tol=DEFAULT_TOL, base_weights=None) -> TiltSolution:
    """Least favorable reweighting and robustness metric for ``claim``.

    When the claim already fails (or holds only with equality) at the
    empirical ATE the experimental distribution itself is least favorable and
    the trivial solution ``delta* = 0`` is returned.
    """
    tau = _as_tau(tau_values)
    probs = base_probs(tau.size, base_weights)
    ate = float(np.dot(probs, tau))
    if _violated_at_baseline(ate, claim):
        return _trivial_solution(tau, probs, None if base_weights is None else probs)
    lam = solve_lambda(tau, probs, claim.tau_tilde, tol)
    nu, delta, w = tilt_from_lambda(tau, lam, claim.tau_tilde, probs)
    achieved = float(np.dot(probs * w, tau))
    base = None if base_weights is None else probs
    return TiltSolution(
        lambda_=lam,
        nu=nu,
        delta_star=max(delta, 0.0),
        weights=WeightedEmpirical(w, base),
        achieved_ate=achieved,
        residual=achieved - claim.tau_tilde,
    )


def partition_support(tau_values, lam, base_weights=None, tol=_NEUTRAL_TOL) -> np.ndarray:
    """Label each point ``"UP"``, ``"DOWN"`` or ``"NEUTRAL"`` under the tilt.

    A point is up-weighted when ``exp(-lam tau_i)`` exceeds its base mean, i.e.
    when its least favorable weight is above one.
    """
    tau = _as_tau(tau_values)
    probs = base_probs(tau.size, base_weights)
    _, _, scaled, total = _tilt_parts(tau, probs, 0.0, lam)
    w = scaled / total
    labels = np.full(tau.shape, "NEUTRAL", dtype=object)
    labels[w > 1 + tol] = "UP"
    labels[w < 1 - tol] = "DOWN"
    return labels


@dataclass(frozen=True)
class CurvePoint:
    tau_tilde: float
    lambda_: float
    delta_star: float
    feasible: bool


def lambda_curve(tau_values, tau_grid, base_weights=None, tol=DEFAULT_TOL) -> list:
    """Multiplier and robustness metric along a grid of targets.

    Each target is solved direction-agnostically, so the empirical ATE gives
    ``lam = 0`` and ``delta* = 0`` and ``lam`` decreases strictly across the
    grid. Infeasible targets are kept with ``feasible=False`` and NaN values.
    """
    tau = _as_tau(tau_values)
    probs = base_probs(tau.size, base_weights)
    ate = float(np.dot(probs, tau))
    out = []
    for tt in np.asarray(tau_grid, dtype=float).ravel():
        tt = float(tt)
        if tt == ate:
            out.append(CurvePoint(tt, 0.0, 0.0, True))
            continue
        try:
            lam = solve_lambda(tau, probs, tt, tol)
        except InfeasibleClaimError:
            out.append(CurvePoint(tt, math.nan, math.nan, False))
            continue
        _, delta, _ = tilt_from_lambda(tau, lam, tt, probs)
        out.append(CurvePoint(tt, lam, max(delta, 0.0), True))
    return out


@dataclass(frozen=True)
class ConcentrationProfile:
    rows: list
    peak: np.ndarray
    multiple_peaks: bool


def _standardize(x):
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    return (x - x.mean(axis=0)) / sd, sd


def concentration_profile(
    tau_fn_values,
    x_points,
    tau_grid_to_boundary,
    ball_radius,
    standardize=True,
    base_weights=None,
    tol=DEFAULT_TOL,
) -> ConcentrationProfile:
    """Least favorable mass near the CATE maximizer as targets approach it.

    Distances are Euclidean; with ``standardize`` each covariate is divided by
    its standard deviation first so ``ball_radius`` is in standardized units.
    ``multiple_peaks`` is set (with a warning) when near-maximal CATE values are
    attained farther apart than ``ball_radius``.
    """
    tau = _as_tau(tau_fn_values)
    x = np.asarray(x_points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != tau.size:
        raise DimensionError("x_points and tau_fn_values differ in length")
    probs = base_probs(tau.size, base_weights)
    z = _standardize(x.copy())[0] if standardize else x
    top = int(np.argmax(tau))
    spread = tau.max() - tau.min()
    near = np.flatnonzero(tau >= tau.max() - 1e-8 * max(spread, 1e-300))
    far = np.linalg.norm(z[near] - z[top], axis=1) > ball_radius
    multiple = bool(np.any(far))
    if multiple:
        warnings.warn("CATE maximizer is not unique; concentration need not occur", RuntimeWarning)
    in_ball = np.linalg.norm(z - z[top], axis=1) <= ball_radius
    ate = float(np.dot(probs, tau))
    rows = []
    for tt in np.asarray(tau_grid_to_boundary, dtype=float).ravel():
        tt = float(tt)
        if tt == ate:
            w = np.ones_like(tau)
        else:
            lam = solve_lambda(tau, probs, tt, tol)
            _, _, w = tilt_from_lambda(tau, lam, tt, probs)
        rows.append((tt, float(np.dot(probs * w, in_ball))))
    return ConcentrationProfile(rows, x[top].copy(), multiple)


def _strictly_feasible_lp(z, probs, margin=1e-9) -> bool:
    """Whether some strictly positive ratio vector satisfies ``E_w[z] = 0``.

    Solves ``max t`` subject to ``w_i >= t``, ``sum p_i w_i = 1``,
    ``sum p_i w_i z_i = 0``.
    """
    n, m = z.shape
    c = np.zeros(n + 1)
    c[-1] = -1.0
    a_eq = np.zeros((m + 1, n + 1))
    a_eq[0, :n] = probs
    a_eq[1:, :n] = (probs[:, None] * z).T
    b_eq = np.zeros(m + 1)
    b_eq[0] = 1.0
    a_ub = np.hstack([-np.eye(n), np.ones((n, 1))])
    b_ub = np.zeros(n)
    bounds = [(0, None)] * n + [(None, 1.0)]
    res = optimize.linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs")
    return bool(res.status == 0 and -res.fun > margin)


def _newton_tilt(z, probs, tol, max_iter=200):
    """Multipliers ``eta`` with ``E_w[z] = 0`` for ``w ∝ exp(-z eta)``.

    Damped Newton on the stacked moments with a backtracking line search on
    the residual norm.
    """
    m = z.shape[1]
    eta = np.zeros(m)

    def moments(e):
        a = -z @ e
        shift = float(np.max(a[probs > 0]))
        s = np.exp(a - shift)
        w = probs * s / np.dot(probs, s)
        mean = w @ z
        return mean, w, shift, float(np.dot(probs, s))

    mean, w, shift, total = moments(eta)
    scale = max(1.0, float(np.max(np.abs(z))))
    for _ in range(max_iter):
        norm = float(np.max(np.abs(mean)))
        if norm <= tol * scale:
            return eta, mean, shift, total, w
        zc = z - mean
        hess = (w[:, None] * zc).T @ zc
        try:
            step = np.linalg.solve(hess, mean)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError("singular Hessian in constrained tilt", residual=mean) from exc
        t = 1.0
        while True:
            cand = eta + t * step
            c_mean, c_w, c_shift, c_total = moments(cand)
            if np.linalg.norm(c_mean) < np.linalg.norm(mean) or t < 1e-12:
                break
            t *= 0.5
        if t < 1e-12:
            break
        eta, mean, w, shift, total = cand, c_mean, c_w, c_shift, c_total
    if float(np.max(np.abs(mean))) <= 1e3 * tol * scale:
        return eta, mean, shift, total, w
    raise ConvergenceError(f"constrained tilt did not converge; residuals {mean.tolist()}", residual=mean)


def constrained_tilt_solve(
    tau_values,
    claim: Claim,
    constraints: Sequence[ConstraintSpec] = (),
    tol=DEFAULT_TOL,
    base_weights=None,
) -> ConstrainedTiltSolution:
    """Least favorable tilt that also holds extra covariate moments fixed.

    The ATE restriction binds unless the distribution matching the extra
    moments alone already invalidates the claim, in which case ``lam = 0``.

    Raises:
        InfeasibleClaimError: no strictly positive reweighting meets all
            restrictions.
        ConvergenceError: Newton iterations stalled.
    """
    tau = _as_tau(tau_values)
    probs = base_probs(tau.size, base_weights)
    constraints = list(constraints)
    base = None if base_weights is None else probs
    if not constraints:
        sol = tilt_solve(tau, claim, tol, base_weights)
        return ConstrainedTiltSolution(**sol.__dict__, mu=(), moment_residuals=())
    for c in constraints:
        if c.values.shape != tau.shape:
            raise DimensionError("constraint values must have one entry per observation")
    q = np.column_stack([c.values - c.target for c in constraints])

    # moments alone first; the claim constraint is slack if that already breaks it
    if np.allclose(q, 0.0):
        eta_q = np.zeros(q.shape[1])
        w_q = np.ones_like(tau)
        shift_q, total_q = 0.0, 1.0
    else:
        if not _strictly_feasible_lp(q, probs):
            raise InfeasibleClaimError("extra moment restrictions are jointly infeasible")
        eta_q, _, shift_q, total_q, wq = _newton_tilt(q, probs, tol)
        w_q = wq / probs
    ate_q = float(np.dot(probs * w_q, tau))
    if _violated_at_baseline(ate_q, claim):
        delta = max(-shift_q - math.log(total_q), 0.0)
        return ConstrainedTiltSolution(
            lambda_=0.0,
            nu=math.exp(shift_q) * total_q,
            delta_star=delta,
            weights=WeightedEmpirical(w_q, base),
            achieved_ate=ate_q,
            residual=0.0,
            trivial=True,
            mu=tuple(float(v) for v in eta_q),
            moment_residuals=tuple(float(v) for v in (probs * w_q) @ q),
        )

    z = np.column_stack([tau - claim.tau_tilde, q])
    if not _strictly_feasible_lp(z, probs):
        raise InfeasibleClaimError(
            "joint system infeasible: no positive reweighting attains the target ATE "
            "and the extra moments"
        )
    eta, mean, shift, total, wp = _newton_tilt(z, probs, tol)
    w = wp / probs
    return ConstrainedTiltSolution(
        lambda_=float(eta[0]),
        nu=math.exp(shift) * total if shift < 700 else math.inf,
        delta_star=max(-shift - math.log(total), 0.0),
        weights=WeightedEmpirical(w, base),
        achieved_ate=float(np.dot(wp, tau)),
        residual=float(mean[0]),
        mu=tuple(float(v) for v in eta[1:]),
        moment_residuals=tuple(float(v) for v in mean[1:]),
    )


@dataclass(frozen=True)
class PhiTiltSolution:
    lambda_: float
    xi: float
    delta_phi: float
    weights: np.ndarray = field(repr=False)


def _bracket_decreasing(f, x0, step):
    lo, hi = x0 - step, x0 + step
    width = step
    while f(lo) < 0:
        width *= 2
        lo = x0 - width
        if width > _BRACKET_CAP:
            raise ConvergenceError("bracket expansion exceeded cap")
    while f(hi) > 0:
        width *= 2
        hi = x0 + width
        if width > _BRACKET_CAP:
            raise ConvergenceError("bracket expansion exceeded cap")
    return lo, hi


def phi_tilt_solve(
    tau_values, claim: Claim, spec: PhiDivergenceSpec, tol=DEFAULT_TOL, base_weights=None
) -> PhiTiltSolution:
    """Least favorable reweighting under a general phi-divergence.

    Solves the normalization ``E[phi*'(s - xi)] = 1`` for ``xi`` inside the
    multiplier condition ``E[phi*'(s - xi) (tau - tau_tilde)] = 0`` where
    ``s = -lam (tau - tau_tilde)``. The attained divergence is recovered from
    Fenchel equality, ``phi(w) = s w - phi*(s)`` at ``w = phi*'(s)``.
    """
    tau = _as_tau(tau_values)
    probs = base_probs(tau.size, base_weights)
    tt = claim.tau_tilde
    centered = tau - tt
    dconj = spec.conjugate_derivative

    def xi_of(lam):
        s = -lam * centered
        f = lambda xi: float(np.dot(probs, dconj(s - xi))) - 1.0
        x0 = float(np.max(s))
        lo, hi = _bracket_decreasing(f, x0, 1.0)
        try:
            return optimize.brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
        except (RuntimeError, ValueError) as exc:
            raise ConvergenceError(f"normalizer solve failed at lambda={lam!r}") from exc

    def h(lam):
        xi = xi_of(lam)
        return float(np.dot(probs, dconj(-lam * centered - xi) * centered))

    ate = float(np.dot(probs, tau))
    if _violated_at_baseline(ate, claim):
        lam = 0.0
    else:
        verdict = feasibility_check(tau, tt, base_weights)
        if not verdict.feasible:
            raise InfeasibleClaimError("non-emptiness violated; robustness metric infinite", verdict=verdict)
        lo, hi = _bracket_decreasing(h, 0.0, 1.0)
        try:
            lam = optimize.brentq(h, lo, hi, xtol=tol * 1e-4, rtol=4 * np.finfo(float).eps, maxiter=500)
        except (RuntimeError, ValueError) as exc:
            raise ConvergenceError("multiplier solve failed") from exc
    xi = xi_of(lam)
    s = -lam * centered - xi
    w = np.asarray(dconj(s), dtype=float)
    div = float(np.dot(probs, s * w - np.asarray(spec.conjugate(s), dtype=float)))
    return PhiTiltSolution(float(lam), float(xi), max(div, 0.0), w)
