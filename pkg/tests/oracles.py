"""Independent reference computations used by the tests."""

import numpy as np
from scipy import optimize


def brute_force_kl(tau, base, tau_tilde):
    """Minimum of KL(p || base) over the simplex subject to p.tau <= tau_tilde (SLSQP)."""
    tau = np.asarray(tau, float)
    base = np.asarray(base, float)

    def obj(p):
        p = np.clip(p, 1e-300, None)
        return float(np.sum(p * np.log(p / base)))

    cons = [
        {"type": "eq", "fun": lambda p: p.sum() - 1.0},
        {"type": "ineq", "fun": lambda p: tau_tilde - p @ tau},
    ]
    best = None
    for start in (base, np.full(base.size, 1.0 / base.size)):
        res = optimize.minimize(obj, start, method="SLSQP", bounds=[(0, 1)] * base.size,
                                constraints=cons, options={"ftol": 1e-14, "maxiter": 1000})
        if best is None or res.fun < best.fun:
            best = res
    return best.fun, best.x


def three_point_line_oracle():
    """The three-point example has a binding constraint; p = (0.2 + t, 0.8 - 2t, t) is the feasible line."""
    base = np.array([0.2, 0.2, 0.6])

    def kl(t):
        p = np.array([0.2 + t, 0.8 - 2 * t, t])
        return float(np.sum(p * np.log(p / base)))

    res = optimize.minimize_scalar(kl, bounds=(1e-9, 0.4 - 1e-9), method="bounded",
                                   options={"xatol": 1e-12})
    t = res.x
    return res.fun, np.array([0.2 + t, 0.8 - 2 * t, t])


def bisect_lambda(tau, probs, tau_tilde):
    c = np.asarray(tau, float) - tau_tilde
    return optimize.bisect(lambda l: float(np.dot(probs, np.exp(-l * c) * c)), -60, 60, xtol=1e-14)
