"""Synthetic designs, population oracles and the Monte Carlo harness.

Covariates are uniform on the unit cube, treatment is an independent coin
flip and the CATE depends on one, three or ten covariates. All three designs
share the population ATE ``e - 1``.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from joblib import Parallel, delayed
from scipy import optimize

from .core import Claim, Dataset, KLRobustError, substream, substream_seed
from .gmm import estimate_robustness
from .learners import DEFAULT_FOLDS, DEFAULT_TRIM, LearnerSpec, fit_predict_crossfit, make_folds, oracle_cate


class DgpId(enum.Enum):
    DGP1 = "DGP1"
    DGP2 = "DGP2"
    DGP3 = "DGP3"
    CUSTOM = "CUSTOM"

    @classmethod
    def parse(cls, value) -> "DgpId":
        if isinstance(value, DgpId):
            return value
        text = str(value).strip().upper()
        if text.isdigit():
            text = "DGP" + text
        return cls(text)


def tau_dgp1(x):
    return np.exp(x[:, 0])


def tau_dgp2(x):
    return np.exp(x[:, 0]) * (x[:, 1] + 0.5) * (x[:, 2] + 0.5)


def tau_dgp3(x):
    return tau_dgp2(x) * np.prod(0.1 * x[:, 3:10] + 0.95, axis=1)


_TAU = {DgpId.DGP1: tau_dgp1, DgpId.DGP2: tau_dgp2, DgpId.DGP3: tau_dgp3}
_ACTIVE = {DgpId.DGP1: 1, DgpId.DGP2: 3, DgpId.DGP3: 10}


@dataclass(frozen=True)
class DgpSpec:
    """Design of one synthetic experiment.

    ``tau_fn`` is required for ``CUSTOM`` and ignored otherwise.
    """

    id: DgpId = DgpId.DGP1
    n: int = 10_000
    k: int = 100
    noise_sd: float = 0.25
    propensity: float = 0.5
    seed: int = 0
    tau_fn: Callable | None = None

    def __post_init__(self):
        object.__setattr__(self, "id", DgpId.parse(self.id))
        if self.n < 100:
            raise ValueError("n must be at least 100")
        if not self.noise_sd > 0:
            raise ValueError("noise_sd must be positive")
        if not 0 < self.propensity < 1:
            raise ValueError("propensity must lie in (0, 1)")
        need = _ACTIVE.get(self.id, 1)
        if self.k < need:
            raise ValueError(f"{self.id.value} needs at least {need} covariates")
        if self.id is DgpId.CUSTOM and self.tau_fn is None:
            raise ValueError("CUSTOM designs need a tau_fn")

    def tau(self, x) -> np.ndarray:
        fn = self.tau_fn if self.id is DgpId.CUSTOM else _TAU[self.id]
        return np.asarray(fn(x), dtype=float)


@dataclass(frozen=True)
class DgpTruth:
    """Known population nuisances, kept out of the dataset itself."""

    spec: DgpSpec
    tau0: np.ndarray

    def gamma1(self, x):
        return self.spec.tau(x)

    def gamma0(self, x):
        return np.zeros(np.asarray(x).shape[0])

    def propensity(self, x):
        return np.full(np.asarray(x).shape[0], self.spec.propensity)


def generate(spec: DgpSpec, replication: int | None = None):
    """Draw one dataset; ``replication`` selects an independent substream.

    Returns:
        tuple: ``(Dataset, DgpTruth)``.
    """
    rng = substream(spec.seed) if replication is None else substream(spec.seed, replication)
    x = rng.random((spec.n, spec.k))
    d = (rng.random(spec.n) < spec.propensity).astype(float)
    u0 = rng.normal(0.0, spec.noise_sd, spec.n)
    u1 = rng.normal(0.0, spec.noise_sd, spec.n)
    tau0 = spec.tau(x)
    y = np.where(d == 1, tau0 + u1, u0)
    columns = [f"x{j + 1}" for j in range(spec.k)]
    return Dataset(x, d, y, columns), DgpTruth(spec, tau0)


# Rank-1 lattice generating vector for the 10-dimensional oracle (2^22 points).
LATTICE_POINTS = 2**22
LATTICE_VECTOR = (1, 1903227, 775961, 2904835, 2162801, 2924619, 3338761, 3384403, 2240993, 1949979)


def _weighted_delta(tau, w, tau_tilde):
    c = tau - tau_tilde

    def g(lam):
        a = -lam * c
        s = np.exp(a - a.max())
        return float(np.dot(w, s * c))

    lam = optimize.brentq(g, -50.0, 50.0, xtol=1e-14)
    a = -lam * c
    shift = a.max()
    return float(-(shift + math.log(np.dot(w, np.exp(a - shift)))))


def population_delta_oracle(dgp, tau_tilde: float = 1.3, resolution: int | None = None) -> float:
    """Population robustness metric of a built-in design by deterministic quadrature.

    ``resolution`` is the Gauss-Legendre order per axis (designs with up to
    three active covariates) or the number of lattice points (ten).
    """
    dgp = DgpId.parse(dgp)
    if dgp is DgpId.CUSTOM:
        raise ValueError("no quadrature oracle for CUSTOM designs")
    dim = _ACTIVE[dgp]
    if dim <= 3:
        order = resolution or (400 if dim == 1 else 96)
        nodes, weights = np.polynomial.legendre.leggauss(order)
        nodes, weights = 0.5 * (nodes + 1.0), 0.5 * weights
        grids = np.meshgrid(*([nodes] * dim), indexing="ij")
        x = np.column_stack([g.ravel() for g in grids])
        w = np.ones(1)
        for _ in range(dim):
            w = np.multiply.outer(w, weights)
        return _weighted_delta(_TAU[dgp](x), w.ravel(), tau_tilde)
    N = int(resolution or LATTICE_POINTS)
    idx = np.arange(N, dtype=np.int64)
    z = np.asarray(LATTICE_VECTOR, dtype=np.int64)
    # build tau coordinate by coordinate to keep memory at a few vectors
    u = [((idx * z[j]) % N + 0.5) / N for j in range(3)]
    tau = np.exp(u[0]) * (u[1] + 0.5) * (u[2] + 0.5)
    del u
    for j in range(3, 10):
        tau *= 0.1 * (((idx * z[j]) % N + 0.5) / N) + 0.95
    return _weighted_delta(tau, np.full(N, 1.0 / N), tau_tilde)


@dataclass
class McResult:
    """Per-replication estimates and their aggregate error decomposition."""

    spec: DgpSpec
    learner: str
    tau_tilde: float
    population_delta: float
    records: list = field(default_factory=list)
    failures: int = 0
    failure_messages: list = field(default_factory=list)

    @property
    def M(self) -> int:
        return len(self.records) + self.failures

    @property
    def failure_rate(self) -> float:
        return self.failures / self.M if self.M else 0.0

    def estimates(self, method: str) -> np.ndarray:
        return np.array([r[f"delta_{method}"] for r in self.records], dtype=float)

    def summary(self, method: str) -> dict:
        """Squared bias, variance (``ddof=0``) and MSE as their sum."""
        est = self.estimates(method)
        if est.size == 0:
            return {"bias2": math.nan, "variance": math.nan, "mse": math.nan, "coverage": math.nan}
        mean = float(np.mean(est))
        bias2 = (mean - self.population_delta) ** 2
        variance = float(np.mean((est - mean) ** 2))
        cover = np.array([r[f"cover_{method}"] for r in self.records], dtype=float)
        return {"bias2": bias2, "variance": variance, "mse": bias2 + variance, "coverage": float(np.mean(cover))}

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["replication", "delta_plugin", "delta_debiased", "nu", "lambda", "se_plugin", "se_debiased",
                  "lower_plugin", "lower_debiased", "cover_plugin", "cover_debiased"]
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in self.records:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in fields})
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = [
            "| Data | delta*(tau~) | Method | learner | MSE | Bias^2 | Variance |",
            "|---|---|---|---|---|---|---|",
        ]
        for method, label in (("plugin", "Plug-in"), ("debiased", "De-biased")):
            s = self.summary(method)
            lines.append(
                f"| {self.spec.id.value} | {self.population_delta:.4f} | {label} | {self.learner} | "
                f"{s['mse']:.4e} | {s['bias2']:.4e} | {s['variance']:.4e} |"
            )
        lines.append("")
        lines.append(f"replications: {len(self.records)} ok, {self.failures} failed")
        return "\n".join(lines) + "\n"


def _one_replication(spec, r, learner, claim, K, trim_eps, alpha, truth_delta, stream):
    data, truth = generate(spec, stream)
    if learner is None:
        cate = oracle_cate(data, truth.gamma1, truth.gamma0, spec.propensity, trim_eps)
    else:
        spec_r = dataclasses.replace(learner, seed=substream_seed(spec.seed, stream, 1))
        plan = make_folds(data.n, K, data.d, substream_seed(spec.seed, stream, 2))
        cate = fit_predict_crossfit(data, spec_r, plan, trim_eps)
    rep = estimate_robustness(data, cate, claim, alpha=alpha)
    if rep.status != "ok":
        raise KLRobustError(f"replication {r}: {rep.status}")
    return {
        "replication": r,
        "delta_plugin": rep.plugin["delta_star"],
        "delta_debiased": rep.delta_star_hat,
        "nu": rep.theta_hat.nu,
        "lambda": rep.theta_hat.lambda_,
        "se_plugin": rep.plugin["se"],
        "se_debiased": rep.se_delta,
        "lower_plugin": rep.plugin["lower_bound"],
        "lower_debiased": rep.lower_bound,
        "cover_plugin": int(rep.plugin["lower_bound"] <= truth_delta),
        "cover_debiased": int(rep.lower_bound <= truth_delta),
    }


def _guarded(*args):
    try:
        return _one_replication(*args)
    except (KLRobustError, ValueError, np.linalg.LinAlgError) as exc:
        return exc


def run_mc(
    spec: DgpSpec,
    M: int,
    learner: LearnerSpec | None,
    tau_tilde: float = 1.3,
    K: int = DEFAULT_FOLDS,
    trim_eps: float = DEFAULT_TRIM,
    alpha: float = 0.05,
    n_jobs: int = 1,
    population_delta: float | None = None,
    same_stream: bool = False,
) -> McResult:
    """Monte Carlo study of plug-in and de-biased estimates.

    ``learner=None`` plugs in the true nuisances. Replication ``r`` draws from
    substream ``r`` of ``spec.seed``; ``same_stream=True`` reuses substream 0
    for every replication (a degenerate check of the variance).
    """
    if M < 2:
        raise ValueError("M must be at least 2")
    if population_delta is None:
        population_delta = population_delta_oracle(spec.id, tau_tilde)
    claim = Claim("geq", tau_tilde)
    args = [
        (spec, r, learner, claim, K, trim_eps, alpha, population_delta, 0 if same_stream else r)
        for r in range(M)
    ]
    if n_jobs == 1:
        out = [_guarded(*a) for a in args]
    else:
        out = Parallel(n_jobs=n_jobs)(delayed(_guarded)(*a) for a in args)
    name = "oracle" if learner is None else learner.kind.value
    result = McResult(spec, name, tau_tilde, population_delta)
    for item in out:
        if isinstance(item, Exception):
            result.failures += 1
            result.failure_messages.append(str(item))
        else:
            result.records.append(item)
    return result
