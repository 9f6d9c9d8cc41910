"""Data model, discrete distributions, KL utilities and claim arithmetic.

Everything here is immutable once built. Arrays handed out by :class:`Dataset`
are read-only views so estimators cannot mutate shared data by accident.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np


class KLRobustError(Exception):
    """Base class for all package errors."""


class DimensionError(KLRobustError, ValueError):
    """Array shapes or lengths do not line up."""


class NotAbsolutelyContinuousError(KLRobustError, ValueError):
    """A distribution puts mass where the reference distribution has none."""

    def __init__(self, message, offending=None):
        super().__init__(message)
        self.offending = list(offending or [])


class InfeasibleClaimError(KLRobustError):
    """The target ATE lies outside the open range of the CATE values.

    No covariate shift can invalidate the claim, so the robustness metric is
    infinite.
    """

    def __init__(self, message, verdict=None):
        super().__init__(message)
        self.verdict = verdict


class ConvergenceError(KLRobustError):
    """A numerical solver failed to reach its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class Direction(enum.Enum):
    GEQ = "geq"
    LEQ = "leq"

    @classmethod
    def parse(cls, value) -> "Direction":
        if isinstance(value, Direction):
            return value
        text = str(value).strip().lower()
        aliases = {">=": "geq", "ge": "geq", "<=": "leq", "le": "leq"}
        return cls(aliases.get(text, text))


@dataclass(frozen=True)
class Claim:
    """Policy claim ``ATE >= tau_tilde`` (GEQ) or ``ATE <= tau_tilde`` (LEQ)."""

    direction: Direction
    tau_tilde: float

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction.parse(self.direction))
        object.__setattr__(self, "tau_tilde", float(self.tau_tilde))
        if not np.isfinite(self.tau_tilde):
            raise ValueError("tau_tilde must be finite")


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    d: int
    y: float


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


class Dataset:
    """Experimental sample ``W = (X, D, Y)`` stored column-wise.

    Args:
        x: ``(n, k)`` covariate matrix (a 1-d array is read as ``k = 1``).
        d: length-``n`` binary treatment indicator.
        y: length-``n`` outcome.
        columns: optional covariate labels, one per column of ``x``.
    """

    def __init__(self, x, d, y, columns: Sequence[str] | None = None):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise DimensionError("x must be a 2-d array")
        d = np.asarray(d, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        n = x.shape[0]
        if n == 0:
            raise ValueError("dataset must be nonempty")
        if d.shape[0] != n or y.shape[0] != n:
            raise DimensionError(
                f"x has {n} rows but d has {d.shape[0]} and y has {y.shape[0]}"
            )
        if not np.all((d == 0) | (d == 1)):
            bad = int(np.flatnonzero((d != 0) & (d != 1))[0])
            raise ValueError(f"treatment must be binary; row {bad} has {d[bad]!r}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("covariates and outcomes must be finite")
        if columns is not None:
            columns = tuple(str(c) for c in columns)
            if len(columns) != x.shape[1]:
                raise DimensionError(
                    f"{len(columns)} column names for {x.shape[1]} covariates"
                )
        self._x = _readonly(x)
        self._d = _readonly(d)
        self._y = _readonly(y)
        self.columns = columns

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], columns=None) -> "Dataset":
        samples = list(samples)
        if not samples:
            raise ValueError("dataset must be nonempty")
        lengths = {np.atleast_1d(s.x).shape[0] for s in samples}
        if len(lengths) != 1:
            raise DimensionError("every sample must have the same number of covariates")
        x = np.array([np.atleast_1d(s.x) for s in samples], dtype=float)
        return cls(x, [s.d for s in samples], [s.y for s in samples], columns)

    @property
    def x(self) -> np.ndarray:
        return self._x

    @property
    def d(self) -> np.ndarray:
        return self._d

    @property
    def y(self) -> np.ndarray:
        return self._y

    @property
    def n(self) -> int:
        return self._x.shape[0]

    @property
    def k(self) -> int:
        return self._x.shape[1]

    def __len__(self):
        return self.n

    def __iter__(self) -> Iterator[Sample]:
        for i in range(self.n):
            yield Sample(self._x[i], int(self._d[i]), float(self._y[i]))

    def with_outcome(self, y) -> "Dataset":
        return Dataset(self._x, self._d, y, self.columns)

    def require_both_arms(self):
        n1 = int(self._d.sum())
        if n1 == 0 or n1 == self.n:
            raise ValueError("both treatment arms must be present")

    def __repr__(self):
        return f"Dataset(n={self.n}, k={self.k}, treated={int(self._d.sum())})"


@dataclass(frozen=True)
class DiscreteDistribution:
    """Probability vector over a finite, labelled support."""

    support: tuple
    probs: np.ndarray = field(repr=False)

    def __init__(self, support, probs):
        probs = _readonly(np.asarray(probs, dtype=float).ravel())
        support = tuple(np.asarray(support).ravel().tolist())
        if len(support) != probs.shape[0]:
            raise DimensionError("support and probabilities differ in length")
        if np.any(probs < 0):
            raise ValueError("probabilities must be nonnegative")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {probs.sum()!r}, not 1")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_counts(cls, support, counts) -> "DiscreteDistribution":
        counts = np.asarray(counts, dtype=float)
        return cls(support, counts / counts.sum())

    def aligned_to(self, support) -> np.ndarray:
        """Probabilities reordered to ``support``; labels must match as a set."""
        support = tuple(np.asarray(support).ravel().tolist())
        if sorted(map(repr, support)) != sorted(map(repr, self.support)):
            raise ValueError("distributions are defined on different supports")
        index = {s: i for i, s in enumerate(self.support)}
        return self.probs[[index[s] for s in support]]


@dataclass(frozen=True)
class WeightedEmpirical:
    """Radon-Nikodym ratios ``dF'/dF`` at the sample points.

    ``base`` holds the base probability of each point (uniform ``1/n`` when
    omitted), so grouped or quadrature data can be represented directly.
    """

    weights: np.ndarray
    base: np.ndarray | None = None

    def __post_init__(self):
        w = _readonly(np.asarray(self.weights, dtype=float).ravel())
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        object.__setattr__(self, "weights", w)
        if self.base is not None:
            b = np.asarray(self.base, dtype=float).ravel()
            if b.shape != w.shape:
                raise DimensionError("base probabilities and weights differ in length")
            object.__setattr__(self, "base", _readonly(b / b.sum()))

    @property
    def probs(self) -> np.ndarray:
        """Base probabilities of each point (uniform by default)."""
        if self.base is None:
            return np.full(self.weights.shape[0], 1.0 / self.weights.shape[0])
        return self.base

    def mean_weight(self) -> float:
        return float(np.dot(self.probs, self.weights))

    def tilted_probs(self) -> np.ndarray:
        return self.probs * self.weights


def base_probs(n: int, base_weights=None) -> np.ndarray:
    """Normalized base probabilities for ``n`` points."""
    if base_weights is None:
        return np.full(n, 1.0 / n)
    b = np.asarray(base_weights, dtype=float).ravel()
    if b.shape[0] != n:
        raise DimensionError(f"{b.shape[0]} base weights for {n} points")
    if np.any(b < 0) or b.sum() <= 0:
        raise ValueError("base weights must be nonnegative with positive total")
    return b / b.sum()


def xlogx(w: np.ndarray) -> np.ndarray:
    """Elementwise ``w log w`` with ``0 log 0 = 0``."""
    w = np.asarray(w, dtype=float)
    out = np.zeros_like(w)
    pos = w > 0
    out[pos] = w[pos] * np.log(w[pos])
    return out


def ate_under_weights(tau_values, weights) -> float:
    """Reweighted ATE ``(1/n) sum_i w_i tau_i``."""
    tau = np.asarray(tau_values, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    if tau.shape != w.shape:
        raise DimensionError(f"{tau.shape[0]} CATE values but {w.shape[0]} weights")
    return float(np.mean(w * tau))


def kl_discrete(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """``KL(p || q)`` for distributions on the same labelled support."""
    pp = p.probs
    qq = q.aligned_to(p.support)
    bad = (pp > 0) & (qq <= 0)
    if np.any(bad):
        cells = [p.support[i] for i in np.flatnonzero(bad)]
        raise NotAbsolutelyContinuousError(
            f"not absolutely continuous: mass on {cells} where the reference has none",
            offending=cells,
        )
    pos = pp > 0
    value = float(np.sum(pp[pos] * np.log(pp[pos] / qq[pos])))
    return max(value, 0.0)


def kl_weighted_empirical(w: WeightedEmpirical) -> float:
    """``E_F[w log w]``, the KL divergence of the reweighted sample from the base."""
    return float(np.dot(w.probs, xlogx(w.weights)))


def claim_holds(ate: float, claim: Claim) -> bool:
    if claim.direction is Direction.GEQ:
        return ate >= claim.tau_tilde
    return ate <= claim.tau_tilde


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for task ``key`` under a master ``seed``.

    Streams depend only on ``(seed, key)``, never on call order, so serial and
    parallel runs draw identical numbers.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def substream_seed(seed: int, *key: int) -> int:
    """32-bit integer seed for libraries that take ``random_state``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1)[0])
