"""First-stage regressions with K-fold cross-fitting.

``gamma1(x) = E[Y | D=1, X=x]`` and ``gamma0(x) = E[Y | D=0, X=x]`` are fit
on the treated and control units of the complement folds; the propensity
``pi(x)`` on every complement unit. Predictions for fold ``k`` come only from
models that never saw fold ``k``.

The tree learners are scikit-learn estimators configured from a
:class:`LearnerSpec`; every random draw is seeded from the master seed through
a per-(fold, role) substream.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from joblib import Parallel, delayed
from sklearn.ensemble import (
    GradientBoostingRegressor,
    HistGradientBoostingClassifier,
    HistGradientBoostingRegressor,
    RandomForestRegressor,
)
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import GridSearchCV, KFold

from .core import Dataset, DimensionError, substream, substream_seed

DEFAULT_FOLDS = 5
DEFAULT_TRIM = 0.01

_ROLE_GAMMA1, _ROLE_GAMMA0, _ROLE_PROPENSITY = 1, 0, 2


class LearnerKind(enum.Enum):
    FOREST = "forest"
    BOOSTING = "boosting"
    LINEAR = "linear"


_DEFAULTS = {
    LearnerKind.FOREST: {
        "n_trees": 200,
        "max_depth": None,
        "min_leaf": 5,
        "max_features": "sqrt",
        "subsample": 1.0,
        "bootstrap": True,
        "propensity_min_leaf": 20,
    },
    LearnerKind.BOOSTING: {
        "n_trees": 200,
        "max_depth": 3,
        "min_leaf": 20,
        "learning_rate": 0.1,
        "subsample": 1.0,
        "l2": 0.0,
        "max_bins": 255,
    },
    LearnerKind.LINEAR: {"l2": 1e-6},
}

_TUNING_GRIDS = {
    LearnerKind.FOREST: {"min_samples_leaf": [2, 5, 20]},
    LearnerKind.BOOSTING: {"max_iter": [100, 200, 400], "learning_rate": [0.05, 0.1]},
    LearnerKind.LINEAR: {},
}


@dataclass(frozen=True)
class LearnerSpec:
    """Learner family, hyperparameters and seed for the first stage.

    Unset hyperparameters take the family defaults. ``tune=True`` runs a small
    within-fold cross-validated grid search for the outcome regressions.
    """

    kind: LearnerKind = LearnerKind.FOREST
    hyperparameters: dict = field(default_factory=dict)
    seed: int = 0
    tune: bool = False

    def __post_init__(self):
        kind = self.kind if isinstance(self.kind, LearnerKind) else LearnerKind(str(self.kind).lower())
        object.__setattr__(self, "kind", kind)
        params = dict(_DEFAULTS[kind])
        unknown = set(self.hyperparameters) - set(params)
        if unknown:
            raise ValueError(f"unknown hyperparameters for {kind.value}: {sorted(unknown)}")
        params.update(self.hyperparameters)
        object.__setattr__(self, "hyperparameters", params)
        for name in ("n_trees", "min_leaf", "propensity_min_leaf", "max_bins"):
            if name in params and not (int(params[name]) >= 1):
                raise ValueError(f"{name} must be a positive count")
        depth = params.get("max_depth")
        if depth is not None and depth < 1:
            raise ValueError("max_depth must be at least 1")
        lr = params.get("learning_rate")
        if lr is not None and not 0 < lr <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        sub = params.get("subsample")
        if sub is not None and not 0 < sub <= 1:
            raise ValueError("subsample must lie in (0, 1]")

    def min_arm_size(self) -> int:
        if self.kind is LearnerKind.LINEAR:
            return 2
        return int(self.hyperparameters["min_leaf"])


@dataclass(frozen=True)
class FoldPlan:
    K: int
    assignment: np.ndarray
    seed: int

    def test_index(self, k) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def train_index(self, k) -> np.ndarray:
        return np.flatnonzero(self.assignment != k)


def make_folds(n: int, K: int, treatment, seed: int) -> FoldPlan:
    """Treatment-stratified fold assignment.

    Units of each arm are shuffled and dealt round-robin, continuing the
    rotation across arms, so fold sizes differ by at most one overall and
    within each arm.
    """
    d = np.asarray(treatment).ravel()
    if d.shape[0] != n:
        raise DimensionError(f"treatment has {d.shape[0]} entries for n={n}")
    if K < 2:
        raise ValueError("K must be at least 2")
    if n < 2 * K:
        raise ValueError(f"need n >= 2K (n={n}, K={K})")
    rng = substream(seed, 0)
    treated = np.flatnonzero(d == 1)
    control = np.flatnonzero(d == 0)
    if treated.size == 0 or control.size == 0:
        raise ValueError("both treatment arms must be present")
    order = np.concatenate([rng.permutation(treated), rng.permutation(control)])
    assignment = np.empty(n, dtype=int)
    assignment[order] = np.arange(n) % K
    for k in range(K):
        rest = d[assignment != k]
        if not (np.any(rest == 1) and np.any(rest == 0)):
            arm = "treated" if not np.any(rest == 1) else "control"
            raise ValueError(
                f"fold {k} complement has no {arm} units; stratification impossible with K={K}"
            )
    assignment.setflags(write=False)
    return FoldPlan(K, assignment, seed)


class _PropensityAsRegression:
    """Class-fraction propensity from a regression forest on the 0/1 treatment."""

    def __init__(self, model):
        self.model = model

    def fit(self, x, d):
        self.model.fit(x, d)
        return self

    def predict_proba1(self, x):
        return self.model.predict(x)


class _PropensityClassifier:
    def __init__(self, model):
        self.model = model

    def fit(self, x, d):
        self.model.fit(x, d.astype(int))
        return self

    def predict_proba1(self, x):
        return self.model.predict_proba(x)[:, 1]


def _outcome_model(spec: LearnerSpec, random_state: int):
    p = spec.hyperparameters
    if spec.kind is LearnerKind.FOREST:
        return RandomForestRegressor(
            n_estimators=int(p["n_trees"]),
            max_depth=p["max_depth"],
            min_samples_leaf=int(p["min_leaf"]),
            max_features=p["max_features"],
            max_samples=None if p["subsample"] >= 1 or not p["bootstrap"] else p["subsample"],
            bootstrap=bool(p["bootstrap"]),
            random_state=random_state,
            n_jobs=1,
        )
    if spec.kind is LearnerKind.BOOSTING:
        if p["subsample"] < 1:
            return GradientBoostingRegressor(
                n_estimators=int(p["n_trees"]),
                max_depth=p["max_depth"],
                min_samples_leaf=int(p["min_leaf"]),
                learning_rate=p["learning_rate"],
                subsample=p["subsample"],
                random_state=random_state,
            )
        return HistGradientBoostingRegressor(
            max_iter=int(p["n_trees"]),
            max_depth=p["max_depth"],
            min_samples_leaf=int(p["min_leaf"]),
            learning_rate=p["learning_rate"],
            l2_regularization=p["l2"],
            max_bins=int(p["max_bins"]),
            early_stopping=False,
            random_state=random_state,
        )
    return _RidgeOLS(p["l2"])


def _propensity_model(spec: LearnerSpec, random_state: int):
    p = spec.hyperparameters
    if spec.kind is LearnerKind.FOREST:
        return _PropensityAsRegression(
            RandomForestRegressor(
                n_estimators=int(p["n_trees"]),
                max_depth=p["max_depth"],
                min_samples_leaf=int(p["propensity_min_leaf"]),
                max_features=p["max_features"],
                max_samples=None if p["subsample"] >= 1 or not p["bootstrap"] else p["subsample"],
                bootstrap=bool(p["bootstrap"]),
                random_state=random_state,
                n_jobs=1,
            )
        )
    if spec.kind is LearnerKind.BOOSTING:
        return _PropensityClassifier(
            HistGradientBoostingClassifier(
                max_iter=int(p["n_trees"]),
                max_depth=p["max_depth"],
                min_samples_leaf=int(p["min_leaf"]),
                learning_rate=p["learning_rate"],
                l2_regularization=p["l2"],
                max_bins=int(p["max_bins"]),
                early_stopping=False,
                random_state=random_state,
            )
        )
    return _PropensityClassifier(LogisticRegression(C=1.0 / max(p["l2"], 1e-12), max_iter=1000))


class _RidgeOLS:
    """Least squares with an intercept and a tiny ridge for rank safety."""

    def __init__(self, l2=1e-6):
        self.l2 = l2

    def fit(self, x, y):
        self.x_mean_ = x.mean(axis=0)
        self.y_mean_ = y.mean()
        xc = x - self.x_mean_
        gram = xc.T @ xc + self.l2 * np.eye(x.shape[1])
        self.coef_ = np.linalg.solve(gram, xc.T @ (y - self.y_mean_))
        self.intercept_ = self.y_mean_ - self.x_mean_ @ self.coef_
        return self

    def predict(self, x):
        return x @ self.coef_ + self.intercept_


def _fit_outcome(spec, x, y, random_state):
    model = _outcome_model(spec, random_state)
    grid = _TUNING_GRIDS[spec.kind]
    if spec.tune and grid and x.shape[0] >= 30:
        cv = KFold(3, shuffle=True, random_state=random_state)
        search = GridSearchCV(model, grid, cv=cv, scoring="neg_mean_squared_error")
        search.fit(x, y)
        return search.best_estimator_
    return model.fit(x, y)


@dataclass
class FoldModels:
    """Fitted nuisance models for one fold (trained on its complement)."""

    gamma1: Any
    gamma0: Any
    propensity: Any

    def tau(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.gamma1.predict(x) - self.gamma0.predict(x)


def _fit_fold(spec: LearnerSpec, data: Dataset, plan: FoldPlan, k: int):
    train = plan.train_index(k)
    x, d, y = data.x[train], data.d[train], data.y[train]
    t1, t0 = d == 1, d == 0
    need = spec.min_arm_size()
    for label, mask in (("treated", t1), ("control", t0)):
        if mask.sum() < need:
            raise ValueError(
                f"fold {k}: only {int(mask.sum())} {label} units outside the fold but the "
                f"learner needs {need}; use fewer folds or a simpler learner"
            )
    g1 = _fit_outcome(spec, x[t1], y[t1], substream_seed(spec.seed, k, _ROLE_GAMMA1))
    g0 = _fit_outcome(spec, x[t0], y[t0], substream_seed(spec.seed, k, _ROLE_GAMMA0))
    pm = _propensity_model(spec, substream_seed(spec.seed, k, _ROLE_PROPENSITY)).fit(x, d)
    return FoldModels(g1, g0, pm)


@dataclass(frozen=True)
class CateEstimate:
    """Out-of-fold nuisance predictions for every observation."""

    gamma1_hat: np.ndarray
    gamma0_hat: np.ndarray
    pi_hat: np.ndarray
    plan: FoldPlan | None = None
    models: tuple = ()
    trim_eps: float = DEFAULT_TRIM
    trim_fraction: float = 0.0

    @property
    def tau_hat(self) -> np.ndarray:
        return self.gamma1_hat - self.gamma0_hat

    @property
    def alpha1_hat(self) -> np.ndarray:
        return 1.0 / self.pi_hat

    @property
    def alpha0_hat(self) -> np.ndarray:
        return 1.0 / (1.0 - self.pi_hat)

    @property
    def n(self) -> int:
        return self.gamma1_hat.shape[0]

    def aipw_residual(self, data: Dataset) -> np.ndarray:
        """``d (y - gamma1)/pi - (1 - d)(y - gamma0)/(1 - pi)`` per observation."""
        d, y = data.d, data.y
        return d * (y - self.gamma1_hat) / self.pi_hat - (1 - d) * (y - self.gamma0_hat) / (1 - self.pi_hat)


def _clip(pi, eps):
    clipped = np.clip(pi, eps, 1.0 - eps)
    return clipped, float(np.mean((pi < eps) | (pi > 1.0 - eps)))


def fit_predict_crossfit(
    data: Dataset, spec: LearnerSpec, plan: FoldPlan, trim_eps: float = DEFAULT_TRIM, n_jobs: int = 1
) -> CateEstimate:
    """Cross-fitted ``gamma1``, ``gamma0`` and clipped propensity predictions."""
    if not 0 < trim_eps < 0.5:
        raise ValueError("trim_eps must lie in (0, 0.5)")
    if plan.assignment.shape[0] != data.n:
        raise DimensionError("fold plan and dataset differ in length")
    data.require_both_arms()
    if n_jobs == 1:
        models = [_fit_fold(spec, data, plan, k) for k in range(plan.K)]
    else:
        models = Parallel(n_jobs=n_jobs)(delayed(_fit_fold)(spec, data, plan, k) for k in range(plan.K))
    g1 = np.empty(data.n)
    g0 = np.empty(data.n)
    pi = np.empty(data.n)
    for k, m in enumerate(models):
        test = plan.test_index(k)
        xt = data.x[test]
        g1[test] = m.gamma1.predict(xt)
        g0[test] = m.gamma0.predict(xt)
        pi[test] = m.propensity.predict_proba1(xt)
    pi, frac = _clip(pi, trim_eps)
    return CateEstimate(g1, g0, pi, plan, tuple(models), trim_eps, frac)


def oracle_cate(
    data: Dataset,
    gamma1: Callable[[np.ndarray], np.ndarray],
    gamma0: Callable[[np.ndarray], np.ndarray],
    propensity: Callable[[np.ndarray], np.ndarray] | float,
    trim_eps: float = DEFAULT_TRIM,
) -> CateEstimate:
    """Nuisance 'estimates' taken from known population functions."""
    x = data.x
    pi = propensity(x) if callable(propensity) else np.full(data.n, float(propensity))
    pi, frac = _clip(np.asarray(pi, dtype=float), trim_eps)
    return CateEstimate(
        np.asarray(gamma1(x), dtype=float), np.asarray(gamma0(x), dtype=float), pi,
        trim_eps=trim_eps, trim_fraction=frac,
    )


def predict_cate(estimate: CateEstimate, fold_models=None, x_new=None) -> float:
    """CATE at ``x_new`` averaged over the fold models."""
    models = list(fold_models if fold_models is not None else estimate.models)
    if not models:
        raise ValueError("no fitted fold models available")
    x = np.asarray(x_new, dtype=float).ravel()
    expected = _n_features(models[0])
    if expected is not None and x.shape[0] != expected:
        raise DimensionError(f"x_new has {x.shape[0]} entries, models expect {expected}")
    return float(np.mean([m.tau(x[None, :])[0] for m in models]))


def _n_features(models: FoldModels):
    g = models.gamma1
    if hasattr(g, "n_features_in_"):
        return int(g.n_features_in_)
    if hasattr(g, "coef_"):
        return int(np.asarray(g.coef_).shape[-1])
    return None
