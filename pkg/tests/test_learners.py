import numpy as np
import pytest

from klrobust.core import Dataset
from klrobust.learners import (
    CateEstimate,
    FoldModels,
    LearnerKind,
    LearnerSpec,
    fit_predict_crossfit,
    make_folds,
    oracle_cate,
    predict_cate,
)
from klrobust.learners import _RidgeOLS


def _linear_data(n, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    d = rng.binomial(1, 0.5, n)
    g1 = 1.0 + x @ [0.5, -1.0, 0.2]
    g0 = -0.5 + x @ [0.1, 0.3, 0.0]
    y = np.where(d == 1, g1, g0) + rng.normal(0, 0.5, n)
    return Dataset(x, d, y), g1 - g0


def test_fold_sizes_balanced():
    plan = make_folds(10, 5, [1, 0] * 5, seed=3)
    assert np.all(np.bincount(plan.assignment) == 2)
    for k in range(5):
        assert set(np.asarray([1, 0] * 5)[plan.test_index(k)]) == {0, 1}


def test_folds_deterministic():
    d = np.random.default_rng(0).binomial(1, 0.5, 101)
    a = make_folds(101, 4, d, seed=9)
    b = make_folds(101, 4, d, seed=9)
    assert np.array_equal(a.assignment, b.assignment)
    assert not np.array_equal(a.assignment, make_folds(101, 4, d, seed=10).assignment)


def test_folds_impossible_stratification():
    with pytest.raises(ValueError):
        make_folds(6, 5, [1, 0, 0, 0, 0, 0], seed=0)
    with pytest.raises(ValueError, match="no treated"):
        make_folds(12, 2, [1] + [0] * 11, seed=0)


def test_linear_learner_recovers_linear_cate():
    data, tau = _linear_data(5000)
    spec = LearnerSpec(LearnerKind.LINEAR, seed=1)
    est = fit_predict_crossfit(data, spec, make_folds(data.n, 5, data.d, 1))
    assert np.sqrt(np.mean((est.tau_hat - tau) ** 2)) < 0.1


@pytest.mark.parametrize("kind", list(LearnerKind))
def test_constant_outcome_gives_zero_cate(kind):
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(300, 2))
    d = rng.binomial(1, 0.5, 300)
    data = Dataset(x, d, np.full(300, 3.0))
    hp = {} if kind is LearnerKind.LINEAR else {"n_trees": 10}
    est = fit_predict_crossfit(data, LearnerSpec(kind, hp, seed=0), make_folds(300, 3, d, 0))
    assert np.allclose(est.tau_hat, 0.0, atol=1e-8)


def test_forest_propensity_mean_near_half():
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(5000, 3))
    d = rng.binomial(1, 0.5, 5000)
    data = Dataset(x, d, rng.normal(size=5000))
    est = fit_predict_crossfit(data, LearnerSpec("forest", {"n_trees": 30}, seed=0), make_folds(5000, 5, d, 0))
    assert 0.45 <= est.pi_hat.mean() <= 0.55


def test_trimming_bounds_exact():
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(600, 1))
    d = (rng.uniform(size=600) < np.where(x[:, 0] > 0.5, 0.995, 0.005)).astype(int)
    d[:4] = [0, 1, 0, 1]
    data = Dataset(x, d, rng.normal(size=600))
    est = fit_predict_crossfit(
        data, LearnerSpec("forest", {"n_trees": 10, "min_leaf": 1, "propensity_min_leaf": 1}, seed=0),
        make_folds(600, 2, d, 0), trim_eps=0.05,
    )
    assert est.pi_hat.min() >= 0.05 and est.pi_hat.max() <= 0.95
    assert est.trim_fraction > 0


@pytest.mark.parametrize("kind", ["forest", "boosting"])
def test_crossfit_deterministic(kind):
    data, _ = _linear_data(400, seed=5)
    spec = LearnerSpec(kind, {"n_trees": 15}, seed=4)
    plan = make_folds(400, 4, data.d, 4)
    a = fit_predict_crossfit(data, spec, plan)
    b = fit_predict_crossfit(data, spec, plan, n_jobs=2)
    for f in ("gamma1_hat", "gamma0_hat", "pi_hat"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_out_of_fold_predictions_ignore_own_fold():
    data, _ = _linear_data(400, seed=6)
    spec = LearnerSpec("forest", {"n_trees": 10}, seed=0)
    plan = make_folds(400, 4, data.d, 0)
    base = fit_predict_crossfit(data, spec, plan)
    y = data.y.copy()
    fold0 = plan.test_index(0)
    y[fold0] += 100.0
    moved = fit_predict_crossfit(data.with_outcome(y), spec, plan)
    assert np.array_equal(base.tau_hat[fold0], moved.tau_hat[fold0])
    assert not np.array_equal(base.tau_hat[plan.test_index(1)], moved.tau_hat[plan.test_index(1)])


def test_forest_fits_step_function():
    rng = np.random.default_rng(7)
    n = 2000
    x = rng.uniform(size=(n, 1))
    d = rng.binomial(1, 0.5, n)
    step = 2.0
    tau = np.where(x[:, 0] > 0.4, step, 0.0)
    data = Dataset(x, d, d * tau)
    est = fit_predict_crossfit(data, LearnerSpec("forest", {"n_trees": 50}, seed=0), make_folds(n, 5, d, 0))
    assert np.sqrt(np.mean((est.tau_hat - tau) ** 2)) < step / 4


def test_predict_cate_zero_linear_model():
    zero = _RidgeOLS().fit(np.zeros((5, 2)), np.zeros(5))
    models = FoldModels(zero, zero, None)
    est = CateEstimate(np.zeros(5), np.zeros(5), np.full(5, 0.5), models=(models,))
    assert predict_cate(est, x_new=[0.3, -2.0]) == 0.0


def test_predict_cate_single_tree_lookup():
    rng = np.random.default_rng(8)
    n = 200
    x = rng.uniform(size=(n, 1))
    d = np.tile([0, 1], n // 2)
    y = rng.normal(size=n)
    data = Dataset(x, d, y)
    spec = LearnerSpec("forest", {"n_trees": 1, "min_leaf": 1, "bootstrap": False, "max_features": 1.0}, seed=0)
    plan = make_folds(n, 2, d, 0)
    est = fit_predict_crossfit(data, spec, plan)
    m = est.models[0]
    train = plan.train_index(0)
    xt, dt, yt = x[train], d[train], y[train]
    point = xt[dt == 1][0]

    def leaf_mean(model, xs, ys):
        tree = model.estimators_[0]
        leaf = tree.apply(point[None, :])[0]
        return ys[tree.apply(xs) == leaf].mean()

    expected = leaf_mean(m.gamma1, xt[dt == 1], yt[dt == 1]) - leaf_mean(m.gamma0, xt[dt == 0], yt[dt == 0])
    assert predict_cate(est, [m], point) == pytest.approx(expected)
    # the treated leaf holds the training point alone
    assert m.gamma1.predict(point[None, :])[0] == pytest.approx(yt[dt == 1][0])


def test_predict_cate_identical_models_average():
    data, _ = _linear_data(300, seed=9)
    est = fit_predict_crossfit(data, LearnerSpec("linear", seed=0), make_folds(300, 3, data.d, 0))
    m = est.models[0]
    x0 = np.array([0.2, -0.1, 0.4])
    assert predict_cate(est, [m, m, m], x0) == pytest.approx(predict_cate(est, [m], x0))


def test_small_arm_error_advises_fewer_folds():
    rng = np.random.default_rng(10)
    d = np.zeros(60, dtype=int)
    d[:8] = 1
    data = Dataset(rng.uniform(size=(60, 2)), d, rng.normal(size=60))
    with pytest.raises(ValueError, match="fewer folds"):
        fit_predict_crossfit(data, LearnerSpec("forest", {"n_trees": 5, "min_leaf": 7}), make_folds(60, 5, d, 0))


def test_learner_spec_rejects_unknown_and_bad_values():
    with pytest.raises(ValueError):
        LearnerSpec("forest", {"bogus": 1})
    with pytest.raises(ValueError):
        LearnerSpec("boosting", {"learning_rate": 0.0})


def test_tuned_fit_runs():
    data, _ = _linear_data(200, seed=11)
    est = fit_predict_crossfit(data, LearnerSpec("boosting", {"n_trees": 20}, seed=0, tune=True),
                               make_folds(200, 2, data.d, 0))
    assert np.all(np.isfinite(est.tau_hat))


def test_oracle_cate_uses_truth():
    data, tau = _linear_data(50, seed=12)
    est = oracle_cate(data, lambda x: 1.0 + x @ [0.5, -1.0, 0.2], lambda x: -0.5 + x @ [0.1, 0.3, 0.0], 0.5)
    assert np.allclose(est.tau_hat, tau)
    assert np.all(est.pi_hat == 0.5)
