import numpy as np
import pytest

from cpsreason.featurize import build_cycle_covariates
from cpsreason.forecast import (
    ClassMisassignmentError, ConstantForecaster, ForecastError, InsufficientDataError, ScalerParams, design,
    expand_grid, fit_constant, fit_tree_ensemble, fit_window_regressor, lag_matrix, load_artifact, save_artifact,
)

MLP_HP = {"arch": "mlp", "layers": 1, "batch": 32, "epochs": 30, "dropout": 0.0, "nodes": 8}


def covs(n, period=60):
    _, s, c = build_cycle_covariates(period, n)
    return np.column_stack([s, c])


def test_scale_examples():
    p = ScalerParams(2, 6)
    assert p.scale(2) == 0 and p.scale(6) == 1
    assert p.scale(5) == pytest.approx(0.75)
    assert p.scale(10) == pytest.approx(2.0)  # no clipping outside the training range
    assert p.unscale(p.scale(3.3)) == pytest.approx(3.3)


def test_degenerate_scaler_keeps_unit_span():
    p = ScalerParams(7, 7)
    assert p.scale(7) == 0 and p.scale(8) == 1
    assert p.unscale(0) == 7


def test_scaler_rejects_inverted_range_and_all_nan():
    with pytest.raises(ValueError):
        ScalerParams(3, 2)
    with pytest.raises(ForecastError):
        ScalerParams.fit([np.nan, np.nan])
    assert ScalerParams.fit([np.nan, 1, 4]) == ScalerParams(1, 4)


@pytest.mark.parametrize("value", [0.0, 7.0])
def test_constant_forecaster(value):
    f = fit_constant(np.full(20, value))
    assert f.predict([123.0]) == value
    assert np.all(f.predict_batch(np.random.default_rng(0).normal(size=(5, 1))) == value)


def test_constant_rejects_varying_series():
    with pytest.raises(ClassMisassignmentError):
        fit_constant([0, 0, 1])
    with pytest.raises(InsufficientDataError):
        fit_constant([np.nan])


def test_design_matrix_layout():
    x = np.arange(6.0)
    lags = lag_matrix(x, 3)
    assert lags.tolist() == [[0, 1, 2], [1, 2, 3], [2, 3, 4]]
    X, y = design(x, np.arange(12.0).reshape(6, 2), 3)
    assert X[0].tolist() == [0, 1, 2, 6, 7] and y.tolist() == [3, 4, 5]


def test_tree_on_constant_series_predicts_constant():
    f = fit_tree_ensemble(np.full(50, 0.4), None, 3, {"n_estimators": 5, "max_features": 3})
    rng = np.random.default_rng(1)
    assert np.allclose(f.predict_batch(rng.uniform(-5, 5, (10, 3))), 0.4)


def test_change_target_on_constant_series_holds_last_value():
    f = fit_tree_ensemble(np.full(50, 0.4), None, 3, {"n_estimators": 5, "max_features": 3, "target": "change"})
    lags = np.array([[0.1, 0.2, 0.3], [0.4, 0.4, 0.4]])
    assert np.allclose(f.predict_batch(lags), [0.3, 0.4])


def test_single_tree_single_sample_is_leaf_lookup():
    x = np.array([0.1, 0.2, 0.7])
    f = fit_tree_ensemble(x, None, 2, {"n_estimators": 1, "max_features": 1}, seed=5)
    assert f.predict([0.1, 0.2]) == pytest.approx(0.7)
    assert f.predict([0.9, 0.0]) == pytest.approx(0.7)


def test_tree_fit_is_deterministic():
    rng = np.random.default_rng(2)
    x = rng.uniform(size=200)
    a = fit_tree_ensemble(x, covs(200), 5, {"n_estimators": 10, "max_features": 3}, seed=9)
    b = fit_tree_ensemble(x, covs(200), 5, {"n_estimators": 10, "max_features": 3}, seed=9)
    X, _ = design(x, covs(200), 5)
    assert np.array_equal(a.predict_batch(X[:, :5], X[:, 5:]), b.predict_batch(X[:, :5], X[:, 5:]))


@pytest.mark.parametrize("target", ["level", "change"])
def test_tree_on_noisy_cycle_beats_noise_amplitude(target):
    period, noise, n = 60, 0.02, 60 * 12
    rng = np.random.default_rng(3)
    t = np.arange(n)
    x = 0.5 + 0.4 * np.sin(2 * np.pi * t / period) + rng.uniform(-noise, noise, n)
    z = covs(n, period)
    cut = n - period  # hold out the last cycle
    f = fit_tree_ensemble(x[:cut], z[:cut], 5, {"n_estimators": 50, "max_features": 7, "target": target}, seed=0)
    X, y = design(x, z, 5)
    held = slice(cut - 5, None)
    mae = np.mean(np.abs(f.predict_batch(X[held, :5], X[held, 5:]) - y[held]))
    assert mae < noise


def test_tree_rejects_misaligned_covariates_and_unknown_target():
    with pytest.raises(ForecastError):
        fit_tree_ensemble(np.zeros(20), np.zeros((10, 2)), 3, {"n_estimators": 1, "max_features": 1})
    with pytest.raises(ForecastError):
        fit_tree_ensemble(np.zeros(20), None, 3, {"n_estimators": 1, "max_features": 1, "target": "ratio"})


def test_predict_arity_mismatch():
    f = fit_tree_ensemble(np.arange(20.0) / 20, covs(20), 3, {"n_estimators": 2, "max_features": 2})
    with pytest.raises(ForecastError):
        f.predict([0.1, 0.2], [0.0, 1.0])
    with pytest.raises(ForecastError):
        f.predict([0.1, 0.2, 0.3])
    assert np.isfinite(f.predict([0.1, 0.2, 0.3], [0.0, 1.0]))


@pytest.mark.parametrize("arch", ["mlp", "lstm"])
def test_window_regressor_learns_constant(arch):
    hp = {**MLP_HP, "arch": arch, "epochs": 20}
    f = fit_window_regressor(np.full(120, 0.3), 10, hp, seed=1)
    assert abs(f.predict(np.full(10, 0.3)) - 0.3) < 1e-3


def test_window_regressor_is_deterministic():
    x = np.random.default_rng(4).uniform(size=150)
    a = fit_window_regressor(x, 10, MLP_HP, seed=2)
    b = fit_window_regressor(x, 10, MLP_HP, seed=2)
    lags = lag_matrix(x, 10)
    assert np.array_equal(a.predict_batch(lags), b.predict_batch(lags))


def test_window_regressor_needs_enough_data():
    with pytest.raises(InsufficientDataError):
        fit_window_regressor(np.zeros(5), 10, MLP_HP)


def test_expand_grid_order():
    assert expand_grid({"a": [1, 2], "b": ["x"]}) == [{"a": 1, "b": "x"}, {"a": 2, "b": "x"}]


def test_artifact_round_trip(tmp_path):
    x = np.random.default_rng(5).uniform(size=80)
    tree = fit_tree_ensemble(x, None, 4, {"n_estimators": 3, "max_features": 2, "target": "change"})
    net = fit_window_regressor(x, 10, {**MLP_HP, "epochs": 2})
    save_artifact({"tree": tree, "net": net, "const": ConstantForecaster(0.0)}, tmp_path / "m.pkl", {"seed": 0})
    back = load_artifact(tmp_path / "m.pkl")
    lags4, lags10 = lag_matrix(x, 4), lag_matrix(x, 10)
    assert np.array_equal(back["tree"].predict_batch(lags4), tree.predict_batch(lags4))
    assert np.array_equal(back["net"].predict_batch(lags10), net.predict_batch(lags10))
    assert back["const"].predict([1.0]) == 0.0


def test_artifact_rejects_foreign_files(tmp_path):
    p = tmp_path / "x.pkl"
    save_artifact({}, p)
    import pickle
    with open(tmp_path / "y.pkl", "wb") as fh:
        pickle.dump([1, 2], fh)
    with pytest.raises(ForecastError):
        load_artifact(tmp_path / "y.pkl")
    assert load_artifact(p) == {}
