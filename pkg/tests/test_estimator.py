import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from trajconv import TrajectoryForecaster
from trajconv.ndmath import DimensionError
from trajconv.train import checkpoint_bytes
from trajconv.validation import as_sample_arrays, check_trajectories


def test_get_params_and_clone():
    est = TrajectoryForecaster(family="lstm", epochs=3, augment=("rotate",))
    params = est.get_params()
    assert params["family"] == "lstm" and params["epochs"] == 3
    assert clone(est).get_params() == params


def test_fit_predict_score_on_arrays(walker_arrays):
    X, y = walker_arrays.obs, walker_arrays.future
    est = TrajectoryForecaster(family="lstm", epochs=3, batch_size=16).fit(X, y)
    pred = est.predict(X)
    assert pred.shape == y.shape and np.isfinite(pred).all()
    assert est.score(X, y) == pytest.approx(-np.linalg.norm(pred - y, axis=-1).mean())
    assert est.loss_log_[-1]["train_loss"] < est.loss_log_[0]["train_loss"]


def test_fit_with_samples_and_social(walker_arrays):
    est = TrajectoryForecaster(family="conv1d", kernel_size=3, social="angular_grid", epochs=1, batch_size=16)
    est.fit(walker_arrays)
    assert est.predict(walker_arrays).shape == (len(walker_arrays), 12, 2)
    nb = walker_arrays.neighbors
    assert est.predict(walker_arrays.obs, neighbors=nb).shape == (len(walker_arrays), 12, 2)


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        TrajectoryForecaster().predict(np.zeros((1, 8, 2)))


def test_deterministic_fit(walker_arrays):
    a = TrajectoryForecaster(family="lstm", epochs=1, seed=5).fit(walker_arrays)
    b = TrajectoryForecaster(family="lstm", epochs=1, seed=5).fit(walker_arrays)
    assert checkpoint_bytes(a.checkpoint_) == checkpoint_bytes(b.checkpoint_)
    c = TrajectoryForecaster.from_checkpoint(a.checkpoint_)
    assert np.array_equal(c.predict(walker_arrays), a.predict(walker_arrays))


def test_validation_helpers():
    with pytest.raises(DimensionError):
        check_trajectories(np.zeros((3, 8)))
    with pytest.raises(DimensionError):
        check_trajectories(np.zeros((3, 7, 2)), 8)
    with pytest.raises(ValueError):
        check_trajectories(np.full((1, 8, 2), np.inf))
    with pytest.raises(DimensionError):
        as_sample_arrays(np.zeros((3, 8, 2)), np.zeros((2, 12, 2)))
    arr = as_sample_arrays(np.zeros((2, 8, 2)))
    assert not arr.labeled and arr.neighbors.shape == (2, 8, 0, 2)
