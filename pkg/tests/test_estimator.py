import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cprl.attacks import fgsm
from cprl.estimator import QualityRegressor, check_images, check_labels


@pytest.fixture(scope="module")
def toy():
    rng = np.random.default_rng(0)
    return rng.uniform(0, 1, (12, 8, 8)), rng.uniform(0, 1, 12)


def small(**kw):
    return QualityRegressor(channels=4, epochs=1, batch_size=6, lr=1e-2, tau=0.5, **kw)


def test_params_round_trip_through_clone():
    est = small(bias=0.2, random_state=7)
    params = est.get_params()
    assert params["bias"] == 0.2 and params["random_state"] == 7
    twin = clone(est)
    assert twin.get_params() == params
    assert twin.set_params(tau=0.3).tau == 0.3


def test_fit_predict_shapes(toy):
    X, y = toy
    est = small().fit(X, y, eval_set=(X[:4], y[:4]))
    pred = est.predict(X)
    assert pred.shape == (12,) and np.all((pred > 0) & (pred < 1))
    assert est.n_features_in_ == 64
    assert len(est.curve_) == 2
    assert est.features(X).shape == (12, 4)
    assert set(est.evaluate(X, y)) == {"srcc", "plcc", "mse"}


def test_fit_is_reproducible(toy):
    X, y = toy
    np.testing.assert_array_equal(small(random_state=3).fit(X, y).predict(X),
                                  small(random_state=3).fit(X, y).predict(X))


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        small().predict(np.zeros((1, 8, 8)))


def test_save_load(toy, tmp_path):
    X, y = toy
    est = small(cprl=False).fit(X, y)
    est.save(tmp_path / "m.ckpt")
    other = small(cprl=False).load(tmp_path / "m.ckpt")
    np.testing.assert_array_equal(other.predict(X), est.predict(X))


def test_attacks_accept_estimator(toy):
    X, y = toy
    est = small().fit(X, y)
    res = fgsm(est, X[:3, None], y[:3], 2 / 255)
    assert np.max(np.abs(res.x_adv - X[:3, None])) <= 2 / 255


def test_input_validation():
    with pytest.raises(ValueError):
        check_images(np.full((2, 4, 4), 1.5))
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 4)))
    with pytest.raises(ValueError):
        check_images(np.full((2, 1, 4, 4), np.nan))
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 3, 4, 4)), in_channels=1)
    assert check_images(np.zeros((2, 4, 4))).shape == (2, 1, 4, 4)
    with pytest.raises(ValueError):
        check_labels([0.1, 0.2], 3)
    with pytest.raises(ValueError):
        check_labels([0.1, 2.0], 2)
