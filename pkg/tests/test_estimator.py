import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from wisernet.estimator import WaveSDGSegmenter, check_images, check_masks
from wisernet.exceptions import UsageError
from wisernet.synthdata import AnatomySpec, generate_sample, style_presets


@pytest.fixture(scope="module")
def data():
    pairs = [generate_sample(AnatomySpec(), style_presets("source"), i, 32) for i in range(10)]
    return np.concatenate([p[0] for p in pairs]), np.concatenate([p[1] for p in pairs])


def quick(**kw):
    base = dict(epochs=2, patience=2, lr=1e-3, batch_size=4, warmup_epochs=0, ramp_epochs=1)
    base.update(kw)
    return WaveSDGSegmenter(**base)


def test_params_and_clone():
    est = WaveSDGSegmenter(alpha=0.3, seed=4)
    params = est.get_params()
    assert params["alpha"] == 0.3 and params["seed"] == 4 and params["lr"] == 1e-4
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(kappa=2.0)
    assert est.train_config().kappa == 2.0


def test_input_validation():
    x = np.zeros((2, 3, 32, 32), dtype=np.float32)
    with pytest.raises(UsageError):
        check_images(np.zeros((2, 3, 30, 30)), multiple=32)
    with pytest.raises(UsageError):
        check_images(np.full((1, 3, 32, 32), 2.0))
    with pytest.raises(UsageError):
        check_images(np.full((1, 3, 32, 32), np.nan))
    with pytest.raises(UsageError):
        check_images(np.zeros((1, 1, 32, 32)))
    assert check_images(x[0]).shape == (1, 3, 32, 32)
    with pytest.raises(UsageError):
        check_masks(np.zeros((2, 2, 16, 16)), x)
    with pytest.raises(UsageError):
        check_masks(np.full((2, 2, 32, 32), 0.5), x)


def test_unfitted_raises(data):
    with pytest.raises(NotFittedError):
        WaveSDGSegmenter().predict(data[0])


def test_fit_predict_transform_score(data, tmp_path):
    x, y = data
    est = quick().fit(x, y)
    assert len(est.history_.records) == 2
    pred = est.predict(x[:3])
    assert pred.shape == (3, 2, 32, 32) and pred.dtype == bool
    assert est.transform(x[:3]).shape == (3, 64)
    assert est.transform(x[:3], space="content", level=2).shape == (3, 16)
    assert 0.0 <= est.score(x, y) <= 100.0
    est.save(tmp_path / "m.ckpt")
    back = WaveSDGSegmenter.load(tmp_path / "m.ckpt")
    np.testing.assert_array_equal(back.predict_proba(x[:2]), est.predict_proba(x[:2]))


def test_fit_is_reproducible(data):
    x, y = data
    a = quick(seed=1).fit(x, y).predict_proba(x[:2])
    b = quick(seed=1).fit(x, y).predict_proba(x[:2])
    assert a.tobytes() == b.tobytes()


def test_explicit_validation_and_errors(data):
    x, y = data
    est = quick(epochs=1, patience=1).fit(x[:6], y[:6], x[6:], y[6:])
    assert est.config_.input_size == 32
    with pytest.raises(UsageError):
        quick().fit(x, y, X_val=x)
    with pytest.raises(UsageError):
        quick(validation_fraction=1.5).fit(x, y)
    with pytest.raises(UsageError):
        est.transform(x, space="texture")
