import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sydnet import SYDNetClassifier
from sydnet.backbone import load_feature_arrays
from sydnet.estimator import check_feature_maps, check_images

FAST = dict(epochs=12, lr=0.05, batch_size=4, c_a=4, patch_set="P12", precision="float64")


@pytest.fixture(scope="module")
def features(tiny_features):
    return load_feature_arrays(tiny_features[0]), load_feature_arrays(tiny_features[1])


def test_params_round_trip_and_clone():
    clf = SYDNetClassifier(patch_set="P30", epochs=3)
    params = clf.get_params()
    assert params["patch_set"] == "P30" and params["epochs"] == 3
    other = clone(clf)
    assert other.get_params() == params and other is not clf
    clf.set_params(use_sa=False)
    assert clf.use_sa is False


def test_fit_predict_transform(features):
    (x, y), (xt, yt) = features
    labels = np.array(["cat", "dog", "eel"])[y]
    clf = SYDNetClassifier(**FAST).fit(x, labels)
    assert list(clf.classes_) == ["cat", "dog", "eel"]
    proba = clf.predict_proba(xt)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert clf.score(xt, np.array(["cat", "dog", "eel"])[yt]) > 0.6
    assert clf.transform(xt).shape == (len(xt), 8)
    assert clf.n_features_in_ == 2 * 2 * 8
    assert clf.parameter_counts()["attention"] > 0
    again = SYDNetClassifier(**FAST).fit(x, labels)
    assert np.array_equal(again.predict_proba(xt), proba)


def test_gap_baseline_transform_is_gap(features):
    (x, y), _ = features
    clf = SYDNetClassifier(baseline="gap", **FAST).fit(x, y)
    np.testing.assert_allclose(clf.transform(x[:3]), x[:3].mean(axis=(1, 2)), rtol=1e-6)


def test_image_input():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, size=(6, 32, 32, 3))
    clf = SYDNetClassifier(input_kind="images", epochs=1, batch_size=3, patch_set="P12", c_a=4).fit(x, [0, 1, 0, 1, 0, 1])
    assert clf.predict(x).shape == (6,)
    with pytest.raises(ValueError, match="fitted on 32x32"):
        clf.predict(rng.uniform(size=(2, 64, 64, 3)))


def test_validation_errors(features):
    (x, y), _ = features
    with pytest.raises(NotFittedError):
        SYDNetClassifier().predict(x)
    with pytest.raises(ValueError):
        SYDNetClassifier(**FAST).fit(x, y[:-1])
    with pytest.raises(ValueError, match="two classes"):
        SYDNetClassifier(**FAST).fit(x, np.zeros(len(x)))
    with pytest.raises(ValueError):
        SYDNetClassifier(input_kind="audio").fit(x, y)
    clf = SYDNetClassifier(**dict(FAST, epochs=1)).fit(x, y)
    with pytest.raises(ValueError, match="fitted on"):
        clf.predict(x[:, :1])
    with pytest.raises(ValueError):
        check_feature_maps(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        check_feature_maps(np.array([[[[np.nan]]]]))
    with pytest.raises(ValueError, match="scaled"):
        check_images(np.full((1, 4, 4, 3), 255.0))
    with pytest.raises(ValueError):
        check_images(np.zeros((1, 4, 5, 3)))
