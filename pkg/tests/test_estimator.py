import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.utils.estimator_checks import parametrize_with_checks

from reset_opt import data
from reset_opt.estimator import ResettingSGDClassifier


@parametrize_with_checks([ResettingSGDClassifier(hidden=8, max_iter=200, patience=40)])
def test_sklearn_compatible(estimator, check):
    check(estimator)


def blobs(tau=0.0, seed=0):
    ds = data.make_blobs(3, 60, 5, 5.0, seed=seed)
    if tau:
        ds = data.corrupt(ds, data.NoiseSpec("symmetric", tau), seed=seed)
    return ds


def test_fits_separable_blobs_with_string_labels():
    ds = blobs()
    names = np.array(["a", "b", "c"])[ds.true_labels]
    clf = ResettingSGDClassifier(hidden=16, max_iter=1500, reset_probability=0.01, patience=200)
    clf.fit(ds.features, names)
    assert list(clf.classes_) == ["a", "b", "c"]
    assert clf.score(ds.features, names) > 0.95
    np.testing.assert_allclose(clf.predict_proba(ds.features).sum(axis=1), 1.0)
    assert clf.best_iteration_ % 20 == 0 and clf.n_iter_ == 1500


def test_noisy_fit_records_memorization():
    ds = blobs(tau=0.4)
    val = blobs(seed=1)
    clf = ResettingSGDClassifier(hidden=8, max_iter=200).fit(
        ds.features, ds.noisy_labels, X_val=val.features, y_val=val.true_labels, y_true=ds.true_labels)
    assert clf.metrics_[-1].mem_frac is not None


def test_params_and_clone():
    clf = ResettingSGDClassifier(reset_probability=0.1, sections=("latter",))
    assert clf.get_params()["reset_probability"] == 0.1
    twin = clone(clf)
    assert twin.get_params() == clf.get_params() and twin is not clf
    clf.set_params(batch_size=4)
    assert clf.batch_size == 4


def test_same_seed_same_model():
    ds = blobs()
    a = ResettingSGDClassifier(hidden=8, max_iter=100, random_state=3).fit(ds.features, ds.true_labels)
    b = ResettingSGDClassifier(hidden=8, max_iter=100, random_state=3).fit(ds.features, ds.true_labels)
    np.testing.assert_array_equal(a.params_.vector, b.params_.vector)


def test_input_errors():
    ds = blobs()
    with pytest.raises(NotFittedError):
        ResettingSGDClassifier().predict(ds.features)
    with pytest.raises(ValueError):
        ResettingSGDClassifier(loss="hinge").fit(ds.features, ds.true_labels)
    with pytest.raises(ValueError):
        ResettingSGDClassifier().fit(ds.features, ds.true_labels, X_val=ds.features)
    clf = ResettingSGDClassifier(hidden=4, max_iter=40).fit(ds.features, ds.true_labels)
    with pytest.raises(ValueError):
        clf.predict(ds.features[:, :3])
