import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from unionrobust.adversary import PerturbationSpec
from unionrobust.data_io import synth_blobs
from unionrobust.estimator import RobustClassifier

SPECS = (PerturbationSpec.make("linf", 0.1, 0.03, 4), PerturbationSpec.make("l2", 0.12, 0.04, 4),
         PerturbationSpec.make("l1", 0.15, 0.05, 4))


def data(n=200, seed=0):
    d = synth_blobs(n, 2, margin=0.05, noise=0.3, seed=seed)
    return d.inputs.reshape(n, -1), np.where(d.labels == 1, "b", "a")


def test_fit_predict_and_params():
    X, y = data()
    clf = RobustClassifier(strategy="clean", widths=(16,), epochs=20, schedule=((0, 1e-2), (20, 1e-3)))
    assert clf.get_params()["strategy"] == "clean"
    clf.fit(X, y)
    assert set(clf.predict(X)) <= {"a", "b"}
    assert clf.score(X, y) > 0.7
    proba = clf.predict_proba(X)
    assert np.allclose(proba.sum(1), 1)
    assert clone(clf).get_params() == clf.get_params()


def test_perturb_and_robust_score():
    X, y = data(100)
    clf = RobustClassifier(strategy="msd", specs=SPECS, widths=(8,), epochs=2, schedule=((0, 1e-2), (2, 1e-2)))
    clf.fit(X, y)
    adv = clf.perturb(X, y)
    assert adv.shape == X.shape and adv.min() >= 0 and adv.max() <= 1
    acc = clf.robust_score(X, y, trials=1)
    assert 0 <= acc <= clf.score(X, y)


def test_validation():
    X, y = data(20)
    clf = RobustClassifier(strategy="clean", epochs=1)
    with pytest.raises(NotFittedError):
        clf.predict(X)
    with pytest.raises(ValueError):
        clf.fit(X * 3, y)
    with pytest.raises(ValueError):
        clf.fit(X, np.zeros(20))
    clf.fit(X, y)
    with pytest.raises(ValueError):
        clf.predict(np.zeros((2, 3)))
