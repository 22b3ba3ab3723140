import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dialectid.estimator import DialectClassifier, MultiplicativeEnsembleClassifier, check_labels, check_texts
from dialectid.synthetic import make_corpus

SMALL = dict(num_layers=1, hidden=8, heads=2, ffn_dim=16, adapter_bottleneck=4, max_len=16, vocab_size=120,
             batch_size=8, eval_every=5, warmup_steps=5, max_steps=10, lr_rest=1e-2)


@pytest.fixture(scope="module")
def data():
    ex = make_corpus(48, 3, seed=0, lexicon_seed=0)
    return [e.text for e in ex], [e.label for e in ex]


def test_validation_helpers():
    with pytest.raises(ValueError):
        check_texts("one string")
    with pytest.raises(ValueError):
        check_texts([])
    with pytest.raises(ValueError, match=r"X\[1\]"):
        check_texts(["ok", 3])
    with pytest.raises(ValueError):
        check_labels(["a"], 2)


def test_get_params_round_trip():
    clf = DialectClassifier(**SMALL)
    params = clf.get_params()
    assert params["hidden"] == 8 and params["random_state"] == 0
    assert clone(clf).get_params() == params


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        DialectClassifier().predict(["hello"])


def test_fit_predict(data):
    X, y = data
    clf = DialectClassifier(**SMALL, vatt_enabled=True).fit(X, y)
    proba = clf.predict_proba(X[:5])
    assert proba.shape == (5, 3)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert list(clf.classes_) == list(dict.fromkeys(y))
    assert set(clf.predict(X[:5])) <= set(clf.classes_)
    alpha = clf.vertical_weights(X[:2])
    np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-6)
    assert 0.0 <= clf.score(X, y) <= 1.0


def test_fit_is_deterministic(data):
    X, y = data
    a = DialectClassifier(**SMALL).fit(X, y).predict_proba(X)
    b = DialectClassifier(**SMALL).fit(X, y).predict_proba(X)
    np.testing.assert_array_equal(a, b)


def test_explicit_dev_set(data):
    X, y = data
    clf = DialectClassifier(**SMALL).fit(X[:36], y[:36], X_dev=X[36:], y_dev=y[36:])
    assert clf.train_log_[-1]["step"] == 10
    with pytest.raises(ValueError):
        DialectClassifier(**SMALL).fit(X, y, X_dev=X[:3])


def test_ensemble_of_one_matches_member(data):
    X, y = data
    member = DialectClassifier(**SMALL).fit(X, y)
    ens = MultiplicativeEnsembleClassifier([member], prefit=True).fit(X, y)
    np.testing.assert_array_equal(ens.predict_proba(X), member.predict_proba(X))


def test_ensemble_fits_clones(data):
    X, y = data
    ens = MultiplicativeEnsembleClassifier([DialectClassifier(**SMALL, random_state=s) for s in (0, 1)]).fit(X, y)
    assert len(ens.estimators_) == 2
    assert not hasattr(ens.estimators[0], "model_")
    np.testing.assert_allclose(ens.predict_proba(X).sum(axis=1), 1.0)
