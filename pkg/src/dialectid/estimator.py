"""scikit-learn style wrappers around the encoder and the training loop.

``DialectClassifier`` takes raw strings and labels; it builds a fixture vocab,
encodes, trains with the two-group AdamW regimen and keeps the best-dev
parameters. ``MultiplicativeEnsembleClassifier`` multiplies the probabilities
of several fitted classifiers.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_is_fitted

from .corpus import LabelSet, RawExample, Vocab, build_vocab, encode_dataset
from .encoder import ModelConfig, init_model
from .ensemble_eval import ensemble
from .heads import predict
from .training import TrainConfig, train


def check_texts(X, name="X") -> list[str]:
    """Validate a 1-D collection of strings and return it as a list."""
    if isinstance(X, str):
        raise ValueError(f"{name} must be a sequence of strings, not a single string")
    arr = np.asarray(X, dtype=object)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if len(arr) == 0:
        raise ValueError(f"{name} is empty")
    bad = [i for i, t in enumerate(arr) if not isinstance(t, str)]
    if bad:
        raise ValueError(f"{name}[{bad[0]}] is {type(arr[bad[0]]).__name__}, expected str")
    return list(arr)


def check_labels(y, n: int, name="y") -> list[str]:
    arr = np.asarray(y, dtype=object)
    if arr.ndim != 1 or len(arr) != n:
        raise ValueError(f"{name} must be 1-D with {n} entries, got shape {arr.shape}")
    return [str(v) for v in arr]


def _raw(texts, labels, prefix):
    return [RawExample(f"{prefix}{i}", t, l) for i, (t, l) in enumerate(zip(texts, labels))]


class DialectClassifier(ClassifierMixin, BaseEstimator):
    """Transformer dialect classifier with optional adapters and vertical attention.

    Defaults are desk scale (two 64-wide layers) so that ``fit`` finishes in
    seconds on CPU; the full-size shapes are reachable through the same
    parameters.

    Parameters not found on ``ModelConfig``/``TrainConfig``:

    max_len : token budget per example, including CLS and SEP.
    vocab_size : size of the vocab built from ``X`` when ``vocab`` is None.
    vocab : an existing :class:`Vocab` to use instead.
    dev_fraction : held-out share of ``X`` used for early stopping when no
        explicit dev set is passed to ``fit``.
    """

    def __init__(self, num_layers=2, hidden=64, heads=2, ffn_dim=128, adapter_enabled=False,
                 adapter_bottleneck=16, vatt_enabled=False, mode="fine_tune", dropout_hidden=0.1,
                 dropout_cls=0.3, max_len=90, vocab_size=2000, vocab=None, batch_size=32, eval_every=100,
                 patience=10, warmup_steps=250, lr_head=1e-2, lr_rest=3e-3, lr_floor_ratio=0.01,
                 decay_quantum=10, schedule="inv_sqrt", weight_decay=0.01, max_steps=1000,
                 dev_fraction=0.1, random_state=0):
        self.num_layers = num_layers
        self.hidden = hidden
        self.heads = heads
        self.ffn_dim = ffn_dim
        self.adapter_enabled = adapter_enabled
        self.adapter_bottleneck = adapter_bottleneck
        self.vatt_enabled = vatt_enabled
        self.mode = mode
        self.dropout_hidden = dropout_hidden
        self.dropout_cls = dropout_cls
        self.max_len = max_len
        self.vocab_size = vocab_size
        self.vocab = vocab
        self.batch_size = batch_size
        self.eval_every = eval_every
        self.patience = patience
        self.warmup_steps = warmup_steps
        self.lr_head = lr_head
        self.lr_rest = lr_rest
        self.lr_floor_ratio = lr_floor_ratio
        self.decay_quantum = decay_quantum
        self.schedule = schedule
        self.weight_decay = weight_decay
        self.max_steps = max_steps
        self.dev_fraction = dev_fraction
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, eval_every=self.eval_every, patience=self.patience,
                           warmup_steps=self.warmup_steps, lr_head=self.lr_head, lr_rest=self.lr_rest,
                           lr_floor_ratio=self.lr_floor_ratio, decay_quantum=self.decay_quantum,
                           schedule=self.schedule, weight_decay=self.weight_decay, max_steps=self.max_steps,
                           seed=self.random_state)

    def _split(self, texts, labels):
        if not 0.0 < self.dev_fraction < 1.0:
            raise ValueError("dev_fraction must be in (0, 1) when no dev set is given")
        n = len(texts)
        n_dev = max(1, int(round(self.dev_fraction * n)))
        if n_dev >= n:
            raise ValueError("too few examples to hold out a dev set")
        perm = np.random.default_rng([self.random_state, 2]).permutation(n)
        dev, tr = perm[:n_dev], perm[n_dev:]
        return ([texts[i] for i in tr], [labels[i] for i in tr],
                [texts[i] for i in dev], [labels[i] for i in dev])

    def fit(self, X, y, X_dev=None, y_dev=None):
        texts = check_texts(X)
        labels = check_labels(y, len(texts))
        if (X_dev is None) != (y_dev is None):
            raise ValueError("pass both X_dev and y_dev or neither")
        # class order follows first occurrence in y, independent of the dev split
        label_set = LabelSet(tuple(dict.fromkeys(labels)))
        if X_dev is None:
            texts, labels, dev_texts, dev_labels = self._split(texts, labels)
        else:
            dev_texts = check_texts(X_dev, "X_dev")
            dev_labels = check_labels(y_dev, len(dev_texts), "y_dev")

        if len(label_set) < 2:
            raise ValueError("need at least 2 classes in y")
        unseen = sorted(set(dev_labels) - set(label_set.names))
        if unseen:
            raise ValueError(f"dev labels not present in training labels: {unseen}")
        vocab = self.vocab if self.vocab is not None else build_vocab(texts, self.vocab_size)
        if not isinstance(vocab, Vocab):
            raise ValueError("vocab must be a Vocab instance")

        train_set = encode_dataset(_raw(texts, labels, "train"), vocab, label_set, self.max_len)
        dev_set = encode_dataset(_raw(dev_texts, dev_labels, "dev"), vocab, label_set, self.max_len)
        config = ModelConfig(num_layers=self.num_layers, hidden=self.hidden, heads=self.heads,
                             ffn_dim=self.ffn_dim, vocab_size=len(vocab), max_positions=self.max_len,
                             num_classes=len(label_set), adapter_enabled=self.adapter_enabled,
                             adapter_bottleneck=self.adapter_bottleneck, vatt_enabled=self.vatt_enabled,
                             dropout_hidden=self.dropout_hidden, dropout_cls=self.dropout_cls, mode=self.mode)
        model = init_model(config, seed=self.random_state)
        result = train(model, train_set, dev_set, self._train_config())

        self.model_ = model
        self.vocab_ = vocab
        self.label_set_ = label_set
        self.classes_ = np.array(label_set.names, dtype=object)
        self.train_log_ = result.log
        self.best_dev_f1_ = result.best_dev_f1
        self.n_steps_ = result.steps
        return self

    def _encode(self, X):
        texts = check_texts(X)
        # the label column is unused at inference time
        raw = _raw(texts, [self.label_set_.names[0]] * len(texts), "x")
        return encode_dataset(raw, self.vocab_, self.label_set_, self.max_len)

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        data = self._encode(X)
        return self.model_.predict_proba(data.token_ids, data.attention_mask)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[predict(self.predict_proba(X))]

    def vertical_weights(self, X) -> np.ndarray:
        """Per-example attention over layers; needs ``vatt_enabled``."""
        check_is_fitted(self, "model_")
        if not self.vatt_enabled:
            raise ValueError("vertical attention is disabled for this model")
        data = self._encode(X)
        return self.model_.predict_proba(data.token_ids, data.attention_mask, return_alpha=True)[1]


class MultiplicativeEnsembleClassifier(ClassifierMixin, BaseEstimator):
    """Product-of-probabilities ensemble.

    With ``prefit=False`` each estimator is cloned and fitted on the same data;
    with ``prefit=True`` the estimators are used as given. All members must
    share ``classes_`` in the same order.
    """

    def __init__(self, estimators, prefit=False):
        self.estimators = estimators
        self.prefit = prefit

    def fit(self, X, y, **fit_params):
        if not self.estimators:
            raise ValueError("estimators is empty")
        if self.prefit:
            members = list(self.estimators)
            for m in members:
                check_is_fitted(m)
        else:
            members = [clone(est).fit(X, y, **fit_params) for est in self.estimators]
        classes = members[0].classes_
        for i, m in enumerate(members[1:], 1):
            if list(m.classes_) != list(classes):
                raise ValueError(f"estimator {i} has classes {list(m.classes_)}, expected {list(classes)}")
        self.estimators_ = members
        self.classes_ = classes
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "estimators_")
        return ensemble([m.predict_proba(X) for m in self.estimators_])

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "estimators_")
        return self.classes_[predict(self.predict_proba(X))]
