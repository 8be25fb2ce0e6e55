"""scikit-learn style wrappers over adapter and fusion training.

Inputs are padded token-id arrays; the attention mask is derived from padding.
The wrapped encoder is never modified.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .corpus import MaskedEntityExample, PartitionDataset
from .model import AdapterModule, EncoderModel
from .train import KnowledgeModel, TrainConfig, micro_f1, train_adapter, train_classifier
from .validation import (
    check_attention_mask,
    check_class_labels,
    check_fraction,
    check_indicator_matrix,
    check_positive_int,
    check_token_ids,
)


def _check_base(base) -> EncoderModel:
    if not isinstance(base, EncoderModel):
        raise TypeError("base must be an EncoderModel")
    return base


class EntityAdapter(ClassifierMixin, BaseEstimator):
    """Bottleneck adapter plus entity head trained by masked entity prediction.

    ``y`` holds entity ids; ``classes_`` is their sorted set and becomes the
    head's label space.
    """

    def __init__(self, base: EncoderModel | None = None, bottleneck: int = 16, layers=None,
                 epochs: int = 30, patience: int = 5, batch_size: int = 16, learning_rate: float = 1e-3,
                 holdout_fraction: float = 0.1, partition_index: int = 0, random_state: int = 0):
        self.base = base
        self.bottleneck = bottleneck
        self.layers = layers
        self.epochs = epochs
        self.patience = patience
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.holdout_fraction = holdout_fraction
        self.partition_index = partition_index
        self.random_state = random_state

    def _config(self, max_len: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, patience=self.patience, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, max_seq_len=max_len, seed=self.random_state,
                           holdout_fraction=self.holdout_fraction)

    def fit(self, X, y):
        base = _check_base(self.base)
        check_positive_int("bottleneck", self.bottleneck)
        check_fraction("holdout_fraction", self.holdout_fraction)
        ids = check_token_ids(X, base.config.vocab_size, base.config.max_positions)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(ids):
            raise ValueError(f"expected {len(ids)} entity labels in a 1-D array")
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        local = self.label_encoder_.transform(y)
        mask = check_attention_mask(None, ids)
        examples = [MaskedEntityExample(i, m, int(l)) for i, m, l in zip(ids, mask, local)]
        ds = PartitionDataset(self.partition_index, list(range(len(self.classes_))), examples, ids.shape[1])
        self.adapter_, self.head_, self.report_ = train_adapter(base, ds, self._config(ids.shape[1]),
                                                               self.bottleneck, self.layers)
        self.best_epoch_ = self.report_.best_epochs[0]
        return self

    def _model(self) -> KnowledgeModel:
        check_is_fitted(self, "adapter_")
        return KnowledgeModel(self.base, self.head_, self.adapter_)

    def decision_function(self, X) -> np.ndarray:
        model = self._model()
        ids = check_token_ids(X, self.base.config.vocab_size, self.base.config.max_positions)
        return model.decision_function(ids, check_attention_mask(None, ids))

    def predict_proba(self, X) -> np.ndarray:
        return T.softmax(T.tensor(self.decision_function(X)), axis=-1).data

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


class FusionClassifier(ClassifierMixin, BaseEstimator):
    """Task classifier over a frozen encoder and, optionally, frozen adapters.

    With ``adapters=None`` only the linear head is trained, which is the
    frozen-base baseline. Multi-label targets are given as an indicator matrix.
    """

    def __init__(self, base: EncoderModel | None = None, adapters: Sequence[AdapterModule] | None = None,
                 multilabel: bool = False, epochs: int = 30, patience: int = 5, batch_size: int = 16,
                 learning_rate: float = 1e-3, warmup_fraction: float = 0.1, random_state: int = 0):
        self.base = base
        self.adapters = adapters
        self.multilabel = multilabel
        self.epochs = epochs
        self.patience = patience
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warmup_fraction = warmup_fraction
        self.random_state = random_state

    def _ids(self, X) -> tuple[np.ndarray, np.ndarray]:
        ids = check_token_ids(X, self.base.config.vocab_size, self.base.config.max_positions)
        return ids, check_attention_mask(None, ids)

    def _targets(self, y, n: int) -> np.ndarray:
        if self.multilabel:
            return check_indicator_matrix(y, n)
        return check_class_labels(self.label_encoder_.transform(np.asarray(y)), n, len(self.classes_))

    def fit(self, X, y, X_val=None, y_val=None):
        base = _check_base(self.base)
        check_fraction("warmup_fraction", self.warmup_fraction, low_open=True)
        ids, mask = self._ids(X)
        if self.multilabel:
            Y = check_indicator_matrix(y, len(ids))
            self.classes_ = np.arange(Y.shape[1])
        else:
            self.label_encoder_ = LabelEncoder().fit(np.asarray(y))
            self.classes_ = self.label_encoder_.classes_
        train = (ids, mask, self._targets(y, len(ids)))
        val = None
        if X_val is not None:
            v_ids, v_mask = self._ids(X_val)
            val = (v_ids, v_mask, self._targets(y_val, len(v_ids)))
        cfg = TrainConfig(epochs=self.epochs, patience=self.patience, batch_size=self.batch_size,
                          learning_rate=self.learning_rate, warmup_fraction=self.warmup_fraction,
                          max_seq_len=ids.shape[1], seed=self.random_state,
                          metric="micro_f1" if self.multilabel else "accuracy")
        adapters = list(self.adapters) if self.adapters is not None else None
        self.fusion_, self.head_, self.report_ = train_classifier(base, train, val, cfg, len(self.classes_),
                                                                  adapters, self.multilabel)
        self.best_epoch_ = self.report_.best_epochs[0]
        return self

    def _model(self) -> KnowledgeModel:
        check_is_fitted(self, "head_")
        return KnowledgeModel(self.base, self.head_, self.fusion_)

    def decision_function(self, X) -> np.ndarray:
        model = self._model()
        return model.decision_function(*self._ids(X))

    def predict_proba(self, X) -> np.ndarray:
        scores = T.tensor(self.decision_function(X))
        if self.multilabel:
            return 1.0 / (1.0 + np.exp(-scores.data))
        return T.softmax(scores, axis=-1).data

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        if self.multilabel:
            return (scores > 0.0).astype(np.int64)
        return self.classes_[scores.argmax(axis=1)]

    def score(self, X, y, sample_weight=None) -> float:
        """Accuracy, or micro-F1 for multi-label targets."""
        if self.multilabel:
            return micro_f1(check_indicator_matrix(y, len(X)), self.predict(X))
        return super().score(X, y, sample_weight)

    def mixture_weights(self, X) -> dict[int, np.ndarray]:
        """Per-layer fusion weights ``[n, seq, n_adapters]`` for ``X``.

        ``seq`` stops at the last column that is not padding in every row.
        """
        model = self._model()
        if self.fusion_ is None:
            raise ValueError("no fusion layer: the classifier was fitted without adapters")
        ids, mask = self._ids(X)
        model.decision_function(ids, mask, batch_size=len(ids))
        return dict(self.fusion_.last_weights)
