"""scikit-learn compatible wrapper around the model and trainer.

Samples are behavior records rather than fixed-width feature rows, so ``X``
is a sequence of :class:`~gapnet.data.Instance` objects or of mappings with
the same fields (``label`` may be omitted when ``y`` is given).
"""

from __future__ import annotations

from collections.abc import Mapping
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted, column_or_1d

from .data import FIELDS, DataError, Instance, Vocab
from .metrics import auc_global, evaluate
from .model import ModelConfig, predict_proba, preset
from .trainer import TrainConfig, train


def check_instances_input(X, y=None, require_label: bool = True) -> list[Instance]:
    """Validate ``X`` (and ``y``) and return a list of :class:`Instance`.

    When ``y`` is given it replaces the labels carried by the records.
    """
    if isinstance(X, (str, bytes, Mapping)) or not hasattr(X, "__iter__"):
        raise TypeError(f"X must be a sequence of instances or records, got {type(X).__name__}")
    out = []
    for i, rec in enumerate(X):
        if isinstance(rec, Instance):
            inst = Instance(**rec.to_record())
        elif isinstance(rec, Mapping):
            needed = [f for f in FIELDS if f != "label" or (y is None and require_label)]
            missing = [f for f in needed if f not in rec]
            if missing:
                raise DataError(f"X[{i}] is missing field(s) {missing}")
            unknown = sorted(set(rec) - set(FIELDS))
            if unknown:
                raise DataError(f"X[{i}] has unexpected field(s) {unknown}")
            inst = Instance(**{k: rec[k] for k in FIELDS if k in rec})
        else:
            raise TypeError(f"X[{i}] must be an Instance or a mapping, got {type(rec).__name__}")
        for name in ("request_id", "user_id", "context_id", "target_item_id"):
            value = getattr(inst, name)
            if isinstance(value, (bool, np.bool_)) or not isinstance(value, (int, np.integer)) or value < 0:
                raise DataError(f"X[{i}].{name} must be a non-negative integer, got {value!r}")
            setattr(inst, name, int(value))
        for name in ("seq_rt", "seq_st", "seq_lt"):
            setattr(inst, name, [int(v) for v in getattr(inst, name)])
        out.append(inst)
    if not out:
        raise ValueError("X is empty")
    if y is not None:
        y = column_or_1d(y, warn=True)
        if len(y) != len(out):
            raise ValueError(f"X has {len(out)} samples but y has {len(y)}")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("y must be binary with labels 0 and 1")
        for inst, label in zip(out, y):
            inst.label = int(label)
    return out


class GapNetClassifier(ClassifierMixin, BaseEstimator):
    """Click-through classifier with fit / predict_proba / predict / score.

    Validation data for early stopping is carved out by request, so every
    candidate of a request lands on the same side. ``score`` returns AUC.
    """

    def __init__(
        self,
        ablation: str = "full",
        d: int = 16,
        num_heads: int = 2,
        head_hidden: int = 64,
        learning_rate: float = 0.001,
        batch_size: int = 128,
        max_epochs: int = 10,
        patience: int = 3,
        clip_norm: Optional[float] = 5.0,
        validation_fraction: float = 0.1,
        vocab: Optional[tuple] = None,
        random_state: int = 0,
    ):
        self.ablation = ablation
        self.d = d
        self.num_heads = num_heads
        self.head_hidden = head_hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.clip_norm = clip_norm
        self.validation_fraction = validation_fraction
        self.vocab = vocab
        self.random_state = random_state

    def _split_validation(self, instances):
        if not self.validation_fraction:
            return instances, None
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")
        requests = np.unique([i.request_id for i in instances])
        rng = np.random.default_rng(self.random_state)
        n_val = int(round(len(requests) * self.validation_fraction))
        if n_val == 0 or n_val == len(requests):
            return instances, None
        held = set(rng.choice(requests, size=n_val, replace=False).tolist())
        train_part = [i for i in instances if i.request_id not in held]
        val_part = [i for i in instances if i.request_id in held]
        return train_part, val_part

    def fit(self, X, y=None):
        instances = check_instances_input(X, y)
        ablation = preset(self.ablation)
        vocab = Vocab(*self.vocab) if self.vocab is not None else Vocab.infer(instances)
        model_cfg = ModelConfig(d=self.d, num_heads=self.num_heads, head_hidden=self.head_hidden).with_vocab(vocab)
        train_cfg = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            clip_norm=self.clip_norm,
            seed=self.random_state,
        )
        train_part, val_part = self._split_validation(instances)
        result = train(model_cfg, ablation, train_part, val_part, train_cfg)
        self.params_ = result.params
        self.ablation_ = ablation
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.vocab_ = vocab
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        p1 = predict_proba(self.params_, self.ablation_, check_instances_input(X, require_label=False))
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def score(self, X, y=None, sample_weight=None) -> float:
        """Global AUC of the click probabilities."""
        if sample_weight is not None:
            raise ValueError("sample_weight is not supported")
        instances = check_instances_input(X, y)
        return auc_global(self.predict_proba(instances)[:, 1], [i.label for i in instances])

    def ranking_report(self, X, y=None, k: Optional[int] = None) -> dict:
        """AUC, per-request NDCG and MAP for ``X``."""
        instances = check_instances_input(X, y)
        scores = self.predict_proba(instances)[:, 1]
        return evaluate([i.request_id for i in instances], scores, [i.label for i in instances], k=k)
