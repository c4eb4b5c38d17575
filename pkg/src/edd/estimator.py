"""scikit-learn compatible wrapper around the class-incremental trainer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from .adjustment import AdjustmentPolicy
from .errors import ContractViolation
from .losses import LossWeights
from .model import ModelConfig
from .streams import Dataset, TaskSpec
from .trainer import MODES, TrainConfig, train_task


class EDDClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Dual-memory network trained one group of classes at a time.

    ``fit(X, y)`` sorts the classes, splits them into ``n_tasks`` equal
    groups, and learns the groups in order, as a class-incremental stream.
    ``partial_fit(X, y, classes=...)`` learns one new group per call; the
    first call must list every class the estimator will ever see.
    ``transform`` returns final-layer features.
    """

    def __init__(self, n_tasks=5, mode="edd", layer_sizes=(64, 64, 64), memory_slots_init=64,
                 slot_init_stddev=0.1, query_mode="vector", map_channels=1, epochs_per_task=10, batch_size=32,
                 learning_rate=1e-3, pruning_ratio=0.15, lambda_mem=20.0, lambda_orth=10.0, orth_scale=1000.0,
                 distill_alpha=0.5, distill_temperature=2.0, ba_epochs=20, ba_momentum=1e-4, random_state=0):
        self.n_tasks = n_tasks
        self.mode = mode
        self.layer_sizes = layer_sizes
        self.memory_slots_init = memory_slots_init
        self.slot_init_stddev = slot_init_stddev
        self.query_mode = query_mode
        self.map_channels = map_channels
        self.epochs_per_task = epochs_per_task
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.pruning_ratio = pruning_ratio
        self.lambda_mem = lambda_mem
        self.lambda_orth = lambda_orth
        self.orth_scale = orth_scale
        self.distill_alpha = distill_alpha
        self.distill_temperature = distill_temperature
        self.ba_epochs = ba_epochs
        self.ba_momentum = ba_momentum
        self.random_state = random_state

    def _train_config(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        seed = 0 if self.random_state is None else int(self.random_state)
        return TrainConfig(
            epochs_per_task=self.epochs_per_task, batch_size=self.batch_size, learning_rate=self.learning_rate,
            loss_weights=LossWeights(self.lambda_mem, self.lambda_orth, self.orth_scale, self.distill_alpha,
                                     self.distill_temperature),
            adjustment=AdjustmentPolicy(self.pruning_ratio),
            ba_epochs=self.ba_epochs, ba_momentum=self.ba_momentum, seed=seed, mode=self.mode)

    def _model_config(self, n_features, n_classes):
        return ModelConfig(input_dim=n_features, num_classes=n_classes, layer_sizes=tuple(self.layer_sizes),
                           memory_slots_init=self.memory_slots_init, query_mode=self.query_mode,
                           map_channels=self.map_channels, slot_init_stddev=self.slot_init_stddev,
                           use_memory=self.mode != "finetune")

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float32)
        check_classification_targets(y)
        classes = np.unique(y)
        if len(classes) % self.n_tasks:
            raise ValueError(f"{len(classes)} classes cannot be split into {self.n_tasks} equal tasks")
        for attr in ("model_", "classes_"):
            self.__dict__.pop(attr, None)
        if self.mode == "joint":
            return self.partial_fit(X, y, classes=classes)
        groups = np.split(classes, self.n_tasks)
        for group in groups:
            mask = np.isin(y, group)
            self.partial_fit(X[mask], y[mask], classes=classes)
        return self

    def partial_fit(self, X, y, classes=None):
        """Learn the classes present in ``y`` as one new task."""
        X, y = check_X_y(X, y, dtype=np.float32)
        check_classification_targets(y)
        first = not hasattr(self, "model_")
        if first:
            if classes is None:
                raise ValueError("the first call to partial_fit must pass classes=")
            self.classes_ = np.unique(classes)
            self.n_features_in_ = X.shape[1]
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        unknown = np.setdiff1d(np.unique(y), self.classes_)
        if unknown.size:
            raise ValueError(f"labels {unknown.tolist()} are not among classes_")
        local = np.searchsorted(self.classes_, y)
        task_classes = tuple(int(c) for c in np.unique(local))
        task = TaskSpec(Dataset(X, local), Dataset(np.zeros((0, X.shape[1])), np.zeros(0)), task_classes)
        config = self._train_config()
        try:
            if first:
                self.model_ = train_task(None, task, config, self._model_config(X.shape[1], len(self.classes_)))
            else:
                self.model_ = train_task(self.model_, task, config)
        except ContractViolation as exc:
            raise ValueError(str(exc)) from None
        return self

    def _logits(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        with ad.no_grad():
            return self.model_.forward(X, train=False)[0].data.astype(np.float64)

    def predict_proba(self, X):
        """Softmax over the classes learned so far; unseen classes get probability 0."""
        logits = self._logits(X)
        seen = np.array(self.model_.seen_classes, dtype=np.intp)
        z = logits[:, seen] - logits[:, seen].max(axis=1, keepdims=True)
        p = np.exp(z)
        proba = np.zeros_like(logits)
        proba[:, seen] = p / p.sum(axis=1, keepdims=True)
        return proba

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float32)
        return self.model_.features(X)
