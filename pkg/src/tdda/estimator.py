"""scikit-learn style wrapper around :func:`tdda.trainer.train`."""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datasets import DomainDataset
from .trainer import TrainConfig, latent_mean, predict, predict_proba, train

_CONFIG_FIELDS = tuple(f.name for f in fields(TrainConfig))


class DomainAdaptiveClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Classifier trained on labeled source rows and unlabeled target rows.

    Inputs are expected to be scaled to [-1, 1] already.  ``transform``
    returns the encoder mean, the representation used for prediction.
    Without ``X_target`` the adaptation terms are switched off and the fit
    is plain supervised training.
    """

    def __init__(self, lambda_q=0.01, lambda_h=1.0, lambda_h_prime=0.1, learning_rate=2e-4,
                 beta1=0.5, beta2=0.999, batch_size=16, epochs=300, latent_dim=16,
                 encoder_hidden=(128, 128), classifier_hidden=(64,), task_disc_hidden=(128, 64),
                 binary_disc_hidden=(64,), source_reg=True, target_reg=True,
                 discriminator="task", update_order=("D", "F", "Q", "h"), seed=0):
        self.lambda_q = lambda_q
        self.lambda_h = lambda_h
        self.lambda_h_prime = lambda_h_prime
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.batch_size = batch_size
        self.epochs = epochs
        self.latent_dim = latent_dim
        self.encoder_hidden = encoder_hidden
        self.classifier_hidden = classifier_hidden
        self.task_disc_hidden = task_disc_hidden
        self.binary_disc_hidden = binary_disc_hidden
        self.source_reg = source_reg
        self.target_reg = target_reg
        self.discriminator = discriminator
        self.update_order = update_order
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(**{name: getattr(self, name) for name in _CONFIG_FIELDS})

    def fit(self, X, y, X_target=None, y_target=None):
        """``y_target`` is optional and only used for the per-epoch accuracy log."""
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        classes, codes = np.unique(y, return_inverse=True)
        if len(classes) < 2:
            raise ValueError("need at least two classes")
        cfg = self._config()
        if X_target is None:
            cfg = cfg.source_only()
            X_target = X
        X_target = check_array(X_target, dtype=np.float64)
        if X_target.shape[1] != X.shape[1]:
            raise ValueError(f"X_target has {X_target.shape[1]} features, X has {X.shape[1]}")
        held = None
        if y_target is not None:
            y_target = np.asarray(y_target)
            held = np.clip(np.searchsorted(classes, y_target), 0, len(classes) - 1)
            if len(held) != len(X_target) or (classes[held] != y_target).any():
                raise ValueError("y_target must give one label per target row, "
                                 "drawn from the classes in y")
        source = DomainDataset(X, codes, provenance="fit(X, y)")
        target = DomainDataset(X_target, domain="target", held_out=held, provenance="fit(X_target)")
        self.model_, self.history_ = train(cfg, source, target, n_classes=len(classes))
        self.classes_ = classes
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict(self, X):
        X = self._check(X)
        return self.classes_[predict(self.model_, X)]

    def predict_proba(self, X):
        return predict_proba(self.model_, self._check(X))

    def transform(self, X):
        return latent_mean(self.model_, self._check(X))
