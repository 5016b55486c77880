"""scikit-learn style wrapper around editor training."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset import LatentDataset
from .editor import edit
from .sinkhorn import SinkhornConfig
from .trainer import TrainingConfig, train

__all__ = ["LatentEditor"]


class LatentEditor(TransformerMixin, BaseEstimator):
    """Learn an affine edit that switches on (or off) one attribute.

    ``fit(X, Y)`` takes latent codes and an ``(n, K)`` binary label matrix;
    ``transform(X)`` applies the learned edit with strength ``alpha``.
    ``mode="lw"`` trains on the Sinkhorn objective, ``mode="lt"`` on the
    classifier-guided baseline.
    """

    def __init__(self, attribute=0, mode="lw", lambda_=0.0, l2_reg=0.0, alpha=1.0,
                 epsilon=None, tolerance=1e-6, relaxation=1.6, max_epochs=500, patience=20,
                 lr=1e-3, val_fraction=0.1, use_weighting=False, increase=True, seed=0):
        self.attribute = attribute
        self.mode = mode
        self.lambda_ = lambda_
        self.l2_reg = l2_reg
        self.alpha = alpha
        self.epsilon = epsilon
        self.tolerance = tolerance
        self.relaxation = relaxation
        self.max_epochs = max_epochs
        self.patience = patience
        self.lr = lr
        self.val_fraction = val_fraction
        self.use_weighting = use_weighting
        self.increase = increase
        self.seed = seed

    def _config(self) -> TrainingConfig:
        return TrainingConfig(
            mode=self.mode,
            lambda_=self.lambda_,
            l2_reg=self.l2_reg,
            sinkhorn=SinkhornConfig(epsilon=self.epsilon, tolerance=self.tolerance,
                                    relaxation=self.relaxation),
            lr=self.lr,
            max_epochs=self.max_epochs,
            patience=self.patience,
            val_fraction=self.val_fraction,
            seed=self.seed,
            use_weighting=self.use_weighting,
            increase=self.increase,
        )

    def fit(self, X, Y, attr_model=None):
        X = check_array(X)
        Y = check_array(Y, ensure_2d=False)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.shape[0] != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows, Y has {Y.shape[0]}")
        data = LatentDataset(X, Y.astype(np.uint8))
        self.editor_, self.report_ = train(data, self.attribute, self._config(), attr_model)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "editor_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return edit(self.editor_, X, self.alpha)

    def direction(self, X):
        """``H(z) = W z + b`` for each row."""
        check_is_fitted(self, "editor_")
        return self.editor_.direction(check_array(X))
