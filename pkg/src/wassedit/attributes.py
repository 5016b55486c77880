"""Latent attribute classifiers, attribute correlations and source weighting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset import DataError, LatentDataset

__all__ = [
    "LogisticModel",
    "AttributeModel",
    "LatentAttributeClassifier",
    "fit_logistic",
    "train_classifiers",
    "predict",
    "compute_gamma",
    "compute_source_weights",
    "combination_weights",
    "default_conditioning",
    "save_attribute_model",
    "load_attribute_model",
]

FORMAT_VERSION = 1

LOGISTIC_STEP = 0.1
LOGISTIC_L2 = 1e-4
LOGISTIC_GRAD_TOL = 1e-5
LOGISTIC_MAX_STEPS = 5000


@dataclass
class LogisticModel:
    coef: np.ndarray
    intercept: float

    def decision_function(self, codes) -> np.ndarray:
        return np.asarray(codes, dtype=float) @ self.coef + self.intercept

    def predict_proba(self, codes) -> np.ndarray:
        return expit(self.decision_function(codes))


def fit_logistic(X, y, step=LOGISTIC_STEP, l2=LOGISTIC_L2, tol=LOGISTIC_GRAD_TOL,
                 max_steps=LOGISTIC_MAX_STEPS) -> LogisticModel:
    """Full-batch gradient descent on mean cross-entropy + ``l2/2 ||w||^2``.

    ``y`` may be a vector or an ``(n, K)`` matrix; the columns are independent
    problems solved in lockstep, and a single model or a list is returned
    accordingly.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(y, dtype=float)
    single = Y.ndim == 1
    if single:
        Y = Y[:, None]
    n, dim = X.shape
    W = np.zeros((Y.shape[1], dim))
    c = np.zeros(Y.shape[1])
    for _ in range(max_steps):
        resid = expit(X @ W.T + c) - Y
        gW = resid.T @ X / n + l2 * W
        gc = resid.mean(axis=0)
        gnorm = np.sqrt((gW ** 2).sum(axis=1) + gc ** 2)
        if np.all(gnorm <= tol):
            break
        W -= step * gW
        c -= step * gc
    models = [LogisticModel(W[k].copy(), float(c[k])) for k in range(Y.shape[1])]
    return models[0] if single else models


@dataclass
class AttributeModel:
    """``K`` logistic latent classifiers plus the label correlation matrix."""

    coef: np.ndarray  # (K, dim)
    intercept: np.ndarray  # (K,)
    gamma: np.ndarray  # (K, K)
    attribute_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.coef = np.atleast_2d(np.asarray(self.coef, dtype=float))
        self.intercept = np.asarray(self.intercept, dtype=float).reshape(-1)
        self.gamma = np.asarray(self.gamma, dtype=float)
        K = self.coef.shape[0]
        if self.intercept.shape != (K,) or self.gamma.shape != (K, K):
            raise ValueError("inconsistent attribute model shapes")
        if not self.attribute_names:
            self.attribute_names = [f"attr{k}" for k in range(K)]

    @property
    def K(self) -> int:
        return self.coef.shape[0]

    @property
    def dim(self) -> int:
        return self.coef.shape[1]

    def classifier(self, k: int) -> LogisticModel:
        return LogisticModel(self.coef[k].copy(), float(self.intercept[k]))

    def with_classifier(self, k: int, model: LogisticModel) -> AttributeModel:
        """Copy of this model with classifier ``k`` swapped out (gamma unchanged)."""
        coef = self.coef.copy()
        intercept = self.intercept.copy()
        coef[k] = model.coef
        intercept[k] = model.intercept
        return AttributeModel(coef, intercept, self.gamma.copy(), list(self.attribute_names))

    def logits(self, codes) -> np.ndarray:
        return np.asarray(codes, dtype=float) @ self.coef.T + self.intercept

    def predict_proba(self, codes) -> np.ndarray:
        return expit(self.logits(codes))


def train_classifiers(data: LatentDataset, seed: int = 0) -> AttributeModel:
    """Fit one logistic classifier per attribute plus the correlation matrix.

    Full-batch descent from a zero start is deterministic, so ``seed`` does
    not affect the result; it is accepted for interface symmetry.
    """
    del seed
    data.check_attributes()
    models = fit_logistic(data.codes, data.labels)
    return AttributeModel(
        np.stack([m.coef for m in models]),
        np.array([m.intercept for m in models]),
        compute_gamma(data.labels),
        list(data.attribute_names),
    )


def predict(model: AttributeModel, codes) -> np.ndarray:
    codes = np.atleast_2d(np.asarray(codes, dtype=float))
    if codes.shape[1] != model.dim:
        raise ValueError(f"codes have dim {codes.shape[1]}, model expects {model.dim}")
    return model.predict_proba(codes)


def compute_gamma(labels) -> np.ndarray:
    """Absolute Pearson correlation between label columns."""
    labels = np.asarray(labels, dtype=float)
    if labels.ndim == 1:
        labels = labels[:, None]
    std = labels.std(axis=0)
    if np.any(std == 0):
        bad = np.flatnonzero(std == 0).tolist()
        raise DataError(f"constant label column(s) {bad}; correlation undefined")
    centred = (labels - labels.mean(axis=0)) / std
    gamma = np.abs(centred.T @ centred / labels.shape[0])
    gamma = np.clip(0.5 * (gamma + gamma.T), 0.0, 1.0)
    np.fill_diagonal(gamma, 1.0)
    return gamma


def default_conditioning(labels, k: int) -> list[int]:
    """The ceil(K/2) attributes other than ``k`` with the highest positive rate."""
    labels = np.asarray(labels)
    K = labels.shape[1]
    rates = labels.mean(axis=0)
    order = [j for j in np.argsort(-rates, kind="stable") if j != k]
    return sorted(int(j) for j in order[: math.ceil(K / 2)])


def _combination_keys(labels, conditioning):
    return [tuple(row) for row in np.asarray(labels)[:, conditioning].astype(int)]


def combination_weights(source_labels, target_labels, conditioning) -> dict:
    """Raw weight ``1 / (n_t^A * n_s^A)`` per attribute combination ``A``.

    Combinations absent from the target get weight 0.
    """
    src_keys = _combination_keys(source_labels, conditioning)
    tgt_keys = _combination_keys(target_labels, conditioning)
    n_s, n_t = {}, {}
    for key in src_keys:
        n_s[key] = n_s.get(key, 0) + 1
    for key in tgt_keys:
        n_t[key] = n_t.get(key, 0) + 1
    return {key: (1.0 / (n_t[key] * n_s[key]) if key in n_t else 0.0) for key in n_s}


def apply_combination_weights(labels, conditioning, table: dict) -> np.ndarray:
    """Per-sample weights from a combination table, renormalized to sum to 1."""
    raw = np.array([table.get(key, 0.0) for key in _combination_keys(labels, conditioning)])
    total = raw.sum()
    if total <= 0:
        raise DataError("no attribute combination of the source occurs in the target")
    return raw / total


def compute_source_weights(data: LatentDataset, edited_attribute: int,
                           conditioning_attributes=None) -> np.ndarray:
    """Bias-correcting weights for the source (negative) samples of ``edited_attribute``."""
    k = edited_attribute
    if conditioning_attributes is None:
        conditioning_attributes = default_conditioning(data.labels, k)
    conditioning = [int(j) for j in conditioning_attributes]
    if k in conditioning:
        raise ValueError("conditioning attributes must exclude the edited attribute")
    source = data.labels[data.labels[:, k] == 0]
    target = data.labels[data.labels[:, k] == 1]
    if not conditioning:
        return np.full(len(source), 1.0 / len(source))
    table = combination_weights(source, target, conditioning)
    return apply_combination_weights(source, conditioning, table)


def save_attribute_model(model: AttributeModel, path) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "attribute_names": list(model.attribute_names),
        "dim": model.dim,
        "classifiers": [
            {"weights": model.coef[k].tolist(), "intercept": float(model.intercept[k])}
            for k in range(model.K)
        ],
        "gamma": model.gamma.reshape(-1).tolist(),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_attribute_model(path) -> AttributeModel:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc
    try:
        if doc["format_version"] != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported format_version {doc['format_version']}")
        K = len(doc["classifiers"])
        coef = np.array([c["weights"] for c in doc["classifiers"]], dtype=float)
        intercept = np.array([c["intercept"] for c in doc["classifiers"]], dtype=float)
        gamma = np.array(doc["gamma"], dtype=float).reshape(K, K)
        if coef.shape != (K, doc["dim"]):
            raise DataError(f"{path}: classifier weights do not match dim={doc['dim']}")
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: malformed classifier bundle ({exc})") from exc
    return AttributeModel(coef, intercept, gamma, doc["attribute_names"])


class LatentAttributeClassifier(ClassifierMixin, BaseEstimator):
    """Multi-label logistic classifiers over latent codes.

    ``fit(X, Y)`` takes an ``(n, K)`` binary label matrix. ``predict_proba``
    returns ``(n, K)`` presence probabilities and ``predict`` thresholds them
    at ``threshold``.
    """

    def __init__(self, step=LOGISTIC_STEP, l2=LOGISTIC_L2, tol=LOGISTIC_GRAD_TOL,
                 max_steps=LOGISTIC_MAX_STEPS, threshold=0.5):
        self.step = step
        self.l2 = l2
        self.tol = tol
        self.max_steps = max_steps
        self.threshold = threshold

    def fit(self, X, Y):
        X = check_array(X)
        Y = check_array(Y, ensure_2d=False)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.shape[0] != X.shape[0]:
            raise ValueError("X and Y have different numbers of rows")
        data = LatentDataset(X, Y)
        data.check_attributes()
        models = fit_logistic(X, Y, self.step, self.l2, self.tol, self.max_steps)
        self.model_ = AttributeModel(
            np.stack([m.coef for m in models]),
            np.array([m.intercept for m in models]),
            compute_gamma(Y),
        )
        self.gamma_ = self.model_.gamma
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        return self.model_.logits(X)

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return predict(self.model_, check_array(X))

    def predict(self, X):
        return (self.predict_proba(X) > self.threshold).astype(np.uint8)

    def score(self, X, Y):
        """Mean per-attribute accuracy."""
        Y = np.asarray(Y)
        if Y.ndim == 1:
            Y = Y[:, None]
        return float(np.mean(self.predict(X) == Y))
