"""Scikit-learn style wrappers around the pooling heads.

Samples here are whole clips: ``X`` is a 4-dimensional array shaped
(samples, frames, positions, channels).  :class:`ClipPooler` is an
unsupervised transformer that turns clips into fixed-width pooled vectors;
:class:`ClipClassifier` trains a head end-to-end on labeled clips.  Both
follow the usual estimator conventions (constructor stores hyperparameters
verbatim, ``fit`` learns state into trailing-underscore attributes,
``get_params``/``set_params``/``clone`` work).
"""

from __future__ import annotations

import sys

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .head import (
    HeadConfig,
    head_logits_batch,
    init_head,
    rep_dim,
    representation_batch,
)
from .tensor import Tensor
from .train import OptimState, fit_head, split_train_val

__all__ = ["ClipPooler", "ClipClassifier", "check_clip_array"]


def check_clip_array(X, expect_shape: tuple | None = None) -> np.ndarray:
    """Validate a (samples, frames, positions, channels) clip array.

    Returns a float32 C-contiguous copy.  ``expect_shape`` pins the
    trailing three dims (as learned during fit).
    """
    arr = np.asarray(X)
    if arr.ndim != 4:
        raise ValueError(
            f"expected a 4-dimensional clip array (samples, frames, positions, "
            f"channels), got {arr.ndim} dimensions")
    if arr.shape[0] == 0:
        raise ValueError("need at least one sample")
    if not np.issubdtype(arr.dtype, np.floating) and not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"clip array must be numeric, got dtype {arr.dtype}")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise ValueError("clip array contains non-finite values")
    if expect_shape is not None and arr.shape[1:] != expect_shape:
        raise ValueError(f"clips have shape {arr.shape[1:]}, fitted for {expect_shape}")
    return arr


def _check_fitted(est, attr: str) -> None:
    if not hasattr(est, attr):
        raise NotFittedError(
            f"This {type(est).__name__} instance is not fitted yet. "
            "Call 'fit' before using this estimator.")


class ClipPooler(TransformerMixin, BaseEstimator):
    """Turn clips into pooled feature vectors with a fixed (seeded) head.

    No training happens in ``fit``; it validates shapes and materializes
    deterministic head parameters, so ``transform`` is a reproducible
    feature extractor.  ``variant`` picks the pooling: "gap" (first-order,
    orderless), "gcp" (covariance, orderless), or "tcp" (covariance with
    temporal attention and convolution, order-sensitive).
    """

    def __init__(self, variant: str = "tcp", proj_dim: int = 16,
                 kernel_size: int | None = None, sqrt_iterations: int = 3,
                 use_attention: bool = True, centered: bool = False,
                 seed: int = 0):
        self.variant = variant
        self.proj_dim = proj_dim
        self.kernel_size = kernel_size
        self.sqrt_iterations = sqrt_iterations
        self.use_attention = use_attention
        self.centered = centered
        self.seed = seed

    def _config(self, shape) -> HeadConfig:
        l, n, c = shape
        return HeadConfig(
            variant=self.variant, channels=c,
            proj_dim=min(self.proj_dim, c) if self.variant == "gap" else self.proj_dim,
            frames=l, positions=n, kernel_size=self.kernel_size,
            sqrt_iterations=self.sqrt_iterations, use_attention=self.use_attention,
            centered=self.centered, dropout_rate=0.0, seed=self.seed)

    def fit(self, X, y=None):
        arr = check_clip_array(X)
        self.clip_shape_ = arr.shape[1:]
        self.config_ = self._config(self.clip_shape_)
        self.params_ = init_head(self.config_)
        self.n_features_out_ = rep_dim(self.config_)
        return self

    def transform(self, X) -> np.ndarray:
        _check_fitted(self, "params_")
        arr = check_clip_array(X, expect_shape=self.clip_shape_)
        out = np.empty((arr.shape[0], self.n_features_out_), dtype=np.float32)
        for start in range(0, arr.shape[0], 64):
            xb = Tensor._wrap(np.ascontiguousarray(arr[start:start + 64]))
            out[start:start + 64] = representation_batch(xb, self.params_).data
        return out


class ClipClassifier(ClassifierMixin, BaseEstimator):
    """Classify clips by training a pooling head with momentum SGD."""

    def __init__(self, variant: str = "tcp", proj_dim: int = 16,
                 kernel_size: int | None = None, sqrt_iterations: int = 3,
                 use_attention: bool = True, centered: bool = False,
                 dropout_rate: float = 0.0, learning_rate: float = 0.01,
                 momentum: float = 0.9, weight_decay: float = 1e-4,
                 decay_factor: float = 0.1, decay_every: int = 120,
                 epochs: int = 100, batch_size: int = 32,
                 val_fraction: float = 0.0, seed: int = 0, verbose: int = 0):
        self.variant = variant
        self.proj_dim = proj_dim
        self.kernel_size = kernel_size
        self.sqrt_iterations = sqrt_iterations
        self.use_attention = use_attention
        self.centered = centered
        self.dropout_rate = dropout_rate
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_factor = decay_factor
        self.decay_every = decay_every
        self.epochs = epochs
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.seed = seed
        self.verbose = verbose

    def fit(self, X, y):
        arr = check_clip_array(X)
        y = np.asarray(y)
        if y.shape != (arr.shape[0],):
            raise ValueError(f"y has shape {y.shape}, expected ({arr.shape[0]},)")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        l, n, c = arr.shape[1:]
        cfg = HeadConfig(
            variant=self.variant, channels=c,
            proj_dim=min(self.proj_dim, c) if self.variant == "gap" else self.proj_dim,
            frames=l, positions=n, kernel_size=self.kernel_size,
            sqrt_iterations=self.sqrt_iterations, use_attention=self.use_attention,
            centered=self.centered, dropout_rate=self.dropout_rate,
            num_classes=len(self.classes_), seed=self.seed)
        if self.val_fraction > 0:
            x_tr, y_tr, x_va, y_va = split_train_val(
                arr, encoded, self.val_fraction, self.seed, paired=False)
        else:
            x_tr, y_tr = arr, encoded
            x_va = arr[:0]
            y_va = encoded[:0]
        opt = OptimState(
            learning_rate=self.learning_rate, momentum=self.momentum,
            weight_decay=self.weight_decay, decay_factor=self.decay_factor,
            decay_every=self.decay_every)
        stream = sys.stderr if self.verbose else None
        result = fit_head(cfg, x_tr, y_tr, x_va, y_va, opt, epochs=self.epochs,
                          batch_size=self.batch_size, stream=stream)
        self.config_ = cfg
        self.params_ = result.params
        self.history_ = result.history
        self.stopped_ = result.stopped
        self.clip_shape_ = arr.shape[1:]
        return self

    def decision_function(self, X) -> np.ndarray:
        _check_fitted(self, "params_")
        arr = check_clip_array(X, expect_shape=self.clip_shape_)
        out = np.empty((arr.shape[0], len(self.classes_)), dtype=np.float32)
        for start in range(0, arr.shape[0], 64):
            xb = Tensor._wrap(np.ascontiguousarray(arr[start:start + 64]))
            out[start:start + 64] = head_logits_batch(xb, self.params_).data
        return out

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
