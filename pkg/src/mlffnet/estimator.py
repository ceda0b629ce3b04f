"""Scikit-learn style facade over the training pipeline.

``PolypSegmenter`` wraps model construction, training, and prediction behind
fit/predict/score with get_params/set_params, so the pipeline composes with
sklearn tooling (grid search over variant/lr, pipelines, clone).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import Sample
from .errors import ContractViolation
from .metrics import metric_report
from .tensor import Tensor
from .train import TrainConfig, evaluate, train


def check_image_batch(X):
    """Validate [n, 3, h, w] float input in [0, 1]; h, w divisible by 32."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ContractViolation(f"X must be [n, 3, h, w], got {arr.shape}")
    if arr.shape[2] % 32 or arr.shape[3] % 32:
        raise ContractViolation(
            f"spatial extents must be divisible by 32, got {arr.shape[2:]}"
        )
    if arr.min() < 0 or arr.max() > 1:
        raise ContractViolation("image values must be in [0, 1]")
    return arr


def check_mask_batch(y, image_shape):
    arr = np.asarray(y, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.shape != (image_shape[0], 1) + image_shape[2:]:
        raise ContractViolation(
            f"y shape {arr.shape} does not match X shape {image_shape}"
        )
    if not np.all(np.isin(np.unique(arr), (0.0, 1.0))):
        raise ContractViolation("masks must be strictly binary")
    return arr


class PolypSegmenter(BaseEstimator):
    """Segmentation estimator: fit on images+masks, predict probability maps."""

    def __init__(self, variant="full", lr=3e-3, weight_decay=1e-4, steps=200,
                 batch=4, seed=0, grad_clip=1.0, channels=(8, 16, 24, 32),
                 decoder_width=16, attn_width=8):
        self.variant = variant
        self.lr = lr
        self.weight_decay = weight_decay
        self.steps = steps
        self.batch = batch
        self.seed = seed
        self.grad_clip = grad_clip
        self.channels = channels
        self.decoder_width = decoder_width
        self.attn_width = attn_width

    def _config(self):
        return TrainConfig(
            variant=self.variant, lr=self.lr, weight_decay=self.weight_decay,
            steps=self.steps, batch=self.batch, seed=self.seed,
            grad_clip=self.grad_clip, channels=tuple(self.channels),
            decoder_width=self.decoder_width, attn_width=self.attn_width,
        )

    def fit(self, X, y):
        X = check_image_batch(X)
        y = check_mask_batch(y, X.shape)
        samples = [
            Sample(Tensor(X[i : i + 1]), Tensor(y[i : i + 1]), id=str(i))
            for i in range(X.shape[0])
        ]
        result = train(self._config(), samples)
        self.model_ = result.model
        self.log_ = result.log
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict/score")

    def predict_proba(self, X):
        """Probability maps [n, 1, h, w] from the primary head."""
        self._check_fitted()
        X = check_image_batch(X)
        self.model_.set_training(False)
        outs = [
            self.model_.forward(Tensor(X[i : i + 1])).p1.data
            for i in range(X.shape[0])
        ]
        return np.concatenate(outs, axis=0)

    def predict(self, X, threshold=0.5):
        """Binary masks [n, 1, h, w]."""
        return (self.predict_proba(X) >= threshold).astype(np.float64)

    def score(self, X, y):
        """Mean Dice over the batch."""
        self._check_fitted()
        X = check_image_batch(X)
        y = check_mask_batch(y, X.shape)
        probs = self.predict_proba(X)
        reports = [
            metric_report(probs[i, 0], y[i, 0]) for i in range(X.shape[0])
        ]
        return float(np.mean([r.m_dice for r in reports]))
