"""Estimator-style front end over the training and scoring pipeline.

VideoAnomalyDetector follows scikit-learn conventions (constructor stores
hyperparameters verbatim, fit returns self, fitted state lives in
trailing-underscore attributes, get_params/set_params/clone work), but its
inputs are bags, not a tabular matrix: X is a sequence of per-video feature
arrays, each (T, D) or (crops, T, D), and y holds video-level 0/1 labels.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import crop_reduce
from .evaluation import auc, roc_curve, snippet_to_frame_scores
from .losses import LossWeights
from .model import model_forward
from .training import Bag, TrainConfig, train_bags


def _as_bag_features(x, index, crop_mode):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(
            f"X[{index}]: expected a (T, D) or (crops, T, D) array, "
            f"got shape {arr.shape}"
        )
    if not np.isfinite(arr).all():
        raise ValueError(f"X[{index}]: features must be finite")
    return crop_reduce(arr, crop_mode)


def _validate_bags(X, crop_mode):
    if len(X) == 0:
        raise ValueError("X must contain at least one video")
    mats = [_as_bag_features(x, i, crop_mode) for i, x in enumerate(X)]
    dims = {m.shape[1] for m in mats}
    if len(dims) != 1:
        raise ValueError(f"videos disagree on feature dimension: {sorted(dims)}")
    return mats


def _validate_labels(y, n):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"y must have shape ({n},), got {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("y must contain only 0 (normal) and 1 (abnormal)")
    return y.astype(np.int64)


class VideoAnomalyDetector(BaseEstimator):
    """Weakly supervised detector trained on video-level labels only.

    Videos are scored per snippet; `decision_function` reduces each video
    to its maximum snippet score and `predict` thresholds that at 0.5.

    Parameters mirror the training defaults: Adam with learning rate 0.001
    and weight decay 0.005, 500 one-batch epochs of 32 videos per class,
    margin 100 and top-k 3 for the magnitude objective, and 8e-4 weights on
    the smoothness/sparsity regularizers.
    """

    def __init__(self, learning_rate=0.001, weight_decay=0.005, batch_size=32,
                 epochs=500, margin=100.0, top_k=3, lambda_magnitude=1.0,
                 lambda_classification=1.0, lambda_smoothness=8e-4,
                 lambda_sparsity=8e-4, dropout_rate=0.7, crop_mode="mean",
                 random_state=0):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.margin = margin
        self.top_k = top_k
        self.lambda_magnitude = lambda_magnitude
        self.lambda_classification = lambda_classification
        self.lambda_smoothness = lambda_smoothness
        self.lambda_sparsity = lambda_sparsity
        self.dropout_rate = dropout_rate
        self.crop_mode = crop_mode
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        weights = LossWeights(
            magnitude=self.lambda_magnitude,
            classification=self.lambda_classification,
            smoothness=self.lambda_smoothness,
            sparsity=self.lambda_sparsity,
            margin=self.margin,
            top_k=self.top_k,
        )
        return TrainConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            weights=weights,
            dropout_rate=self.dropout_rate,
            seed=0 if self.random_state is None else int(self.random_state),
        )

    def fit(self, X, y):
        """Train on bags X with video-level labels y; returns self."""
        mats = _validate_bags(X, self.crop_mode)
        y = _validate_labels(y, len(mats))
        if not (y == 1).any() or not (y == 0).any():
            raise ValueError("y must contain both a normal and an abnormal video")
        bags = [
            Bag(f"video_{i:04d}", m, int(label))
            for i, (m, label) in enumerate(zip(mats, y))
        ]
        result = train_bags(bags, self._train_config())
        self.model_params_ = result.params
        self.history_ = result.log_rows
        self.n_features_in_ = result.params.feature_dim
        return self

    def predict_snippet_scores(self, X):
        """Inference-mode per-snippet scores, one (T,) array per video."""
        check_is_fitted(self, "model_params_")
        mats = _validate_bags(X, self.crop_mode)
        out = []
        for i, m in enumerate(mats):
            if m.shape[1] != self.n_features_in_:
                raise ValueError(
                    f"X[{i}]: feature dimension {m.shape[1]} does not match "
                    f"the fitted dimension {self.n_features_in_}"
                )
            bag = model_forward(m, self.model_params_, training=False)
            out.append(bag.scores.data.copy())
        return out

    def decision_function(self, X):
        """Per-video anomaly score: the maximum snippet score."""
        return np.array([s.max() for s in self.predict_snippet_scores(X)])

    def predict(self, X):
        """Video-level 0/1 predictions at a 0.5 score threshold."""
        return (self.decision_function(X) >= 0.5).astype(np.int64)

    def predict_frame_scores(self, X, num_frames):
        """Frame score vectors; num_frames gives each video's frame count."""
        scores = self.predict_snippet_scores(X)
        counts = np.asarray(num_frames)
        if counts.shape != (len(scores),):
            raise ValueError(
                f"num_frames must have shape ({len(scores)},), got {counts.shape}"
            )
        return [
            snippet_to_frame_scores(s, int(n)) for s, n in zip(scores, counts)
        ]

    def frame_auc(self, X, frame_labels):
        """Pooled frame-level AUC; frame label lengths give frame counts."""
        labels = [np.asarray(fl) for fl in frame_labels]
        if len(labels) != len(X):
            raise ValueError("frame_labels must align with X")
        frames = self.predict_frame_scores(X, [fl.size for fl in labels])
        return auc(roc_curve(np.concatenate(frames), np.concatenate(labels)))
