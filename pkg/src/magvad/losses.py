"""Training objective for weakly labeled bags of snippet features.

A bag is one video: per-snippet feature magnitudes and classifier scores
plus a single video-level label (1 abnormal, 0 normal). The objective
separates bags by the mean magnitude of their top-k snippets, applies
binary cross-entropy to the mean classifier score of the same top-k
selection, and regularizes abnormal-bag scores for temporal smoothness
and sparsity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    add,
    as_tensor,
    gather,
    log,
    mean_all,
    mul,
    narrow,
    neg,
    relu,
    sub,
    sum_all,
    topk_indices,
    topk_mean,
)

DEFAULT_MARGIN = 100.0
DEFAULT_TOP_K = 3
DEFAULT_SMOOTHNESS_WEIGHT = 8e-4
DEFAULT_SPARSITY_WEIGHT = 8e-4


@dataclass
class BagScores:
    """Per-snippet outputs of one video plus its video-level label."""

    magnitudes: Tensor
    scores: Tensor
    label: int

    def __post_init__(self):
        self.magnitudes = as_tensor(self.magnitudes)
        self.scores = as_tensor(self.scores)
        if self.magnitudes.ndim != 1 or self.scores.ndim != 1:
            raise ValueError("magnitudes and scores must be 1-D")
        if self.magnitudes.shape[0] != self.scores.shape[0]:
            raise ValueError(
                f"magnitudes ({self.magnitudes.shape[0]}) and scores "
                f"({self.scores.shape[0]}) must have equal length"
            )
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if np.any(self.magnitudes.data < 0.0):
            raise ValueError("magnitudes must be non-negative")
        s = self.scores.data
        if np.any(s <= 0.0) or np.any(s >= 1.0):
            raise ValueError("scores must lie strictly inside (0, 1)")

    @property
    def snippet_count(self) -> int:
        return self.magnitudes.shape[0]


@dataclass
class LossWeights:
    """Term weights and ranking hyperparameters of the total objective."""

    magnitude: float = 1.0
    classification: float = 1.0
    smoothness: float = DEFAULT_SMOOTHNESS_WEIGHT
    sparsity: float = DEFAULT_SPARSITY_WEIGHT
    margin: float = DEFAULT_MARGIN
    top_k: int = DEFAULT_TOP_K

    def __post_init__(self):
        for name in ("magnitude", "classification", "smoothness", "sparsity"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} weight must be non-negative")
        if self.margin < 0.0:
            raise ValueError("margin must be non-negative")
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")


@dataclass
class LossBreakdown:
    """Scalar loss terms of one abnormal/normal bag pair."""

    l_magnitude: Tensor
    l_bce: Tensor
    l_smooth: Tensor
    l_sparse: Tensor
    total: Tensor
    delta_score: float

    def as_floats(self) -> dict:
        return {
            "l_magnitude": self.l_magnitude.item(),
            "l_bce": self.l_bce.item(),
            "l_smooth": self.l_smooth.item(),
            "l_sparse": self.l_sparse.item(),
            "total": self.total.item(),
            "delta_score": self.delta_score,
        }


def separability(abnormal: BagScores, normal: BagScores, k: int = DEFAULT_TOP_K) -> Tensor:
    """Gap between the top-k mean magnitudes of the two bags."""
    return sub(topk_mean(abnormal.magnitudes, k), topk_mean(normal.magnitudes, k))


def magnitude_loss(abnormal: BagScores, normal: BagScores,
                   margin: float = DEFAULT_MARGIN, k: int = DEFAULT_TOP_K) -> Tensor:
    """Hinge pushing the magnitude gap past the margin; zero once it is."""
    return relu(sub(float(margin), separability(abnormal, normal, k)))


def classification_loss(bag: BagScores, k: int = DEFAULT_TOP_K) -> Tensor:
    """Cross-entropy on the mean score of the top-k snippets by magnitude.

    The ranking is by magnitude value only; gradients flow through the
    selected scores, not through the selection itself.
    """
    idx = topk_indices(bag.magnitudes.data, k)
    mean_prob = mean_all(gather(bag.scores, idx))
    if bag.label == 1:
        return neg(log(mean_prob))
    return neg(log(sub(1.0, mean_prob)))


def smoothness(bag: BagScores) -> Tensor:
    """Sum of squared differences between temporally adjacent scores."""
    t = bag.snippet_count
    lead = narrow(bag.scores, 1, t)
    lag = narrow(bag.scores, 0, t - 1)
    diff = sub(lead, lag)
    return sum_all(mul(diff, diff))


def sparsity(bag: BagScores) -> Tensor:
    """Sum of all snippet scores."""
    return sum_all(bag.scores)


def total_loss(abnormal: BagScores, normal: BagScores,
               weights: LossWeights = None) -> LossBreakdown:
    """Weighted sum of all terms for one abnormal/normal pair.

    Smoothness and sparsity apply to the abnormal bag only; cross-entropy
    applies to both bags. The summation order below is fixed so repeated
    runs accumulate floating point error identically.
    """
    if weights is None:
        weights = LossWeights()
    if abnormal.label != 1:
        raise ValueError(f"abnormal bag must have label 1, got {abnormal.label}")
    if normal.label != 0:
        raise ValueError(f"normal bag must have label 0, got {normal.label}")

    delta = separability(abnormal, normal, weights.top_k)
    l_magnitude = relu(sub(float(weights.margin), delta))
    l_bce = add(
        classification_loss(abnormal, weights.top_k),
        classification_loss(normal, weights.top_k),
    )
    l_smooth = smoothness(abnormal)
    l_sparse = sparsity(abnormal)

    total = add(
        add(
            add(
                mul(float(weights.magnitude), l_magnitude),
                mul(float(weights.classification), l_bce),
            ),
            mul(float(weights.smoothness), l_smooth),
        ),
        mul(float(weights.sparsity), l_sparse),
    )
    return LossBreakdown(l_magnitude, l_bce, l_smooth, l_sparse, total, delta.item())
