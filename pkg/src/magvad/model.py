"""Temporal attention layer and snippet classifier.

The attention layer refines a (T, D) matrix of per-snippet features and
returns the same shape. It combines a long-range branch (pairwise temporal
self-attention over channel-reduced features, plus a residual) with a
short-range branch (three dilated width-3 convolutions, dilations 1/2/4,
each emitting D/4 channels). The concatenation of both branches is D wide,
and the full input is added back as the outer residual, so zero weights make
the layer an exact identity.

The classifier scores each refined snippet independently through three
fully connected layers (512, 128, 1) with relu + dropout after the hidden
layers and a sigmoid on the output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    add,
    as_tensor,
    concat,
    conv1d,
    dropout,
    l2_norm_rows,
    matmul,
    relu,
    reshape,
    sigmoid,
    transpose,
)
from .losses import BagScores

BRANCH_DILATIONS = (1, 2, 4)
BRANCH_KERNEL_WIDTH = 3
FC_WIDTHS = (512, 128, 1)
DEFAULT_DROPOUT = 0.7


@dataclass
class AttentionParams:
    """Weights of the attention layer; all projections are width-1 convs."""

    reduce_w: Parameter
    reduce_b: Parameter
    query_w: Parameter
    query_b: Parameter
    key_w: Parameter
    key_b: Parameter
    value_w: Parameter
    value_b: Parameter
    out_w: Parameter
    out_b: Parameter
    branch_ws: list  # one width-3 kernel per dilation in BRANCH_DILATIONS
    branch_bs: list


@dataclass
class ClassifierParams:
    fc1_w: Parameter
    fc1_b: Parameter
    fc2_w: Parameter
    fc2_b: Parameter
    fc3_w: Parameter
    fc3_b: Parameter
    dropout_rate: float = DEFAULT_DROPOUT


@dataclass
class ModelParams:
    attention: AttentionParams
    classifier: ClassifierParams
    feature_dim: int
    snippet_count: int

    def parameters(self) -> list:
        """All learnable parameters in a stable, checkpoint-friendly order."""
        a, c = self.attention, self.classifier
        params = [
            a.reduce_w, a.reduce_b,
            a.query_w, a.query_b,
            a.key_w, a.key_b,
            a.value_w, a.value_b,
            a.out_w, a.out_b,
        ]
        for w, b in zip(a.branch_ws, a.branch_bs):
            params.extend([w, b])
        params.extend([c.fc1_w, c.fc1_b, c.fc2_w, c.fc2_b, c.fc3_w, c.fc3_b])
        return params

    def by_name(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.parameters())


@dataclass
class AttentionActivations:
    """Every intermediate of one attention forward pass, for inspection."""

    inputs: Tensor         # (T, D)
    reduced: Tensor        # (T, D/4)
    query: Tensor          # (T, D/4)
    key: Tensor            # (T, D/4)
    value: Tensor          # (T, D/4)
    attention: Tensor      # (T, T) raw pairwise products
    projected: Tensor      # (T, D/4)
    long_range: Tensor     # (T, D/4)
    short_range: Tensor    # (T, 3D/4)
    output: Tensor         # (T, D)


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _conv_param(rng, name, c_out, c_in, width):
    w = _glorot(rng, (c_out, c_in, width), fan_in=c_in * width, fan_out=c_out * width)
    return Parameter(f"{name}.weight", w), Parameter(f"{name}.bias", np.zeros(c_out))


def _fc_param(rng, name, d_in, d_out):
    w = _glorot(rng, (d_in, d_out), fan_in=d_in, fan_out=d_out)
    return Parameter(f"{name}.weight", w), Parameter(f"{name}.bias", np.zeros(d_out))


def init_params(feature_dim, snippet_count, seed, dropout_rate=DEFAULT_DROPOUT) -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic for a given seed."""
    if feature_dim % 4 != 0:
        raise ValueError(f"feature_dim must be divisible by 4, got {feature_dim}")
    if feature_dim <= 0 or snippet_count <= 0:
        raise ValueError("feature_dim and snippet_count must be positive")
    rng = np.random.default_rng(seed)
    d4 = feature_dim // 4

    reduce_w, reduce_b = _conv_param(rng, "attention.reduce", d4, feature_dim, 1)
    query_w, query_b = _conv_param(rng, "attention.query", d4, d4, 1)
    key_w, key_b = _conv_param(rng, "attention.key", d4, d4, 1)
    value_w, value_b = _conv_param(rng, "attention.value", d4, d4, 1)
    out_w, out_b = _conv_param(rng, "attention.out", d4, d4, 1)
    branch_ws, branch_bs = [], []
    for dil in BRANCH_DILATIONS:
        w, b = _conv_param(rng, f"attention.branch_d{dil}", d4, feature_dim, BRANCH_KERNEL_WIDTH)
        branch_ws.append(w)
        branch_bs.append(b)
    attention = AttentionParams(
        reduce_w, reduce_b, query_w, query_b, key_w, key_b,
        value_w, value_b, out_w, out_b, branch_ws, branch_bs,
    )

    fc1_w, fc1_b = _fc_param(rng, "classifier.fc1", feature_dim, FC_WIDTHS[0])
    fc2_w, fc2_b = _fc_param(rng, "classifier.fc2", FC_WIDTHS[0], FC_WIDTHS[1])
    fc3_w, fc3_b = _fc_param(rng, "classifier.fc3", FC_WIDTHS[1], FC_WIDTHS[2])
    classifier = ClassifierParams(fc1_w, fc1_b, fc2_w, fc2_b, fc3_w, fc3_b, dropout_rate)

    return ModelParams(attention, classifier, feature_dim, snippet_count)


def _check_features(features: Tensor, params: AttentionParams):
    d = params.reduce_w.value.shape[1]
    if features.ndim != 2 or features.shape[1] != d:
        raise ValueError(f"expected features of shape (T, {d}), got {features.shape}")


def _long_range_steps(features: Tensor, params: AttentionParams):
    reduced = conv1d(features, params.reduce_w.value, params.reduce_b.value)
    query = conv1d(reduced, params.query_w.value, params.query_b.value)
    key = conv1d(reduced, params.key_w.value, params.key_b.value)
    value = conv1d(reduced, params.value_w.value, params.value_b.value)
    attention = matmul(query, transpose(key))
    projected = conv1d(matmul(attention, value), params.out_w.value, params.out_b.value)
    long_range = add(projected, reduced)
    return reduced, query, key, value, attention, projected, long_range


def long_range_module(features, params: AttentionParams) -> Tensor:
    """Pairwise temporal self-attention over reduced channels, (T, D/4)."""
    features = as_tensor(features)
    _check_features(features, params)
    return _long_range_steps(features, params)[-1]


def short_range_module(features, params: AttentionParams) -> Tensor:
    """Concatenated dilated-convolution branches, (T, 3D/4)."""
    features = as_tensor(features)
    _check_features(features, params)
    branches = [
        conv1d(features, w.value, b.value, dilation=dil)
        for w, b, dil in zip(params.branch_ws, params.branch_bs, BRANCH_DILATIONS)
    ]
    return concat(branches, axis=1)


def attention_forward(features, params: AttentionParams) -> Tensor:
    """Refined features: concat(long range, short range) + residual input."""
    features = as_tensor(features)
    _check_features(features, params)
    combined = concat(
        [_long_range_steps(features, params)[-1], short_range_module(features, params)],
        axis=1,
    )
    return add(combined, features)


def attention_activations(features, params: AttentionParams) -> AttentionActivations:
    features = as_tensor(features)
    _check_features(features, params)
    reduced, query, key, value, attention, projected, long_range = _long_range_steps(features, params)
    short_range = short_range_module(features, params)
    output = add(concat([long_range, short_range], axis=1), features)
    return AttentionActivations(
        features, reduced, query, key, value, attention, projected,
        long_range, short_range, output,
    )


def classifier_forward(features, params: ClassifierParams, training=False,
                       rng: Optional[np.random.Generator] = None) -> Tensor:
    """Per-snippet scores in (0, 1), shape (T,)."""
    features = as_tensor(features)
    h = relu(add(matmul(features, params.fc1_w.value), params.fc1_b.value))
    h = dropout(h, params.dropout_rate, training, rng)
    h = relu(add(matmul(h, params.fc2_w.value), params.fc2_b.value))
    h = dropout(h, params.dropout_rate, training, rng)
    logits = add(matmul(h, params.fc3_w.value), params.fc3_b.value)
    return sigmoid(reshape(logits, (features.shape[0],)))


def model_forward(features, params: ModelParams, training=False,
                  rng: Optional[np.random.Generator] = None, label=0) -> BagScores:
    """Attention refinement, then per-snippet magnitudes and scores."""
    refined = attention_forward(features, params.attention)
    return BagScores(
        magnitudes=l2_norm_rows(refined),
        scores=classifier_forward(refined, params.classifier, training, rng),
        label=label,
    )
