"""Frame-level evaluation: score expansion, ROC curve, AUC, reports.

Snippet scores are broadcast to frames (each snippet covers a contiguous
ceil(num_frames / T) block, the last block absorbing the remainder), frames
from all test videos are pooled, and one global ROC/AUC is computed over
the pool. Thresholds classify a frame positive when score >= threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import crop_reduce
from .model import ModelParams, model_forward


@dataclass
class RocPoint:
    threshold: float
    fpr: float
    tpr: float


@dataclass
class EvalReport:
    auc: float
    roc: list  # RocPoint, sorted by descending threshold
    per_video: dict  # id -> {"mean_score": float, "max_score": float}
    frames_evaluated: int
    positive_frames: int

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "frames_evaluated": self.frames_evaluated,
            "positive_frames": self.positive_frames,
            "per_video": self.per_video,
            "roc": [
                {"threshold": p.threshold, "fpr": p.fpr, "tpr": p.tpr}
                for p in self.roc
            ],
        }

    def to_json(self) -> str:
        # thresholds include an inf sentinel; the output is standard JSON
        # except for that one token, which json.dumps renders as Infinity
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def snippet_to_frame_scores(scores, num_frames) -> np.ndarray:
    """Broadcast T snippet scores to num_frames frames in ceil-sized blocks."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError(f"scores must be 1-D, got shape {scores.shape}")
    t_len = scores.shape[0]
    if num_frames < t_len:
        raise ValueError(f"num_frames ({num_frames}) must be at least the "
                         f"snippet count ({t_len})")
    block = -(-num_frames // t_len)
    return np.repeat(scores, block)[:num_frames]


def _validate_frames(frame_scores, frame_labels):
    scores = np.asarray(frame_scores, dtype=np.float64)
    labels = np.asarray(frame_labels)
    if scores.ndim != 1 or labels.shape != scores.shape:
        raise ValueError("frame scores and labels must be 1-D and equal length")
    if not np.isfinite(scores).all():
        raise ValueError("frame scores must be finite")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("frame labels must be 0 or 1")
    positives = int(labels.sum())
    if positives == 0 or positives == labels.size:
        raise ValueError(
            "ROC needs both classes present, got "
            f"{positives} positive of {labels.size} frames"
        )
    return scores, labels.astype(np.int64)


def roc_curve(frame_scores, frame_labels) -> list:
    """RocPoints at every distinct score plus an inf sentinel at (0, 0).

    A frame counts as predicted positive when its score >= threshold, so
    the lowest threshold yields the (1, 1) endpoint.
    """
    scores, labels = _validate_frames(frame_scores, frame_labels)
    order = np.argsort(-scores, kind="stable")
    scores = scores[order]
    labels = labels[order]

    # keep only the last index of each run of equal scores: cumulative
    # counts there reflect every frame at or above that threshold
    distinct = np.nonzero(np.diff(scores))[0]
    last = np.concatenate([distinct, [scores.size - 1]])

    tp = np.cumsum(labels)[last]
    fp = np.cumsum(1 - labels)[last]
    pos = int(labels.sum())
    neg = labels.size - pos

    points = [RocPoint(threshold=np.inf, fpr=0.0, tpr=0.0)]
    for i, t, f in zip(last, tp, fp):
        points.append(RocPoint(threshold=float(scores[i]),
                               fpr=float(f / neg), tpr=float(t / pos)))
    return points


def auc(roc_points) -> float:
    """Trapezoidal area under the ROC, integrating tpr over fpr."""
    if len(roc_points) < 2:
        raise ValueError("need at least two ROC points")
    fpr = np.array([p.fpr for p in roc_points])
    tpr = np.array([p.tpr for p in roc_points])
    if fpr[0] != 0.0 or tpr[0] != 0.0 or fpr[-1] != 1.0 or tpr[-1] != 1.0:
        raise ValueError("ROC must run from (0, 0) to (1, 1)")
    if np.any(np.diff(fpr) < 0) or np.any(np.diff(tpr) < 0):
        raise ValueError("ROC points must be sorted with non-decreasing rates")
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def score_record(record, params: ModelParams, crop_mode="mean") -> np.ndarray:
    """Inference-mode per-snippet scores for one video, shape (T,)."""
    features = crop_reduce(record.features, crop_mode)
    if features.shape[1] != params.feature_dim:
        raise ValueError(
            f"{record.id}: feature dimension {features.shape[1]} does not "
            f"match model dimension {params.feature_dim}"
        )
    bag = model_forward(features, params, training=False,
                        label=1 if record.is_abnormal else 0)
    return bag.scores.data.copy()


def evaluate(params: ModelParams, manifest, crop_mode="mean") -> EvalReport:
    """Pooled frame-level ROC/AUC over every video in a test manifest."""
    all_scores = []
    all_labels = []
    per_video = {}
    for entry in manifest.entries:
        record = entry.load()
        if record.frame_labels is None:
            raise ValueError(f"{record.id}: test video has no frame labels")
        snippet_scores = score_record(record, params, crop_mode)
        frame_scores = snippet_to_frame_scores(snippet_scores, record.num_frames)
        all_scores.append(frame_scores)
        all_labels.append(record.frame_labels)
        per_video[record.id] = {
            "mean_score": float(snippet_scores.mean()),
            "max_score": float(snippet_scores.max()),
        }
    if not all_scores:
        raise ValueError("test manifest contains no videos")

    frame_scores = np.concatenate(all_scores)
    frame_labels = np.concatenate(all_labels)
    roc = roc_curve(frame_scores, frame_labels)
    return EvalReport(
        auc=auc(roc),
        roc=roc,
        per_video=per_video,
        frames_evaluated=int(frame_labels.size),
        positive_frames=int(frame_labels.sum()),
    )


def write_roc_csv(path, roc_points) -> None:
    lines = ["threshold,fpr,tpr"]
    lines += [f"{p.threshold!r},{p.fpr!r},{p.tpr!r}" for p in roc_points]
    Path(path).write_text("\n".join(lines) + "\n")
