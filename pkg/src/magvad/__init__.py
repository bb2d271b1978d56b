"""Weakly supervised video anomaly detection on snippet features.

Videos are bags of T snippet feature vectors with only video-level labels.
A temporal attention layer refines the features, the L2 magnitude of the
refined features ranks snippets, and a hinge on the top-k magnitude gap
between abnormal and normal bags drives the two classes apart while a
snippet classifier learns frame-level anomaly scores. Everything runs on a
small reverse-mode autodiff engine whose gradients are verified against
finite differences.
"""

from .autodiff import Parameter, Tensor, backward
from .data import (
    FeatureRecord,
    Manifest,
    ManifestEntry,
    crop_reduce,
    load_manifest,
    read_feature_file,
    write_feature_file,
)
from .estimator import VideoAnomalyDetector
from .evaluation import (
    EvalReport,
    RocPoint,
    auc,
    evaluate,
    roc_curve,
    snippet_to_frame_scores,
)
from .gradcheck import grad_check, run_checks
from .losses import (
    BagScores,
    LossBreakdown,
    LossWeights,
    classification_loss,
    magnitude_loss,
    separability,
    smoothness,
    sparsity,
    total_loss,
)
from .model import (
    AttentionParams,
    ClassifierParams,
    ModelParams,
    attention_forward,
    classifier_forward,
    init_params,
    model_forward,
)
from .synth import SynthConfig, synth_generate
from .training import (
    AdamState,
    Bag,
    Checkpoint,
    TrainConfig,
    TrainResult,
    adam_step,
    load_checkpoint,
    params_from_checkpoint,
    sample_batch,
    save_checkpoint,
    train,
    train_bags,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AttentionParams",
    "Bag",
    "BagScores",
    "Checkpoint",
    "ClassifierParams",
    "EvalReport",
    "FeatureRecord",
    "LossBreakdown",
    "LossWeights",
    "Manifest",
    "ManifestEntry",
    "ModelParams",
    "Parameter",
    "RocPoint",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "VideoAnomalyDetector",
    "adam_step",
    "attention_forward",
    "auc",
    "backward",
    "classification_loss",
    "classifier_forward",
    "crop_reduce",
    "evaluate",
    "grad_check",
    "init_params",
    "load_checkpoint",
    "load_manifest",
    "magnitude_loss",
    "model_forward",
    "params_from_checkpoint",
    "read_feature_file",
    "roc_curve",
    "run_checks",
    "sample_batch",
    "save_checkpoint",
    "separability",
    "smoothness",
    "snippet_to_frame_scores",
    "sparsity",
    "synth_generate",
    "total_loss",
    "train",
    "train_bags",
    "write_feature_file",
]
