"""Synthetic feature datasets with controllable magnitude separation.

Each snippet feature is a noisy unit direction around its class's shared
content direction, scaled to a target L2 norm (class mean plus gaussian
noise), so anomalies differ from normal snippets in both content and
magnitude, just much noisier. Abnormal videos get
`anomaly_snippets_per_video` randomly placed high-magnitude snippets; the
rest match the normal class. Test-split videos also get frame-level labels
marking those snippets' frames, which is what frame-level ROC evaluation
consumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DEFAULT_FRAMES_PER_SNIPPET, write_feature_file, write_frame_labels

# floor on sampled norms; a non-positive norm would destroy the direction
_MIN_NORM = 1e-6

# snippets mix a shared per-class "content" direction into their random
# direction before scaling, mirroring real datasets where normal footage
# looks alike and anomalies share semantics across videos. The directions
# depend only on D (not the config seed) so independently generated train
# and test sets agree on them.
_CONTENT_SEED = 20339
_CONTENT_MIX = 1.0


def _content_directions(dim):
    """(normal, anomaly) unit directions, orthogonal for dim >= 2."""
    rng = np.random.default_rng(_CONTENT_SEED)
    normal = rng.standard_normal(dim)
    normal /= np.linalg.norm(normal)
    if dim == 1:
        return normal, -normal
    raw = rng.standard_normal(dim)
    anomaly = raw - (raw @ normal) * normal
    anomaly /= np.linalg.norm(anomaly)
    return normal, anomaly


@dataclass
class SynthConfig:
    n_normal: int = 20
    n_abnormal: int = 20
    T: int = 32
    D: int = 64
    crops: int = 1
    normal_mag_mean: float = 1.0
    abnormal_mag_mean: float = 3.0
    anomaly_snippets_per_video: int = 3
    noise_std: float = 0.1
    seed: int = 0
    split: str = "train"
    frames_per_snippet: int = DEFAULT_FRAMES_PER_SNIPPET

    def __post_init__(self):
        if self.n_normal < 0 or self.n_abnormal < 0:
            raise ValueError("video counts must be non-negative")
        if min(self.T, self.D, self.crops) < 1:
            raise ValueError("T, D and crops must be positive")
        if not 1 <= self.anomaly_snippets_per_video <= self.T:
            raise ValueError(
                f"anomaly_snippets_per_video must be in [1, {self.T}], "
                f"got {self.anomaly_snippets_per_video}"
            )
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.normal_mag_mean <= 0 or self.abnormal_mag_mean <= 0:
            raise ValueError("magnitude means must be positive")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        if self.frames_per_snippet < 1:
            raise ValueError("frames_per_snippet must be positive")


def _snippet_block(rng, count, dim, mag_mean, noise_std, content_dir):
    """`count` feature rows: random directions scaled to noisy target norms."""
    directions = rng.standard_normal((count, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    directions = directions + _CONTENT_MIX * content_dir
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    norms = np.maximum(mag_mean + noise_std * rng.standard_normal(count), _MIN_NORM)
    return directions * norms[:, None]


def _video_tensor(rng, cfg: SynthConfig, anomaly_positions):
    """One (crops, T, D) tensor; anomaly positions are shared across crops."""
    normal_dir, anomaly_dir = _content_directions(cfg.D)
    crops = np.empty((cfg.crops, cfg.T, cfg.D))
    for c in range(cfg.crops):
        block = _snippet_block(rng, cfg.T, cfg.D, cfg.normal_mag_mean,
                               cfg.noise_std, normal_dir)
        if anomaly_positions is not None:
            block[anomaly_positions] = _snippet_block(
                rng, len(anomaly_positions), cfg.D, cfg.abnormal_mag_mean,
                cfg.noise_std, anomaly_dir,
            )
        crops[c] = block
    return crops


def synth_generate(cfg: SynthConfig, out_dir) -> Path:
    """Write feature files, frame labels (test split) and a manifest.

    Deterministic: the same config produces byte-identical files. Returns
    the manifest path.
    """
    out_dir = Path(out_dir)
    feature_dir = out_dir / "features"
    feature_dir.mkdir(parents=True, exist_ok=True)
    label_dir = out_dir / "frame_labels"
    if cfg.split == "test":
        label_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    num_frames = cfg.T * cfg.frames_per_snippet
    entries = []

    videos = [("normal", i) for i in range(cfg.n_normal)]
    videos += [("abnormal", i) for i in range(cfg.n_abnormal)]
    for label, index in videos:
        vid = f"{cfg.split}_{label}_{index:04d}"
        anomaly_positions = None
        if label == "abnormal":
            anomaly_positions = np.sort(
                rng.choice(cfg.T, size=cfg.anomaly_snippets_per_video, replace=False)
            )
        tensor = _video_tensor(rng, cfg, anomaly_positions)
        write_feature_file(feature_dir / f"{vid}.vswf", tensor)

        entry = {
            "id": vid,
            "feature_path": f"features/{vid}.vswf",
            "label": label,
            "num_frames": num_frames,
            "frames_per_snippet": cfg.frames_per_snippet,
        }
        if cfg.split == "test":
            frame_labels = np.zeros(num_frames, dtype=np.int64)
            if anomaly_positions is not None:
                for pos in anomaly_positions:
                    start = pos * cfg.frames_per_snippet
                    frame_labels[start:start + cfg.frames_per_snippet] = 1
            write_frame_labels(label_dir / f"{vid}.txt", frame_labels)
            entry["frame_labels_path"] = f"frame_labels/{vid}.txt"
        entries.append(entry)

    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return manifest_path
