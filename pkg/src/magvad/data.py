"""Feature-file codec, manifest ingestion, and crop reduction.

Feature files hold one crops x T x D float tensor per video:

    magic "VSWF" | u32 version=1 | u32 crops | u32 T | u32 D | payload

with all integers little-endian and the payload crops*T*D little-endian
32-bit floats in (crop, snippet, feature) row-major order. Values are
promoted to 64-bit in memory.

A dataset manifest is JSON lines, one video per line:

    {"id": str, "feature_path": str, "label": "normal"|"abnormal",
     "num_frames": int, "frame_labels_path": str?}

Paths are resolved relative to the manifest's directory. Frame-label files
are a single line of ASCII 0/1 characters, one per frame.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"VSWF"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")

LABELS = ("normal", "abnormal")
DEFAULT_FRAMES_PER_SNIPPET = 16


@dataclass
class FeatureRecord:
    """One video: feature tensor, video-level label, frame bookkeeping."""

    id: str
    features: np.ndarray  # (crops, T, D) float64
    label: str
    num_frames: int
    frames_per_snippet: int = DEFAULT_FRAMES_PER_SNIPPET
    frame_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3:
            raise ValueError(
                f"{self.id}: features must be (crops, T, D), got shape {self.features.shape}"
            )
        if self.label not in LABELS:
            raise ValueError(f"{self.id}: unknown label {self.label!r}")
        if self.num_frames < 1:
            raise ValueError(f"{self.id}: num_frames must be positive")
        if self.frames_per_snippet < 1:
            raise ValueError(f"{self.id}: frames_per_snippet must be positive")
        if self.frame_labels is not None:
            self.frame_labels = np.asarray(self.frame_labels, dtype=np.int64)
            if self.frame_labels.shape != (self.num_frames,):
                raise ValueError(
                    f"{self.id}: frame_labels length {self.frame_labels.shape} "
                    f"does not match num_frames {self.num_frames}"
                )
            if not np.isin(self.frame_labels, (0, 1)).all():
                raise ValueError(f"{self.id}: frame labels must be 0 or 1")
            if self.label == "normal" and self.frame_labels.any():
                raise ValueError(f"{self.id}: normal video has nonzero frame labels")

    @property
    def is_abnormal(self) -> bool:
        return self.label == "abnormal"

    @property
    def snippet_count(self) -> int:
        return self.features.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]


def write_feature_file(path, features) -> None:
    """Serialize a (crops, T, D) tensor; values are stored as float32."""
    features = np.asarray(features)
    if features.ndim != 3:
        raise ValueError(f"features must be (crops, T, D), got shape {features.shape}")
    if not np.isfinite(features).all():
        raise ValueError("features must be finite")
    crops, t_len, dim = features.shape
    if min(crops, t_len, dim) < 1:
        raise ValueError(f"all feature dimensions must be positive, got {features.shape}")
    payload = np.ascontiguousarray(features, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, crops, t_len, dim))
        fh.write(payload)


def _read_exact(fh, n, what, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(
            f"{path}: truncated feature file, expected {n} bytes of {what}, got {len(buf)}"
        )
    return buf


def read_feature_file(path) -> np.ndarray:
    """Read a feature tensor back as (crops, T, D) float64."""
    with open(path, "rb") as fh:
        magic, version, crops, t_len, dim = _HEADER.unpack(
            _read_exact(fh, _HEADER.size, "header", path)
        )
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}, expected {VERSION}")
        if min(crops, t_len, dim) < 1:
            raise ValueError(f"{path}: header dimensions must be positive, got "
                             f"crops={crops} T={t_len} D={dim}")
        count = crops * t_len * dim
        payload = _read_exact(fh, count * 4, "payload", path)
        if fh.read(1):
            raise ValueError(f"{path}: payload larger than header declares "
                             f"(crops={crops} T={t_len} D={dim})")
    flat = np.frombuffer(payload, dtype="<f4")
    return flat.astype(np.float64).reshape(crops, t_len, dim)


def crop_reduce(features, mode="mean") -> np.ndarray:
    """Collapse the crop axis: elementwise mean, or pick one crop by index."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3:
        raise ValueError(f"expected (crops, T, D), got shape {features.shape}")
    if mode == "mean":
        return features.mean(axis=0)
    if isinstance(mode, int) and not isinstance(mode, bool):
        if not 0 <= mode < features.shape[0]:
            raise ValueError(f"crop index {mode} out of range for {features.shape[0]} crops")
        return features[mode].copy()
    raise ValueError(f"mode must be 'mean' or a crop index, got {mode!r}")


def read_frame_labels(path, num_frames) -> np.ndarray:
    text = Path(path).read_text().strip()
    if not text or set(text) - {"0", "1"}:
        raise ValueError(f"{path}: frame labels must be a line of 0/1 characters")
    labels = np.frombuffer(text.encode(), dtype=np.uint8) - ord("0")
    if labels.size != num_frames:
        raise ValueError(
            f"{path}: {labels.size} frame labels but manifest declares {num_frames} frames"
        )
    return labels.astype(np.int64)


def write_frame_labels(path, labels) -> None:
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("frame labels must be 0 or 1")
    Path(path).write_text("".join("1" if v else "0" for v in labels) + "\n")


@dataclass
class ManifestEntry:
    id: str
    feature_path: Path
    label: str
    num_frames: int
    frame_labels_path: Optional[Path] = None
    frames_per_snippet: int = DEFAULT_FRAMES_PER_SNIPPET

    def load(self) -> FeatureRecord:
        features = read_feature_file(self.feature_path)
        frame_labels = None
        if self.frame_labels_path is not None:
            frame_labels = read_frame_labels(self.frame_labels_path, self.num_frames)
        return FeatureRecord(
            id=self.id,
            features=features,
            label=self.label,
            num_frames=self.num_frames,
            frames_per_snippet=self.frames_per_snippet,
            frame_labels=frame_labels,
        )


@dataclass
class Manifest:
    entries: list
    split: str
    path: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.entries)

    def load_all(self) -> list:
        return [entry.load() for entry in self.entries]


_REQUIRED_FIELDS = ("id", "feature_path", "label", "num_frames")


def load_manifest(path, split="train") -> Manifest:
    """Parse and validate a JSON-lines manifest.

    Every referenced feature file must exist; feature tensors themselves are
    loaded lazily via ManifestEntry.load().
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    path = Path(path)
    base = path.parent
    entries = []
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed manifest line: {exc}") from exc
            if not isinstance(raw, dict):
                raise ValueError(f"{path}:{lineno}: manifest line must be a JSON object")
            missing = [f for f in _REQUIRED_FIELDS if f not in raw]
            if missing:
                raise ValueError(f"{path}:{lineno}: missing fields {missing}")

            vid = str(raw["id"])
            if vid in seen:
                raise ValueError(f"{path}:{lineno}: duplicate id {vid!r}")
            seen.add(vid)

            label = str(raw["label"]).lower()
            if label not in LABELS:
                raise ValueError(f"{path}:{lineno}: unknown label {raw['label']!r}")

            num_frames = raw["num_frames"]
            if not isinstance(num_frames, int) or num_frames < 1:
                raise ValueError(f"{path}:{lineno}: num_frames must be a positive int")

            feature_path = base / raw["feature_path"]
            if not feature_path.is_file():
                raise FileNotFoundError(f"{vid}: feature file not found: {feature_path}")
            frame_labels_path = None
            if raw.get("frame_labels_path") is not None:
                frame_labels_path = base / raw["frame_labels_path"]
                if not frame_labels_path.is_file():
                    raise FileNotFoundError(
                        f"{vid}: frame label file not found: {frame_labels_path}"
                    )
            entries.append(ManifestEntry(
                id=vid,
                feature_path=feature_path,
                label=label,
                num_frames=num_frames,
                frame_labels_path=frame_labels_path,
                frames_per_snippet=int(raw.get("frames_per_snippet",
                                               DEFAULT_FRAMES_PER_SNIPPET)),
            ))
    return Manifest(entries=entries, split=split, path=path)
