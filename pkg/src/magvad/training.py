"""Optimizer, balanced batch sampling, training loop, and checkpoints.

One epoch is one optimizer step on one balanced mini-batch: batch_size
abnormal plus batch_size normal videos, paired positionally, with the mean
pair loss backpropagated through the whole batch. Classes smaller than the
batch size are sampled with replacement so batches stay full.

Checkpoints serialize everything needed to resume bit-exactly:

    magic "VADC" | u32 version=1 | u32 len | config JSON | u64 epoch
    | u32 n_params | per param: u32 len | name | u8 ndim | u32*ndim shape
    | float64 data | u64 adam step count | per param: float64 m | float64 v
    | u32 len | rng state JSON

with all integers and floats little-endian.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import add, backward, mul
from .data import crop_reduce
from .losses import LossWeights, total_loss
from .model import DEFAULT_DROPOUT, ModelParams, init_params, model_forward

CHECKPOINT_MAGIC = b"VADC"
CHECKPOINT_VERSION = 1

LOG_COLUMNS = ("epoch", "l_magnitude", "l_bce", "l_smooth", "l_sparse",
               "total", "delta_score")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.005
    batch_size: int = 32  # per class
    epochs: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    dropout_rate: float = DEFAULT_DROPOUT
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be non-negative")


def config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def config_from_dict(raw: dict) -> TrainConfig:
    raw = dict(raw)
    raw["weights"] = LossWeights(**raw["weights"])
    return TrainConfig(**raw)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(
            m={p.name: np.zeros_like(p.value.data) for p in params},
            v={p.name: np.zeros_like(p.value.data) for p in params},
            t=0,
        )


def adam_step(params, state: AdamState, cfg: TrainConfig) -> None:
    """One Adam update with bias correction and coupled L2 weight decay."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    for p in params:
        if p.value.grad is None:
            raise ValueError(f"missing gradient for parameter {p.name}")
        g = p.value.grad + cfg.weight_decay * p.value.data
        m, v = state.m[p.name], state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** state.t)
        v_hat = v / (1.0 - b2 ** state.t)
        p.value.data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)


# ---------------------------------------------------------------------------
# batch sampling

@dataclass
class Bag:
    """One training video reduced to a (T, D) matrix plus its label."""

    id: str
    features: np.ndarray
    label: int

    @property
    def is_abnormal(self) -> bool:
        return self.label == 1


def _draw(pool, size, rng):
    replace = len(pool) < size
    idx = rng.choice(len(pool), size=size, replace=replace)
    return [pool[i] for i in idx]


def sample_batch(bags, cfg: TrainConfig, rng):
    """batch_size abnormal and batch_size normal bags, paired positionally.

    Without replacement when a class pool is large enough, with replacement
    otherwise. The abnormal class is always drawn first so the rng stream
    is consumed in a fixed order.
    """
    abnormal = [b for b in bags if b.is_abnormal]
    normal = [b for b in bags if not b.is_abnormal]
    if not abnormal:
        raise ValueError("training split has no abnormal videos")
    if not normal:
        raise ValueError("training split has no normal videos")
    return _draw(abnormal, cfg.batch_size, rng), _draw(normal, cfg.batch_size, rng)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    config: TrainConfig
    epoch: int
    tensors: dict  # name -> float64 array, in ModelParams.parameters() order
    adam_m: dict
    adam_v: dict
    adam_t: int
    rng_state: dict

    def apply_to(self, params: ModelParams) -> None:
        """Copy stored tensors into a live model, validating names/shapes."""
        live = params.by_name()
        if set(live) != set(self.tensors):
            missing = sorted(set(live) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(live))
            raise ValueError(f"checkpoint parameter names do not match model: "
                             f"missing {missing}, unexpected {extra}")
        for name, arr in self.tensors.items():
            target = live[name].value.data
            if target.shape != arr.shape:
                raise ValueError(
                    f"checkpoint shape mismatch for parameter {name}: "
                    f"checkpoint {arr.shape}, model {target.shape}"
                )
            target[...] = arr


def params_from_checkpoint(ckpt: Checkpoint, snippet_count: int = 1) -> ModelParams:
    """Rebuild a model from checkpoint tensors alone (for scoring/eval).

    snippet_count is informational; the forward pass handles any T.
    """
    dim = ckpt.tensors["attention.reduce.weight"].shape[1]
    params = init_params(dim, snippet_count, seed=0,
                         dropout_rate=ckpt.config.dropout_rate)
    ckpt.apply_to(params)
    return params


def make_checkpoint(params: ModelParams, state: AdamState, cfg: TrainConfig,
                    epoch: int, rng) -> Checkpoint:
    return Checkpoint(
        config=cfg,
        epoch=epoch,
        tensors={p.name: p.value.data.copy() for p in params.parameters()},
        adam_m={k: v.copy() for k, v in state.m.items()},
        adam_v={k: v.copy() for k, v in state.v.items()},
        adam_t=state.t,
        rng_state=rng.bit_generator.state,
    )


def _pack_bytes(chunks, payload: bytes) -> None:
    chunks.append(struct.pack("<I", len(payload)))
    chunks.append(payload)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    for name, arr in ckpt.tensors.items():
        if not np.isfinite(arr).all():
            raise ValueError(f"refusing to save non-finite parameter {name}")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    _pack_bytes(chunks, json.dumps(config_to_dict(ckpt.config), sort_keys=True).encode())
    chunks.append(struct.pack("<Q", ckpt.epoch))
    chunks.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        _pack_bytes(chunks, name.encode())
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    chunks.append(struct.pack("<Q", ckpt.adam_t))
    for name in ckpt.tensors:
        chunks.append(np.ascontiguousarray(ckpt.adam_m[name], dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(ckpt.adam_v[name], dtype="<f8").tobytes())
    _pack_bytes(chunks, json.dumps(ckpt.rng_state, sort_keys=True).encode())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise ValueError(f"{self.path}: truncated checkpoint while reading {what}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))

    def take_prefixed(self, what: str) -> bytes:
        (n,) = self.unpack("<I", f"{what} length")
        return self.take(n, what)


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}, "
                         f"expected {CHECKPOINT_VERSION}")
    cfg = config_from_dict(json.loads(r.take_prefixed("config")))
    (epoch,) = r.unpack("<Q", "epoch")
    (n_params,) = r.unpack("<I", "parameter count")
    tensors = {}
    for _ in range(n_params):
        name = r.take_prefixed("parameter name").decode()
        (ndim,) = r.unpack("<B", f"{name} ndim")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        size = int(np.prod(shape)) if shape else 1
        data = r.take(size * 8, f"{name} data")
        tensors[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    (adam_t,) = r.unpack("<Q", "optimizer step count")
    adam_m, adam_v = {}, {}
    for name, arr in tensors.items():
        adam_m[name] = np.frombuffer(
            r.take(arr.size * 8, f"{name} first moment"), dtype="<f8"
        ).reshape(arr.shape).copy()
        adam_v[name] = np.frombuffer(
            r.take(arr.size * 8, f"{name} second moment"), dtype="<f8"
        ).reshape(arr.shape).copy()
    rng_state = json.loads(r.take_prefixed("rng state"))
    if r.pos != len(r.blob):
        raise ValueError(f"{path}: {len(r.blob) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(cfg, int(epoch), tensors, adam_m, adam_v, int(adam_t), rng_state)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    params: ModelParams
    optimizer: AdamState
    config: TrainConfig
    log_rows: list  # one dict per epoch, keys LOG_COLUMNS
    checkpoint: Checkpoint


def bags_from_manifest(manifest, crop_mode="mean"):
    records = manifest.load_all()
    if not records:
        raise ValueError("manifest contains no videos")
    bags = [
        Bag(r.id, crop_reduce(r.features, crop_mode), 1 if r.is_abnormal else 0)
        for r in records
    ]
    dims = {b.features.shape[1] for b in bags}
    if len(dims) != 1:
        raise ValueError(f"videos disagree on feature dimension: {sorted(dims)}")
    return bags


def format_log_rows(rows) -> str:
    """Render epoch logs as CSV with full float precision."""
    lines = [",".join(LOG_COLUMNS)]
    for row in rows:
        lines.append(",".join(
            str(row["epoch"]) if col == "epoch" else repr(row[col])
            for col in LOG_COLUMNS
        ))
    return "\n".join(lines) + "\n"


def train_bags(bags, cfg: TrainConfig, log_path=None, checkpoint_path=None,
               resume: Optional[Checkpoint] = None) -> TrainResult:
    """Run the training loop over in-memory bags.

    With `resume`, parameters, optimizer moments and the rng stream are
    restored from the checkpoint and epoch numbering continues where it
    stopped; the result is bit-identical to a run that never paused.
    """
    dims = {b.features.shape[1] for b in bags}
    if len(dims) != 1:
        raise ValueError(f"videos disagree on feature dimension: {sorted(dims)}")
    dim = dims.pop()
    t_len = bags[0].features.shape[0]

    params = init_params(dim, t_len, seed=cfg.seed, dropout_rate=cfg.dropout_rate)
    param_list = params.parameters()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,)))
    if resume is not None:
        resume.apply_to(params)
        state = AdamState(
            m={k: v.copy() for k, v in resume.adam_m.items()},
            v={k: v.copy() for k, v in resume.adam_v.items()},
            t=resume.adam_t,
        )
        rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch
    else:
        state = AdamState.for_params(param_list)
        start_epoch = 0
    if start_epoch > cfg.epochs:
        raise ValueError(f"checkpoint is at epoch {start_epoch}, "
                         f"beyond configured epochs {cfg.epochs}")

    rows = []
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        if log_fh is not None:
            log_fh.write(",".join(LOG_COLUMNS) + "\n")
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            abnormal, normal = sample_batch(bags, cfg, rng)
            sums = {col: 0.0 for col in LOG_COLUMNS[1:]}
            batch_total = None
            try:
                for abn, nrm in zip(abnormal, normal):
                    abn_bag = model_forward(abn.features, params, training=True,
                                            rng=rng, label=1)
                    nrm_bag = model_forward(nrm.features, params, training=True,
                                            rng=rng, label=0)
                    bd = total_loss(abn_bag, nrm_bag, cfg.weights)
                    batch_total = bd.total if batch_total is None else add(batch_total, bd.total)
                    for col, val in bd.as_floats().items():
                        sums[col] += val
                backward(mul(1.0 / cfg.batch_size, batch_total))
            except FloatingPointError as exc:
                raise FloatingPointError(f"non-finite loss at epoch {epoch}: {exc}") from exc
            adam_step(param_list, state, cfg)

            row = {"epoch": epoch}
            row.update({col: sums[col] / cfg.batch_size for col in LOG_COLUMNS[1:]})
            rows.append(row)
            if log_fh is not None:
                log_fh.write(",".join(
                    str(epoch) if col == "epoch" else repr(row[col])
                    for col in LOG_COLUMNS
                ) + "\n")
                log_fh.flush()

            if (checkpoint_path is not None and cfg.checkpoint_every
                    and epoch % cfg.checkpoint_every == 0 and epoch < cfg.epochs):
                save_checkpoint(checkpoint_path,
                                make_checkpoint(params, state, cfg, epoch, rng))
    finally:
        if log_fh is not None:
            log_fh.close()

    final = make_checkpoint(params, state, cfg, cfg.epochs, rng)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, final)
    return TrainResult(params, state, cfg, rows, final)


def train(manifest, cfg: TrainConfig, log_path=None, checkpoint_path=None,
          resume=None, crop_mode="mean") -> TrainResult:
    """Train from a manifest; see train_bags for the core loop contract."""
    if resume is not None and not isinstance(resume, Checkpoint):
        resume = load_checkpoint(resume)
    bags = bags_from_manifest(manifest, crop_mode)
    return train_bags(bags, cfg, log_path=log_path,
                      checkpoint_path=checkpoint_path, resume=resume)
