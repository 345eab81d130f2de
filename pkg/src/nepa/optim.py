"""AdamW, learning-rate schedules, layer-wise LR decay, parameter EMA, and
bit-exact checkpointing.

The checkpoint layout is magic ``NEPA``, a u32 version, a u32 record count,
that many tensor records, then a length-prefixed UTF-8 JSON metadata block.
A tensor record is: u32 name length + UTF-8 name, one dtype tag byte
(0 = f32, 1 = f64), u32 rank, u64 extents, then raw little-endian data.
Metadata carries the resolved config, step counters, optimizer scalars, and
the loop rng state, which is what makes resume reproduce an uninterrupted
run exactly.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import CheckpointError, ConfigError, NumericError
from .tensor import Tensor

_MAGIC = b"NEPA"
_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05


class AdamWState:
    """First/second moments and the shared step counter."""

    def __init__(self, params: dict[str, Tensor], cfg: AdamWConfig):
        self.cfg = cfg
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.t = 0


def adamw_step(params: dict[str, Tensor], state: AdamWState, lr: float,
               lr_scale: Optional[dict[str, float]] = None,
               frozen: Optional[set[str]] = None) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Parameters whose ``.grad`` is None (or whose name is in ``frozen``) are
    left untouched, moments included. ``lr_scale`` supplies per-parameter
    multipliers (layer-wise LR decay).
    """
    cfg = state.cfg
    state.t += 1
    t = state.t
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        if frozen and name in frozen:
            continue
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        step_lr = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        if cfg.weight_decay:
            p.data *= 1.0 - step_lr * cfg.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p.data -= (step_lr * update).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# schedules


@dataclass
class ScheduleConfig:
    base_lr: float = 3e-4
    batch_size: int = 64
    warmup_steps: int = 100
    total_steps: int = 1000
    min_lr: float = 0.0
    llrd_start: float = 1.0
    llrd_end: float = 1.0

    def validate(self) -> None:
        if self.warmup_steps > self.total_steps:
            raise ConfigError(
                f"warmup_steps {self.warmup_steps} exceeds total_steps {self.total_steps}")
        if self.base_lr <= 0 or self.batch_size <= 0 or self.total_steps <= 0:
            raise ConfigError("base_lr, batch_size, and total_steps must be positive")
        if not (0 < self.llrd_start <= self.llrd_end):
            raise ConfigError("llrd must satisfy 0 < start <= end")

    @property
    def peak_lr(self) -> float:
        # linear scaling rule: lr = base_lr * B / 256
        return self.base_lr * self.batch_size / 256.0


def lr_at(step: int, sched: ScheduleConfig) -> float:
    """Linear warmup from 0 to the scaled peak, then cosine decay to min_lr."""
    if step < 0:
        raise ConfigError(f"negative step {step}")
    if step > sched.total_steps:
        return sched.min_lr
    peak = sched.peak_lr
    if step < sched.warmup_steps:
        return peak * step / sched.warmup_steps
    span = sched.total_steps - sched.warmup_steps
    progress = (step - sched.warmup_steps) / span if span > 0 else 1.0
    return sched.min_lr + 0.5 * (peak - sched.min_lr) * (1.0 + math.cos(math.pi * progress))


def llrd_factor(layer_index: int, n_layers: int, progress: float,
                sched: ScheduleConfig) -> float:
    """Geometric per-layer multiplier d^(n_layers - layer_index).

    The decay base d moves linearly from llrd_start to llrd_end as the
    fine-tune progresses; fixed decay is start == end. Layer 0 is the patch
    embedding, n_layers the head.
    """
    if not 0 <= layer_index <= n_layers:
        raise ConfigError(f"layer_index {layer_index} outside [0, {n_layers}]")
    d = sched.llrd_start + progress * (sched.llrd_end - sched.llrd_start)
    return d ** (n_layers - layer_index)


# ---------------------------------------------------------------------------
# EMA


class EMAState:
    """Shadow copy of every parameter, geometrically averaged."""

    def __init__(self, params: dict[str, Tensor], decay: float = 0.9999):
        if not 0.0 <= decay < 1.0:
            raise ConfigError(f"ema decay must be in [0,1), got {decay}")
        self.decay = decay
        self.shadow = {name: t.data.copy() for name, t in params.items()}

    def update(self, params: dict[str, Tensor]) -> None:
        d = self.decay
        for name, t in params.items():
            s = self.shadow[name]
            s *= d
            s += (1.0 - d) * t.data

    def as_tensors(self) -> dict[str, Tensor]:
        return {name: Tensor(arr.copy(), requires_grad=True)
                for name, arr in self.shadow.items()}


# ---------------------------------------------------------------------------
# checkpoint format


def _write_record(buf: io.BufferedIOBase, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    buf.write(struct.pack("<I", len(nb)))
    buf.write(nb)
    if arr.dtype == np.float32:
        tag, dt = 0, "<f4"
    elif arr.dtype == np.float64:
        tag, dt = 1, "<f8"
    else:
        raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    buf.write(struct.pack("<B", tag))
    buf.write(struct.pack("<I", arr.ndim))
    for ext in arr.shape:
        buf.write(struct.pack("<Q", ext))
    buf.write(np.ascontiguousarray(arr).astype(dt, copy=False).tobytes())


def _read_exact(buf: io.BufferedIOBase, n: int) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint file")
    return b


def _read_record(buf: io.BufferedIOBase) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<I", _read_exact(buf, 4))
    name = _read_exact(buf, nlen).decode("utf-8")
    (tag,) = struct.unpack("<B", _read_exact(buf, 1))
    if tag not in _DTYPE_TAGS:
        raise CheckpointError(f"record {name!r}: unknown dtype tag {tag}")
    dt = _DTYPE_TAGS[tag]
    (rank,) = struct.unpack("<I", _read_exact(buf, 4))
    shape = tuple(struct.unpack("<Q", _read_exact(buf, 8))[0] for _ in range(rank))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    data = np.frombuffer(_read_exact(buf, count * dt.itemsize), dtype=dt)
    return name, data.reshape(shape).astype(dt.base, copy=True)


def checkpoint_save(path, tensors: dict[str, np.ndarray], metadata: dict) -> None:
    """Write tensors plus a JSON metadata block; byte-deterministic."""
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            _write_record(f, name, tensors[name])
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)


def checkpoint_load(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tensors = {}
        for _ in range(count):
            name, arr = _read_record(f)
            if name in tensors:
                raise CheckpointError(f"duplicate tensor record {name!r}")
            tensors[name] = arr
        (mlen,) = struct.unpack("<I", _read_exact(f, 4))
        metadata = json.loads(_read_exact(f, mlen).decode("utf-8"))
        if f.read(1):
            raise CheckpointError("trailing bytes after metadata block")
    return tensors, metadata


# ---------------------------------------------------------------------------
# full training state


@dataclass
class TrainState:
    """Everything needed to resume training bit-exactly."""

    params: dict[str, Tensor]
    adam: AdamWState
    ema: Optional[EMAState]
    step: int
    rng_state: Optional[dict] = None
    meta: dict = field(default_factory=dict)


_KNOWN_PREFIXES = ("param.", "adam.m.", "adam.v.", "ema.")


def save_train_state(path, state: TrainState, extra_meta: Optional[dict] = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, t in state.params.items():
        tensors[f"param.{name}"] = t.data
    for name, arr in state.adam.m.items():
        tensors[f"adam.m.{name}"] = arr
    for name, arr in state.adam.v.items():
        tensors[f"adam.v.{name}"] = arr
    if state.ema is not None:
        for name, arr in state.ema.shadow.items():
            tensors[f"ema.{name}"] = arr
    meta = dict(state.meta)
    if extra_meta:
        meta.update(extra_meta)
    meta["adamw"] = {
        "t": state.adam.t,
        "beta1": state.adam.cfg.beta1,
        "beta2": state.adam.cfg.beta2,
        "eps": state.adam.cfg.eps,
        "weight_decay": state.adam.cfg.weight_decay,
    }
    meta["ema_decay"] = state.ema.decay if state.ema is not None else None
    meta["step"] = state.step
    meta["rng_state"] = state.rng_state
    checkpoint_save(path, tensors, meta)


def load_train_state(path) -> TrainState:
    tensors, meta = checkpoint_load(path)
    params: dict[str, Tensor] = {}
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    shadow: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        if name.startswith("param."):
            params[name[len("param."):]] = Tensor(arr, requires_grad=True)
        elif name.startswith("adam.m."):
            m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            v[name[len("adam.v."):]] = arr
        elif name.startswith("ema."):
            shadow[name[len("ema."):]] = arr
        else:
            raise CheckpointError(f"unknown tensor name {name!r} in checkpoint")
    ad = meta.get("adamw", {})
    adam = AdamWState(params, AdamWConfig(
        beta1=ad.get("beta1", 0.9), beta2=ad.get("beta2", 0.95),
        eps=ad.get("eps", 1e-8), weight_decay=ad.get("weight_decay", 0.05)))
    for name in params:
        if name in m:
            adam.m[name] = m[name]
        if name in v:
            adam.v[name] = v[name]
    adam.t = ad.get("t", 0)
    ema = None
    if shadow:
        ema = EMAState(params, decay=meta.get("ema_decay") or 0.9999)
        ema.shadow = shadow
    return TrainState(params=params, adam=adam, ema=ema,
                      step=meta.get("step", 0), rng_state=meta.get("rng_state"),
                      meta=meta)
