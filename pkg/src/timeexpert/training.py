"""MSE training with Adam, early stopping, and the binary checkpoint format."""

from __future__ import annotations

import json
import logging
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .errors import (
    ConfigError,
    ConfigMismatch,
    CorruptCheckpoint,
    InvalidShape,
    NonFinite,
    NonFiniteLoss,
    UnsupportedVersion,
)
from .numerics import ParamStore, Rng, Tensor, as_tensor, mean, mul, no_grad, sub

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TMOE"
CHECKPOINT_VERSION = 1


def mse_loss(pred, target) -> Tensor:
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise InvalidShape(f"prediction {pred.shape} vs target {target.shape}")
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(pred, np.float64) - np.asarray(target, np.float64))))


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    d = np.asarray(pred, np.float64) - np.asarray(target, np.float64)
    return float(np.mean(d * d))


class Adam:
    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params: ParamStore, grads: Mapping[str, np.ndarray]) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, t in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(t.data)
                self.v[name] = np.zeros_like(t.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            t.data = (t.data - update).astype(t.dtype)


def adam_step(params: ParamStore, grads: Mapping[str, np.ndarray], state: Adam) -> ParamStore:
    state.step(params, grads)
    return params


@dataclass
class TrainConfig:
    epochs: int = 10
    batch: int = 32
    lr: float = 1e-4
    patience: int = 3
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1 or self.patience < 1 or self.lr < 0:
            raise ConfigError(f"invalid training config {self}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def batch_loss(model, inputs: np.ndarray, targets: np.ndarray) -> float:
    with no_grad():
        return float(model.loss(inputs, targets).item())


def evaluate_loss(model, windows, batch: int = 256) -> float:
    """Mean per-window MSE over ``windows`` (dropout off)."""
    total, count = 0.0, 0
    for i in range(0, len(windows), batch):
        x, y = windows.inputs[i:i + batch], windows.targets[i:i + batch]
        total += batch_loss(model, x, y) * len(x)
        count += len(x)
    return total / max(count, 1)


def train(model, train_windows, val_windows, config: TrainConfig | None = None) -> tuple[ParamStore, History]:
    """Seeded mini-batch Adam with early stopping on validation MSE.

    Parameters of ``model`` are updated in place and finally reset to the
    best-validation snapshot, which is also returned.
    """
    config = config or TrainConfig()
    rng = Rng(config.seed)
    opt = Adam(lr=config.lr)
    history = History()
    best_val = float("inf")
    best_state = model.params.state_dict()
    stale = 0
    steps = 0
    start = time.perf_counter()
    n = len(train_windows)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for b_idx, lo in enumerate(range(0, n, config.batch)):
            idx = order[lo:lo + config.batch]
            x, y = train_windows.inputs[idx], train_windows.targets[idx]
            model.params.zero_grad()
            try:
                loss = model.loss(x, y, rng=rng, training=True)
                loss.backward()
            except NonFinite as exc:
                raise NonFiniteLoss(f"non-finite loss in epoch {epoch}, batch {b_idx}: {exc}",
                                    batch_index=b_idx) from exc
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLoss(f"non-finite loss in epoch {epoch}, batch {b_idx}", batch_index=b_idx)
            opt.step(model.params, {k: t.grad for k, t in model.params.items() if t.grad is not None})
            losses.append(value)
            history.step_loss.append(value)
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break
        history.train_loss.append(float(np.mean(losses)) if losses else float("nan"))
        val = evaluate_loss(model, val_windows) if val_windows is not None and len(val_windows) else history.train_loss[-1]
        history.val_loss.append(val)
        log.info("epoch %d train %.5f val %.5f", epoch, history.train_loss[-1], val)
        if val < best_val:
            best_val = val
            best_state = model.params.state_dict()
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                history.stopped_early = True
                break
        if config.max_steps is not None and steps >= config.max_steps:
            break
    model.params.load_state(best_state)
    history.seconds = time.perf_counter() - start
    return model.params, history


# ---- checkpoints --------------------------------------------------------------

def _encode(params: ParamStore, config_dict: dict) -> bytes:
    directory, chunks, offset = [], [], 0
    for name in params.names():
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config_dict, "tensors": directory},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return (CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
            + struct.pack("<Q", len(header)) + header + b"".join(chunks))


def save_checkpoint(path: str | os.PathLike, params: ParamStore, config) -> None:
    """Write ``TMOE | u32 version | u64 json length | json | float32 payload``."""
    config_dict = config.to_dict() if hasattr(config, "to_dict") else dict(config)
    with open(path, "wb") as fh:
        fh.write(_encode(params, config_dict))


@dataclass
class Checkpoint:
    version: int
    config: dict
    params: ParamStore

    def model_config(self):
        from .model import ModelConfig

        return ModelConfig.from_dict(self.config)


def load_checkpoint(path: str | os.PathLike, expected_config=None) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic or truncated header")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersion(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (json_len,) = struct.unpack("<Q", blob[8:16])
    if 16 + json_len > len(blob):
        raise CorruptCheckpoint(f"{path}: header runs past end of file")
    try:
        meta = json.loads(blob[16:16 + json_len].decode("utf-8"))
        directory = meta["tensors"]
        config = meta["config"]
    except (ValueError, KeyError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header ({exc})") from exc
    payload = blob[16 + json_len:]
    params = ParamStore()
    expected_offset = 0
    for entry in directory:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        end = start + 4 * count
        if start != expected_offset or end > len(payload):
            raise CorruptCheckpoint(f"{path}: tensor {entry['name']} out of bounds")
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).astype(np.float32)
        params[entry["name"]] = Tensor(arr, dtype=np.float32)
        expected_offset = end
    if expected_offset != len(payload):
        raise CorruptCheckpoint(f"{path}: {len(payload) - expected_offset} trailing bytes")
    if expected_config is not None:
        want = expected_config.to_dict() if hasattr(expected_config, "to_dict") else dict(expected_config)
        if _normalize(want) != _normalize(config):
            raise ConfigMismatch(f"{path}: checkpoint config differs from the requested one")
    return Checkpoint(version, config, params)


def _normalize(d):
    return json.loads(json.dumps(d, sort_keys=True))
