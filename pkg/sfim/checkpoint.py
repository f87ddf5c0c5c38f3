"""
Checkpoint files ("SFCK").

Layout (little-endian): magic ``SFCK``, u32 version, u32 config length, the
model config as JSON, the 32-byte sha256 of that JSON, u32 tensor count, then
per tensor a u32 name length, the UTF-8 name and one SFTN record, and finally
u32 state length plus the training state as JSON.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from sfim.errors import CheckpointConfigError, CheckpointFormatError, CheckpointVersionError, ConfigError
from sfim.formats import atomic_write_bytes, read_bytes, read_tensor_stream, write_tensor_stream
from sfim.model import ModelConfig, SfimModel, build, load_model_config
from sfim.optim import AdamWState

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SFCK"
CHECKPOINT_VERSION = 1
MOMENT_PREFIXES = ("optim.m.", "optim.v.")


def config_hash(config: ModelConfig) -> bytes:
    return hashlib.sha256(config.config_json().encode("utf-8")).digest()


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    state: Dict[str, Any] = field(default_factory=dict)

    @property
    def parameters(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith(MOMENT_PREFIXES)}

    def optimizer_state(self) -> AdamWState:
        m = {k[len("optim.m."):]: v.copy() for k, v in self.tensors.items() if k.startswith("optim.m.")}
        v = {k[len("optim.v."):]: a.copy() for k, a in self.tensors.items() if k.startswith("optim.v.")}
        return AdamWState(step=int(self.state.get("optimizer_step", 0)), m=m, v=v)

    def to_model(self) -> SfimModel:
        model = build(self.config, seed=0)
        model.load_arrays(self.parameters)
        return model


def _u32(value: int) -> bytes:
    return np.asarray([value], dtype="<u4").tobytes()


def checkpoint_bytes(model: SfimModel, state: Optional[Dict[str, Any]] = None,
                     optimizer: Optional[AdamWState] = None, dtype: str = "float64") -> bytes:
    config_json = model.config.config_json().encode("utf-8")
    tensors = dict(model.state_arrays())
    state = dict(state or {})
    if optimizer is not None:
        tensors.update({f"optim.m.{k}": a for k, a in optimizer.m.items()})
        tensors.update({f"optim.v.{k}": a for k, a in optimizer.v.items()})
        state["optimizer_step"] = optimizer.step

    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(_u32(CHECKPOINT_VERSION))
    out.write(_u32(len(config_json)))
    out.write(config_json)
    out.write(hashlib.sha256(config_json).digest())
    out.write(_u32(len(tensors)))
    for name in sorted(tensors):
        encoded = name.encode("utf-8")
        out.write(_u32(len(encoded)))
        out.write(encoded)
        write_tensor_stream(out, tensors[name], dtype)
    state_json = json.dumps(state, sort_keys=True).encode("utf-8")
    out.write(_u32(len(state_json)))
    out.write(state_json)
    return out.getvalue()


def save_checkpoint(path: Union[str, Path], model: SfimModel, state: Optional[Dict[str, Any]] = None,
                    optimizer: Optional[AdamWState] = None, dtype: str = "float64") -> Path:
    path = Path(path)
    atomic_write_bytes(path, checkpoint_bytes(model, state, optimizer, dtype))
    logger.info("saved checkpoint %s", path)
    return path


def _take(stream: io.BytesIO, count: int, what: str) -> bytes:
    chunk = stream.read(count)
    if len(chunk) != count:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return chunk


def _take_u32(stream: io.BytesIO, what: str) -> int:
    return int(np.frombuffer(_take(stream, 4, what), dtype="<u4")[0])


def parse_checkpoint(payload: bytes, expected: Optional[ModelConfig] = None) -> Checkpoint:
    stream = io.BytesIO(payload)
    magic = stream.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"not a checkpoint: bad magic {magic!r}")
    version = _take_u32(stream, "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(version, CHECKPOINT_VERSION)
    config_json = _take(stream, _take_u32(stream, "config length"), "config")
    stored_hash = _take(stream, 32, "config hash")
    if hashlib.sha256(config_json).digest() != stored_hash:
        raise CheckpointConfigError("model config does not match its stored hash")
    try:
        config = load_model_config(json.loads(config_json))
    except (ValueError, TypeError, ConfigError) as exc:
        raise CheckpointFormatError(f"unreadable model config: {exc}") from exc
    if expected is not None and config_hash(expected) != stored_hash:
        raise CheckpointConfigError("checkpoint was written for a different model config")

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(_take_u32(stream, "tensor count")):
        name = _take(stream, _take_u32(stream, "name length"), "name").decode("utf-8")
        tensors[name] = read_tensor_stream(stream)
    state = json.loads(_take(stream, _take_u32(stream, "state length"), "state"))
    return Checkpoint(config, tensors, state)


def load_checkpoint(path: Union[str, Path], expected: Optional[ModelConfig] = None) -> Checkpoint:
    return parse_checkpoint(read_bytes(path), expected)
