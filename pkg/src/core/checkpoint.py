"""
Binary checkpoint format shared by the REBAR model and the encoder.

Layout:
    4 bytes   magic b"RBAR"
    uint32    format version (LE)
    uint32    header length in bytes (LE)
    header    UTF-8 JSON: {"kind", "config", "tensors": [{"name", "shape"}, ...]}
    payload   each tensor as float32 LE, row-major, in header order
"""

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Sequence

import numpy as np
import torch
from torch import nn

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from utils.errors import CheckpointError
from utils.io_utils import atomic_write_bytes

MAGIC = b"RBAR"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


@dataclass
class Checkpoint:
    kind: str
    config: Dict[str, Any]
    tensors: Dict[str, np.ndarray]


def _state_arrays(module: nn.Module) -> Dict[str, np.ndarray]:
    return {
        name: tensor.detach().cpu().numpy().astype("<f4")
        for name, tensor in module.state_dict().items()
    }


def encode_checkpoint(module: nn.Module, kind: str, config: Dict[str, Any]) -> bytes:
    arrays = _state_arrays(module)
    header = {
        "kind": kind,
        "config": config,
        "tensors": [{"name": name, "shape": list(array.shape)} for name, array in arrays.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, VERSION, len(header_bytes)), header_bytes]
    parts.extend(array.tobytes(order="C") for array in arrays.values())
    return b"".join(parts)


def save_checkpoint(module: nn.Module, kind: str, config: Dict[str, Any], path: Path) -> None:
    """Write a checkpoint atomically."""
    atomic_write_bytes(Path(path), encode_checkpoint(module, kind, config))


def read_checkpoint(path: Path, expected_kind: str) -> Checkpoint:
    """Parse a checkpoint file, validating magic, version, kind and payload size."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"Checkpoint {path} is truncated")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version} in {path}")
    offset = _PREFIX.size
    try:
        header = json.loads(raw[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"Corrupt checkpoint header in {path}: {exc}") from exc
    if header.get("kind") != expected_kind:
        raise CheckpointError(
            f"{path} holds a {header.get('kind')!r} checkpoint, expected {expected_kind!r}"
        )
    offset += header_len

    tensors: Dict[str, np.ndarray] = {}
    for record in header.get("tensors", []):
        shape = tuple(int(dim) for dim in record["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * 4
        if offset + size > len(raw):
            raise CheckpointError(f"Checkpoint {path} ends inside tensor {record['name']}")
        tensors[record["name"]] = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=offset).reshape(shape)
        offset += size
    if offset != len(raw):
        raise CheckpointError(f"Checkpoint {path} has {len(raw) - offset} trailing bytes")
    return Checkpoint(kind=header["kind"], config=header.get("config", {}), tensors=tensors)


def check_config(checkpoint: Checkpoint, expected: Dict[str, Any], ignore: Sequence[str] = ()) -> None:
    """Reject a checkpoint whose stored config disagrees with the configured one."""
    mismatched = {
        key: {"checkpoint": checkpoint.config.get(key), "configured": value}
        for key, value in expected.items()
        if key not in ignore and checkpoint.config.get(key) != value
    }
    if mismatched:
        raise CheckpointError(
            f"{checkpoint.kind} checkpoint config does not match the run configuration",
            details=mismatched,
        )


def restore_parameters(module: nn.Module, checkpoint: Checkpoint) -> None:
    """Copy checkpoint tensors into module, requiring identical names and shapes."""
    state = module.state_dict()
    missing = sorted(set(state) - set(checkpoint.tensors))
    unexpected = sorted(set(checkpoint.tensors) - set(state))
    if missing or unexpected:
        raise CheckpointError(
            "Checkpoint tensors do not match the model",
            details={"missing": missing, "unexpected": unexpected},
        )
    shapes = {
        name: {"checkpoint": list(array.shape), "model": list(state[name].shape)}
        for name, array in checkpoint.tensors.items()
        if tuple(array.shape) != tuple(state[name].shape)
    }
    if shapes:
        raise CheckpointError("Checkpoint tensor shapes do not match the model", details=shapes)
    module.load_state_dict({
        name: torch.as_tensor(np.array(array), dtype=state[name].dtype)
        for name, array in checkpoint.tensors.items()
    })


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over parameter names and float32 values, in state_dict order."""
    digest = hashlib.sha256()
    for name, array in _state_arrays(module).items():
        digest.update(name.encode("utf-8"))
        digest.update(array.tobytes(order="C"))
    return digest.hexdigest()
