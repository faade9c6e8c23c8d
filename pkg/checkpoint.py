"""Binary checkpoint format.

    b"HSHD" | u32 version | u64 header length | header JSON | float64 data

All integers and floats are little-endian. The header is compact JSON with
sorted keys; tensors are laid out in name order, so saving a loaded
checkpoint reproduces the original bytes.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

import numpy as np
from pydantic import ValidationError

from errors import MissingFileError, SchemaError, VersionMismatchError
from layers import Params
from models import CheckpointHeader, ExperimentConfig, TensorEntry
from schedule import Schedule

MAGIC = b"HSHD"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    config: ExperimentConfig
    schedule: Schedule
    params: Params
    epoch: int = 0
    rng_states: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    version: int = VERSION


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    entries, offset = [], 0
    for name in sorted(ckpt.params):
        shape = list(np.shape(ckpt.params[name]))
        entries.append(TensorEntry(name=name, shape=shape, offset=offset))
        offset += int(np.prod(shape, dtype=np.int64))
    header = CheckpointHeader(
        version=ckpt.version,
        epoch=ckpt.epoch,
        config=ckpt.config.model_dump(mode="json"),
        schedule=ckpt.schedule.to_json(),
        tensors=entries,
        rng_states=ckpt.rng_states,
    )
    header_bytes = json.dumps(
        header.model_dump(mode="json"), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    data = b"".join(
        np.ascontiguousarray(ckpt.params[e.name], dtype="<f8").tobytes() for e in entries
    )
    return _PREFIX.pack(MAGIC, ckpt.version, len(header_bytes)) + header_bytes + data


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < _PREFIX.size:
        raise SchemaError("checkpoint is truncated")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise SchemaError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    start = _PREFIX.size
    try:
        header = CheckpointHeader.model_validate(json.loads(blob[start : start + header_len]))
        config = ExperimentConfig.model_validate(header.config)
    except (ValueError, ValidationError) as e:
        raise SchemaError(f"invalid checkpoint header: {e}")
    schedule = Schedule.from_json(header.schedule)

    if len(blob) < start + header_len:
        raise SchemaError("checkpoint header runs past the end of the file")
    payload = len(blob) - start - header_len
    expected = sum(int(np.prod(e.shape, dtype=np.int64)) for e in header.tensors)
    if payload != 8 * expected:
        raise SchemaError(f"data block holds {payload} bytes, expected {8 * expected}")
    data = np.frombuffer(blob, dtype="<f8", offset=start + header_len)
    params: Params = {}
    for entry in header.tensors:
        size = int(np.prod(entry.shape, dtype=np.int64))
        if entry.offset + size > data.size:
            raise SchemaError(f"tensor {entry.name} runs past the end of the data block")
        params[entry.name] = data[entry.offset : entry.offset + size].astype(np.float64).reshape(entry.shape)
    return Checkpoint(config, schedule, params, header.epoch, header.rng_states, version)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())
