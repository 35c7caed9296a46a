"""Single-file parameter container.

Layout: 8-byte magic, little-endian u64 manifest length, UTF-8 JSON manifest, then one
raw little-endian float64 blob per parameter in manifest order.
"""

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

import numpy as np
import torch
from torch import nn

from common.errors import CorruptDataError

PathLike = Union[str, Path]

MAGIC = b"DBGCCKPT"
FORMAT_VERSION = 1
_LENGTH = struct.Struct("<Q")


def _as_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    return np.ascontiguousarray(value, dtype="<f8")


def encode_checkpoint(state: Mapping[str, object], manifest: dict) -> bytes:
    entries, blobs = [], []
    for name, value in state.items():
        array = _as_array(value)
        entries.append({"name": name, "shape": list(array.shape)})
        blobs.append(array.tobytes())
    header = dict(manifest)
    header.update({"format": "dbgc-checkpoint", "version": FORMAT_VERSION, "parameters": entries})
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    return b"".join([MAGIC, _LENGTH.pack(len(encoded)), encoded, *blobs])


def decode_checkpoint(payload: bytes) -> Tuple["OrderedDict[str, np.ndarray]", dict]:
    if payload[: len(MAGIC)] != MAGIC:
        raise CorruptDataError("Not a dbgc checkpoint")
    offset = len(MAGIC)
    (length,) = _LENGTH.unpack_from(payload, offset)
    offset += _LENGTH.size
    manifest = json.loads(payload[offset : offset + length].decode("utf-8"))
    offset += length
    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for entry in manifest["parameters"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + count * 8
        if end > len(payload):
            raise CorruptDataError(f"Checkpoint truncated at parameter {entry['name']}")
        state[entry["name"]] = np.frombuffer(payload[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(payload):
        raise CorruptDataError("Checkpoint has trailing bytes")
    return state, manifest


def save_checkpoint(path: PathLike, state: Mapping[str, object], manifest: dict) -> Path:
    path = Path(path)
    path.write_bytes(encode_checkpoint(state, manifest))
    return path


def load_checkpoint(path: PathLike) -> Tuple["OrderedDict[str, np.ndarray]", dict]:
    return decode_checkpoint(Path(path).read_bytes())


def prefixed_state(**modules: nn.Module) -> Dict[str, torch.Tensor]:
    """Merge several modules' state dicts under `<name>.` prefixes."""
    state: Dict[str, torch.Tensor] = OrderedDict()
    for prefix, module in modules.items():
        for key, value in module.state_dict().items():
            state[f"{prefix}.{key}"] = value
    return state


def load_module_state(module: nn.Module, state: Mapping[str, np.ndarray], prefix: str = "") -> nn.Module:
    own = module.state_dict()
    restored = {}
    for key, current in own.items():
        name = f"{prefix}.{key}" if prefix else key
        if name not in state:
            raise CorruptDataError(f"Checkpoint lacks parameter {name}")
        value = torch.as_tensor(state[name], dtype=current.dtype)
        if tuple(value.shape) != tuple(current.shape):
            raise CorruptDataError(
                f"Parameter {name}: checkpoint shape {tuple(value.shape)} != {tuple(current.shape)}"
            )
        restored[key] = value
    module.load_state_dict(restored)
    return module
