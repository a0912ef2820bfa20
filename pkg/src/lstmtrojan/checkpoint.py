"""Binary checkpoint format plus a JSON metadata sidecar.

Layout (little-endian)::

    b"STLB"  u8 version  u32 n_layers  u32 input_dim  u32 n_actions
    n_layers x (u32 in_dim, u32 units)
    per layer: W1..W8, b1..b4 as row-major f64
    policy_w (A x U), policy_b (A), value_w (U), value_b (1)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lstm import LstmParameters

MAGIC = b"STLB"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    def __init__(self, found, expected=FORMAT_VERSION):
        super().__init__(f"checkpoint format version {found}, this build reads version {expected}")
        self.found, self.expected = found, expected


class DimensionMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: LstmParameters
    metadata: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def dims(self):
        return self.params.dims


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def encode(params: LstmParameters, version: int = FORMAT_VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<BIII", version, len(params.units), params.input_dim, params.n_actions)]
    for layer in params.layers:
        parts.append(struct.pack("<II", layer.input_dim, layer.units))
    for layer in params.layers:
        for _, arr in layer.named_arrays():
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    for arr in (params.policy_w, params.policy_b, params.value_w, params.value_b):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode(blob: bytes, expected_dims=None) -> tuple[LstmParameters, int]:
    head = struct.calcsize("<BIII")
    if len(blob) < 4 + head or blob[:4] != MAGIC:
        raise CorruptCheckpointError("missing STLB magic or truncated header")
    version, n_layers, input_dim, n_actions = struct.unpack_from("<BIII", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(version)
    pos = 4 + head
    if n_layers == 0 or len(blob) < pos + 8 * n_layers:
        raise CorruptCheckpointError("truncated layer table")
    dims = [struct.unpack_from("<II", blob, pos + 8 * k) for k in range(n_layers)]
    pos += 8 * n_layers
    prev = input_dim
    for k, (d_in, units) in enumerate(dims):
        if d_in != prev or units == 0:
            raise DimensionMismatchError(
                f"layer {k + 1} expects input {d_in} but receives {prev}")
        prev = units
    units = tuple(u for _, u in dims)
    size = LstmParameters.size_for(input_dim, units, n_actions)
    payload = blob[pos:]
    if len(payload) != 8 * size:
        raise CorruptCheckpointError(f"payload has {len(payload)} bytes, expected {8 * size}")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    params = LstmParameters(input_dim, units, n_actions)
    offset = 0
    targets = [a for layer in params.layers for _, a in layer.named_arrays()]
    targets += [params.policy_w, params.policy_b, params.value_w, params.value_b]
    for arr in targets:
        arr[...] = values[offset:offset + arr.size].reshape(arr.shape)
        offset += arr.size
    if expected_dims is not None and params.dims != tuple(expected_dims):
        raise DimensionMismatchError(f"checkpoint dims {params.dims}, expected {tuple(expected_dims)}")
    return params, version


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(ckpt.params, ckpt.format_version))
    meta = dict(ckpt.metadata)
    meta.setdefault("format_version", ckpt.format_version)
    meta["input_dim"], meta["units"], meta["n_actions"] = ckpt.params.input_dim, list(ckpt.params.units), ckpt.params.n_actions
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")


def load_checkpoint(path, expected_dims=None) -> Checkpoint:
    path = Path(path)
    params, version = decode(path.read_bytes(), expected_dims)
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        try:
            meta = json.loads(side.read_text())
        except json.JSONDecodeError as exc:
            raise CorruptCheckpointError(f"unreadable metadata sidecar {side}: {exc}") from exc
    return Checkpoint(params, meta, version)
