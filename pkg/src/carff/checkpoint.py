"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"CARFFCK\\0"
    version    uint32
    header_len uint64
    digest     32 bytes  sha256 over header + data
    header     JSON (utf-8, sorted keys): kind, config, meta, tensor index
    data       float32 little-endian arrays, concatenated in index order

Every array is stored as float32 with its shape recorded in the header, so
fixtures stay portable across languages. Non-array state (RNG state, ids)
goes into ``meta`` as JSON.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigMismatchError, CorruptCheckpointError, VersionMismatchError

MAGIC = b"CARFFCK\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ32s")


@dataclass
class Checkpoint:
    kind: str
    config: dict
    meta: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)


def _to_numpy(value):
    if hasattr(value, "detach"):
        value = value.detach().cpu().numpy()
    return np.ascontiguousarray(np.asarray(value, dtype="<f4"))


def dumps(ckpt: Checkpoint) -> bytes:
    index = []
    chunks = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = _to_numpy(ckpt.tensors[name])
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"kind": ckpt.kind, "config": ckpt.config, "meta": ckpt.meta, "tensors": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    body = header + b"".join(chunks)
    digest = hashlib.sha256(body).digest()
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header), digest) + body


def loads(blob: bytes) -> Checkpoint:
    if len(blob) < _PREFIX.size:
        raise CorruptCheckpointError("file shorter than checkpoint prefix")
    magic, version, header_len, digest = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptCheckpointError("bad magic; not a carff checkpoint")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    body = blob[_PREFIX.size:]
    if len(body) < header_len or hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError("checksum mismatch (truncated or corrupted file)")
    header = json.loads(body[:header_len].decode("utf-8"))
    data = body[header_len:]
    tensors = {}
    for entry in header["tensors"]:
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(data):
            raise CorruptCheckpointError(f"tensor {entry['name']} runs past end of file")
        arr = np.frombuffer(data[start:stop], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.float32)
    return Checkpoint(header["kind"], header["config"], header["meta"], tensors)


def check_config(config: dict, expect: dict) -> None:
    for key, value in expect.items():
        found = config.get(key)
        if found != value:
            raise ConfigMismatchError(key, value, found)


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    """Write ``ckpt`` to ``path``; returns the sha256 hex digest of the file."""
    blob = dumps(ckpt)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path, kind: str | None = None, expect: dict | None = None) -> Checkpoint:
    ckpt = loads(Path(path).read_bytes())
    if kind is not None and ckpt.kind != kind:
        raise ConfigMismatchError("kind", kind, ckpt.kind)
    if expect:
        check_config(ckpt.config, expect)
    return ckpt


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_dict_tensors(module, prefix: str) -> dict:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_state_dict_tensors(module, tensors: dict, prefix: str) -> None:
    import torch

    own = module.state_dict()
    state = {}
    for key, ref in own.items():
        name = f"{prefix}.{key}"
        if name not in tensors:
            raise CorruptCheckpointError(f"missing tensor {name}")
        state[key] = torch.from_numpy(np.array(tensors[name])).to(ref.dtype).reshape(ref.shape)
    module.load_state_dict(state)
