"""Named parameter collections and the ``pis-ckpt-v1`` checkpoint container.

File layout (all integers little-endian)::

    b"PISCKPT\\0"                magic
    uint32 header_len
    header_len bytes of UTF-8 JSON  {"version": "pis-ckpt-v1", "meta": {...},
                                     "entries": [{"name", "shape", "offset"}...]}
    payload                      float32 little-endian values, concatenated

Offsets count bytes from the start of the payload. The JSON is written with
sorted keys so that identical parameters always produce identical bytes.
"""

from __future__ import annotations

import fnmatch
import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .tensor import Tensor

CKPT_VERSION = "pis-ckpt-v1"
_MAGIC = b"PISCKPT\0"


class CheckpointError(ValueError):
    pass


class ParameterGroup:
    """Ordered ``name -> Tensor`` map plus the subset currently trainable."""

    def __init__(self, entries: Iterable[tuple[str, Tensor]] = ()):
        self.entries: OrderedDict[str, Tensor] = OrderedDict()
        self.trainable: set[str] = set()
        for name, t in entries:
            self.add(name, t)

    def add(self, name: str, value, trainable: bool = False) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        self.entries[name] = t
        if trainable:
            self.trainable.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self, pattern: str | None = None) -> list[str]:
        if pattern is None:
            return list(self.entries)
        return [n for n in self.entries if fnmatch.fnmatchcase(n, pattern)]

    def items(self):
        return self.entries.items()

    def set_trainable(self, names: Iterable[str]) -> None:
        names = set(names)
        unknown = names - set(self.entries)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        self.trainable = names
        for n, t in self.entries.items():
            t.requires_grad = n in names
            t.grad = None

    def track_all(self) -> None:
        self.set_trainable(self.entries)

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def copy(self, dtype=None) -> ParameterGroup:
        out = ParameterGroup()
        for n, t in self.entries.items():
            data = t.data.copy() if dtype is None else t.data.astype(dtype)
            out.add(n, Tensor(data))
        out.set_trainable(self.trainable)
        return out

    def digest(self, name: str) -> str:
        t = self.entries[name]
        return hashlib.sha256(np.ascontiguousarray(t.data, dtype="<f4").tobytes()).hexdigest()

    def digests(self) -> dict[str, str]:
        return {n: self.digest(n) for n in self.entries}

    def num_values(self, names: Iterable[str] | None = None) -> int:
        names = self.entries if names is None else names
        return int(sum(self.entries[n].data.size for n in names))


def _encode(params: ParameterGroup, meta: dict | None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, t in params.items():
        payload = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(payload)
        offset += len(payload)
    header = json.dumps(
        {"version": CKPT_VERSION, "meta": meta or {}, "entries": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    return _MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)


def save_checkpoint(params: ParameterGroup, path, meta: dict | None = None) -> str:
    """Write ``params`` to ``path``; returns the sha256 of the file bytes."""
    blob = _encode(params, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> tuple[ParameterGroup, dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(_MAGIC):
        raise CheckpointError(f"{path}: not a pis checkpoint")
    (hlen,) = struct.unpack_from("<I", blob, len(_MAGIC))
    start = len(_MAGIC) + 4
    header = json.loads(blob[start:start + hlen])
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: version {header.get('version')!r}, expected {CKPT_VERSION}")
    payload = memoryview(blob)[start + hlen:]
    params = ParameterGroup()
    for e in header["entries"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=e["offset"])
        params.add(e["name"], Tensor(arr.astype(np.float32).reshape(e["shape"])))
    return params, header["meta"]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
