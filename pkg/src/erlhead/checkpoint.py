"""Binary parameter container.

Layout (little-endian)::

    magic     4 bytes  b"ERLC"
    version   u32
    count     u32
    entries   count x { name_len u32, name bytes (utf-8), rank u32,
                        dims u32[rank], payload float32[prod(dims)] }

Each trainable parameter ``p`` is followed by ``p@m``, ``p@v`` (Adam moments)
and ``p@step`` (rank-0 entry holding the step count). Parameters without
moment entries load as frozen.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import ParamStore

MAGIC = b"ERLC"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


def _entry(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote rank 0 to 1
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def dumps(store: ParamStore) -> bytes:
    entries = []
    for name, t in store.items():
        entries.append(_entry(name, t.data))
        if store.trainable(name):
            entries.append(_entry(f"{name}@m", store.m[name]))
            entries.append(_entry(f"{name}@v", store.v[name]))
            entries.append(_entry(f"{name}@step", np.array(store.step[name], dtype=np.float32)))
    return MAGIC + struct.pack("<II", VERSION, len(entries)) + b"".join(entries)


def save_checkpoint(store: ParamStore, path) -> None:
    Path(path).write_bytes(dumps(store))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def loads(buf: bytes) -> ParamStore:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", 0)
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    count = r.u32("entry count")
    raw: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = r.pos
        name_len = r.u32("name length")
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("entry name is not valid utf-8", start + 4) from None
        rank = r.u32("rank")
        if rank > 8:
            raise CheckpointError(f"implausible rank {rank} for {name!r}", r.pos - 4)
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        n = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * n, f"payload of {name!r}")
        if name in raw:
            raise CheckpointError(f"duplicate entry {name!r}", start)
        raw[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after last entry", r.pos)

    store = ParamStore()
    for name, arr in raw.items():
        if "@" in name:
            continue
        trainable = f"{name}@m" in raw
        store.add(name, arr, trainable=trainable)
        if trainable:
            store.m[name] = raw[f"{name}@m"].copy()
            store.v[name] = raw[f"{name}@v"].copy()
            store.step[name] = int(raw[f"{name}@step"])
    return store


def load_checkpoint(path) -> ParamStore:
    return loads(Path(path).read_bytes())
