"""Binary parameter checkpoints.

Layout (little endian): magic ``IODC``, version u32, entry count u32, then per
entry: name length u16, UTF-8 name, rank u8, each dim u32, float32 data.
Adam moments are stored as ``<name>.m1`` / ``<name>.m2`` and the step counter
as the rank-0 entry ``adam.step``. Extra rank-0 entries (``arch.*``) carry
settings that cannot be recovered from parameter shapes.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .optim import ParamStore

MAGIC = b"IODC"
VERSION = 1


class CheckpointError(IOError):
    pass


def write_entries(path: str | os.PathLike, entries: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, arr in entries.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())
    os.replace(tmp, path)


def read_entries(path: str | os.PathLike) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    entries = {}
    for _ in range(count):
        (nlen,) = take("<H")
        if pos + nlen > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<B")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        if pos + 4 * n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims)
        pos += 4 * n
        entries[name] = arr.astype(np.float32)
    return entries


def save_checkpoint(path, store: ParamStore, extra: dict[str, float] | None = None) -> None:
    entries: dict[str, np.ndarray] = {}
    for name, t in store.items():
        entries[name] = t.data
    for name in store:
        entries[f"{name}.m1"] = store.m1[name]
        entries[f"{name}.m2"] = store.m2[name]
    entries["adam.step"] = np.array(store.step, dtype=np.float32)
    for key, value in (extra or {}).items():
        entries[key] = np.array(value, dtype=np.float32)
    write_entries(path, entries)


def load_checkpoint(path, dtype=np.float32) -> tuple[ParamStore, dict[str, float]]:
    """Returns the parameter store and the scalar extras (``arch.*`` etc.)."""
    entries = read_entries(path)
    store = ParamStore(dtype)
    extra: dict[str, float] = {}
    for name, arr in entries.items():
        if name.endswith(".m1") or name.endswith(".m2"):
            continue
        if name == "adam.step":
            store.step = int(arr)
        elif name.startswith("arch."):
            extra[name] = float(arr)
        else:
            store.add(name, arr)
    for name in store:
        store.m1[name] = entries.get(f"{name}.m1", np.zeros_like(store[name].data)).astype(dtype)
        store.m2[name] = entries.get(f"{name}.m2", np.zeros_like(store[name].data)).astype(dtype)
    return store, extra
