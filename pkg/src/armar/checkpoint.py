"""Named-parameter archive with a bit-exact binary format.

Layout (all little-endian): magic ``ARMARCKPT``, format version u16, entry
count u32, then per entry: name length u16, UTF-8 name, rank u8, one u32 per
extent, and the float32 values in row-major order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"ARMARCKPT"
VERSION = 1


def save(path, entries):
    """Write a name -> array mapping. Arrays are stored as float32."""
    names = list(entries.keys())
    if len(set(names)) != len(names):
        raise ValueError("duplicate entry names")
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(names))]
    for name in names:
        arr = np.ascontiguousarray(entries[name], dtype="<f4")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load(path):
    """Read a checkpoint back into an ordered name -> float32 array mapping."""
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}")
    if blob[:len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: bad magic, not a checkpoint")
    off = len(MAGIC)
    version, count = struct.unpack_from("<HI", blob, off)
    off += 6
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        if name in out:
            raise DataError(f"{path}: duplicate entry {name!r}")
        out[name] = arr.copy()
    if off != len(blob):
        raise DataError(f"{path}: trailing bytes after last entry")
    return out


def save_module(path, module, prefix, meta=None):
    """Checkpoint a network's parameters under ``prefix``, plus scalar metadata
    entries (stored as tiny float arrays under ``meta.``)."""
    entries = dict(module.state_dict(prefix))
    for key, value in (meta or {}).items():
        entries[f"meta.{key}"] = np.asarray(value, dtype=np.float32).reshape(-1)
    save(path, entries)


def load_module(path, module, prefix):
    """Load parameters for ``prefix`` into a module; returns the meta mapping."""
    entries = load(path)
    state = {k: v for k, v in entries.items() if k.startswith(prefix + ".")}
    if not state:
        raise DataError(f"{path}: no entries under prefix {prefix!r}")
    module.load_state_dict(state, prefix)
    return read_meta(entries)


def read_meta(entries):
    meta = {}
    for k, v in entries.items():
        if k.startswith("meta."):
            arr = np.asarray(v).reshape(-1)
            meta[k[len("meta."):]] = arr.tolist() if arr.size > 1 else float(arr[0])
    return meta
