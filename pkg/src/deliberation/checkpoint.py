"""Single-file checkpoints: a JSON manifest header followed by raw float64 LE values.

Layout::

    b"DLBCKPT\\n"
    uint64 LE   header length in bytes
    header      UTF-8 JSON {"format_version", "params": [{"name", "shape"}, ...], "meta"}
    payload     each parameter's values, row-major '<f8', in manifest order
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DLBCKPT\n"
FORMAT_VERSION = 1


def dumps(named_arrays, meta=None):
    names = list(named_arrays)
    if len(set(names)) != len(names):
        raise ValueError("duplicate parameter names")
    header = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "params": [{"name": n, "shape": list(np.shape(named_arrays[n]))} for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    chunks = [MAGIC, struct.pack("<Q", len(hbytes)), hbytes]
    for n in names:
        chunks.append(np.ascontiguousarray(named_arrays[n], dtype="<f8").tobytes())
    return b"".join(chunks)


def loads(blob):
    if not blob.startswith(MAGIC):
        raise ValueError("not a checkpoint file (bad magic)")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", blob, off)
    off += 8
    header = json.loads(blob[off:off + hlen].decode())
    off += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    out = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        out[entry["name"]] = arr.astype(np.float64)
        off += 8 * count
    if off != len(blob):
        raise ValueError("trailing bytes after checkpoint payload")
    return out, header.get("meta", {})


def save(path, named_arrays, meta=None):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(dumps(named_arrays, meta))


def load(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
