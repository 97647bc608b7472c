"""Versioned binary container for model parameters and optimizer state.

Byte layout (all integers little-endian):

    offset  size  field
    0       8     magic ``b"FXPPOBIN"``
    8       4     format version, uint32 (currently 1)
    12      4     meta_len, uint32
    16      m     meta: UTF-8 JSON object (free-form run metadata)
    ..      4     block_count, uint32
    per block:
            2     name_len, uint16
            n     name, UTF-8
            1     ndim, uint8
            4*d   dims, uint32 each
            8*k   values, float64 little-endian, row-major (k = prod dims)

The same container stores policy networks, autoencoders (``kind`` in the
meta says which) and fitted K-Means models. Optimizer moments ride along
as blocks named ``adam.m.<param>`` / ``adam.v.<param>``.
"""

import hashlib
import json
import struct

import numpy as np

MAGIC = b"FXPPOBIN"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_container(path, meta, blocks):
    """Write named float64 arrays plus a JSON meta dict to ``path``."""
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f8").tobytes())


def load_container(path):
    """Read a container; returns (meta, blocks) with insertion order kept."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a fxppo container")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    (meta_len,) = struct.unpack_from("<I", data, 12)
    pos = 16
    try:
        meta = json.loads(data[pos : pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata") from exc
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    blocks = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n_values = int(np.prod(dims)) if ndim else 1
        end = pos + 8 * n_values
        if end > len(data):
            raise CheckpointError(f"{path}: truncated block {name!r}")
        arr = np.frombuffer(data[pos:end], dtype="<f8").astype(np.float64)
        blocks[name] = arr.reshape(dims)
        pos = end
    return meta, blocks


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
