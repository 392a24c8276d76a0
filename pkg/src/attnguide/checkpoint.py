"""Binary checkpoint files.

Layout: magic ``ATTH``, u32 format version, then per-parameter records
(u32 name length + UTF-8 name, u32 rank + u32 dims, raw little-endian f32
data) until EOF. Version 2 inserts one length-prefixed UTF-8 JSON metadata
blob between the version field and the records; version 1 has none.
Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"ATTH"
VERSION_PLAIN = 1
VERSION_META = 2


def _write_record(fh, name, arr):
    enc = name.encode("utf-8")
    fh.write(struct.pack("<I", len(enc)))
    fh.write(enc)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<f4", copy=False).tobytes())


def _read_exact(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint file: {path}")
    return buf


def save_checkpoint(path, params, metadata=None):
    """Write named float32 arrays; optional JSON-serializable metadata."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        if metadata is None:
            fh.write(struct.pack("<I", VERSION_PLAIN))
        else:
            fh.write(struct.pack("<I", VERSION_META))
            blob = json.dumps(metadata, sort_keys=True).encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
        for name, arr in params.items():
            _write_record(fh, name, np.asarray(arr, dtype=np.float32))


def load_checkpoint(path):
    """Read back (params dict, metadata-or-None). Bit-exact inverse of save."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, path) != MAGIC:
            raise CheckpointError(f"not a checkpoint file (bad magic): {path}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path))
        if version not in (VERSION_PLAIN, VERSION_META):
            raise CheckpointError(
                f"unsupported checkpoint version {version} in {path}")
        metadata = None
        if version == VERSION_META:
            (blen,) = struct.unpack("<I", _read_exact(fh, 4, path))
            metadata = json.loads(_read_exact(fh, blen, path).decode("utf-8"))
        params = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError(f"truncated checkpoint file: {path}")
            (nlen,) = struct.unpack("<I", head)
            name = _read_exact(fh, nlen, path).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, path))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, path))
            count = int(np.prod(shape)) if rank else 1
            raw = _read_exact(fh, 4 * count, path)
            params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        return params, metadata
