"""Named-array checkpoint container with an integrity checksum.

Layout (magic ``IRGC``): version, a JSON metadata blob, then each array as
name, dtype code, shape, and raw little-endian bytes, with a trailing
8-byte checksum over everything before it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"IRGC"
VERSION = 1

_DTYPES = {0: "<f4", 1: "<i8", 2: "<f8"}
_CODES = {np.dtype("<f4"): 0, np.dtype("<i8"): 1, np.dtype("<f8"): 2}


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray],
                meta: dict) -> None:
    out: list[bytes] = [MAGIC, struct.pack("<H", VERSION)]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)
    out.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = arrays[name]
        code = _CODES[np.dtype(arr.dtype).newbyteorder("<")]
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<BB", code, data.ndim))
        out.append(struct.pack(f"<{data.ndim}I", *data.shape))
        out.append(data.tobytes())
    body = b"".join(out)
    digest = hashlib.blake2b(body, digest_size=8).digest()
    Path(path).write_bytes(body + digest)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if len(buf) < 14 or buf[:4] != MAGIC:
        raise ValueError("not a checkpoint file")
    body, digest = buf[:-8], buf[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise ValueError("checkpoint checksum mismatch")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 6
    (n_meta,) = struct.unpack_from("<I", buf, off)
    off += 4
    meta = json.loads(buf[off:off + n_meta].decode("utf-8"))
    off += n_meta
    (n_arrays,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        (n_name,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + n_name].decode("utf-8")
        off += n_name
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype=_DTYPES[code], count=count, offset=off)
        off += arr.nbytes
        arrays[name] = arr.reshape(shape).copy()
    if off != len(body):
        raise ValueError("trailing bytes in checkpoint")
    return arrays, meta
