"""Binary weight checkpoints.

Layout (little-endian)::

    b"PSFW"  u32 version  u32 count
    count x [ u16 name_len | name (UTF-8) | 4 x u32 shape | float32 data ]
"""

import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"PSFW"
VERSION = 1


def encode_tensors(named):
    """Serialise an ordered mapping of name -> 4-D float32 array."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(named))]
    for name, arr in named.items():
        arr = np.asarray(arr, dtype="<f4")
        if arr.ndim != 4:
            raise CheckpointError(f"tensor {name!r} is not 4-D (shape {arr.shape})")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]!r}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<4I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_tensors(buf):
    """Parse checkpoint bytes; raises CheckpointError (with offset) on any defect."""
    buf = bytes(buf)
    if len(buf) < 12:
        raise CheckpointError(f"truncated header ({len(buf)} bytes)", offset=len(buf))
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", offset=0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}", offset=4)
    pos = 12
    out = {}
    for index in range(count):
        if pos + 2 > len(buf):
            raise CheckpointError(f"truncated before tensor {index} name length", offset=pos)
        (name_len,) = struct.unpack_from("<H", buf, pos)
        if name_len == 0 or pos + 2 + name_len + 16 > len(buf):
            raise CheckpointError(f"corrupted name length {name_len} for tensor {index}", offset=pos)
        try:
            name = buf[pos + 2 : pos + 2 + name_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"tensor {index} name is not valid UTF-8", offset=pos + 2) from exc
        pos += 2 + name_len
        shape = struct.unpack_from("<4I", buf, pos)
        if min(shape) < 1:
            raise CheckpointError(f"tensor {name!r} has an empty dimension {shape}", offset=pos)
        pos += 16
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise CheckpointError(f"truncated data for tensor {name!r}: need {nbytes} bytes, have {len(buf) - pos}", offset=pos)
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}", offset=pos)
        out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).astype(np.float32).reshape(shape)
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after {count} tensors", offset=pos)
    return out
