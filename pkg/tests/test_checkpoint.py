import struct

import numpy as np
import pytest

from psfcn.checkpoint import MAGIC, decode_tensors, encode_tensors
from psfcn.errors import CheckpointError


def _tensors(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "extractor.conv1.weight": rng.standard_normal((4, 6, 3, 3)).astype(np.float32),
        "extractor.conv1.bias": rng.standard_normal((1, 4, 1, 1)).astype(np.float32),
        "ünïcode.name": np.arange(6, dtype=np.float32).reshape(1, 1, 2, 3),
    }


def test_round_trip_is_exact_and_ordered():
    t = _tensors()
    out = decode_tensors(encode_tensors(t))
    assert list(out) == list(t)
    for k in t:
        assert out[k].dtype == np.float32
        assert np.array_equal(out[k], t[k])


def test_layout_header():
    blob = encode_tensors({"a": np.ones((1, 1, 1, 2), np.float32)})
    assert blob[:4] == MAGIC
    assert struct.unpack_from("<II", blob, 4) == (1, 1)
    # header 12 + name len 2 + name 1 + dims 16 + data 8
    assert len(blob) == 12 + 2 + 1 + 16 + 8


def test_every_truncation_is_a_structured_error():
    blob = encode_tensors(_tensors())
    for cut in range(len(blob)):
        with pytest.raises(CheckpointError) as info:
            decode_tensors(blob[:cut])
        assert info.value.offset is not None


def test_specific_defects():
    blob = bytearray(encode_tensors(_tensors()))
    with pytest.raises(CheckpointError, match="bad magic"):
        decode_tensors(b"XXXX" + blob[4:])
    bad_version = bytearray(blob)
    struct.pack_into("<I", bad_version, 4, 9)
    with pytest.raises(CheckpointError, match="version"):
        decode_tensors(bad_version)
    with pytest.raises(CheckpointError, match="trailing"):
        decode_tensors(bytes(blob) + b"\0")
    bad_name = bytearray(blob)
    struct.pack_into("<H", bad_name, 12, 0xFFFF)
    with pytest.raises(CheckpointError, match="name length"):
        decode_tensors(bad_name)
    bad_utf8 = bytearray(blob)
    bad_utf8[14] = 0xFF
    with pytest.raises(CheckpointError, match="UTF-8"):
        decode_tensors(bad_utf8)
    dup = encode_tensors({"a": np.ones((1, 1, 1, 1), np.float32)})
    body = dup[12:]
    doubled = MAGIC + struct.pack("<II", 1, 2) + body + body
    with pytest.raises(CheckpointError, match="duplicate"):
        decode_tensors(doubled)
    zero_dim = bytearray(dup)
    struct.pack_into("<I", zero_dim, 12 + 2 + 1, 0)
    with pytest.raises(CheckpointError, match="empty dimension"):
        decode_tensors(zero_dim)


def test_random_corruption_never_escapes_as_another_exception():
    blob = encode_tensors(_tensors(1))
    rng = np.random.default_rng(0)
    for _ in range(500):
        b = bytearray(blob)
        for pos in rng.integers(0, len(b), size=rng.integers(1, 4)):
            b[pos] = int(rng.integers(0, 256))
        try:
            out = decode_tensors(b)
        except CheckpointError:
            continue
        assert all(v.ndim == 4 for v in out.values())


def test_encoder_rejects_non_4d():
    with pytest.raises(CheckpointError):
        encode_tensors({"a": np.ones((2, 2), np.float32)})
