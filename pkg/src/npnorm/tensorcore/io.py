"""NPNT tensor container.

Layout::

    b"NPNT" | uint32 LE header length | UTF-8 JSON header | float64 LE payload

The header is ``{"dtype": "f64", "shape": [...], "order": "row-major",
"crc32": <int>}``. The checksum covers the little-endian payload bytes, so a
payload written with the wrong byte order is rejected on load.
"""
import json
import os
import struct
import zlib

import numpy as np

MAGIC = b"NPNT"
_LE_F64 = np.dtype("<f8")


class TensorFormatError(ValueError):
    """Raised for corrupt, truncated or foreign NPNT files."""


def encode_tensor(array):
    arr = np.array(array, dtype=_LE_F64, order="C")
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to write non-finite tensor")
    payload = arr.tobytes(order="C")
    header = {
        "dtype": "f64",
        "shape": [int(s) for s in arr.shape],
        "order": "row-major",
        "crc32": zlib.crc32(payload),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload


def decode_tensor(buf):
    """Parse NPNT bytes into a float64 array, validating every field."""
    if len(buf) < 8:
        raise TensorFormatError(f"file too short for NPNT preamble: {len(buf)} bytes at offset 0")
    if buf[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {bytes(buf[:4])!r} at offset 0, expected {MAGIC!r}")
    (hlen,) = struct.unpack("<I", buf[4:8])
    if 8 + hlen > len(buf):
        raise TensorFormatError(
            f"header length {hlen} at offset 4 runs past end of file ({len(buf)} bytes)"
        )
    try:
        header = json.loads(bytes(buf[8:8 + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFormatError(f"unreadable JSON header at offset 8: {exc}") from None
    if header.get("dtype") != "f64" or header.get("order") != "row-major":
        raise TensorFormatError(f"unsupported dtype/order in header at offset 8: {header}")
    shape = header.get("shape")
    if not isinstance(shape, list) or any((not isinstance(s, int)) or s < 0 for s in shape):
        raise TensorFormatError(f"invalid shape in header at offset 8: {shape!r}")
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    start = 8 + hlen
    expected = count * 8
    payload = bytes(buf[start:])
    if len(payload) != expected:
        raise TensorFormatError(
            f"payload at offset {start} has {len(payload)} bytes, expected {expected} for shape {shape}"
        )
    crc = header.get("crc32")
    if crc is not None and zlib.crc32(payload) != crc:
        raise TensorFormatError(
            f"payload checksum mismatch at offset {start} (wrong byte order or corruption)"
        )
    arr = np.frombuffer(payload, dtype=_LE_F64).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise TensorFormatError(f"non-finite values in payload at offset {start}")
    return arr.reshape(tuple(shape))


def save_tensor(path, array):
    path = os.fspath(path)
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array))


def load_tensor(path):
    with open(os.fspath(path), "rb") as fh:
        return decode_tensor(fh.read())
