"""Regenerate the binary fixtures: ``python tests/fixtures/make_fixtures.py``.

``bigendian.npnt`` is a valid little-endian NPNT file whose payload has been
byte-swapped after the checksum was computed, i.e. what a writer that forgot
to convert to little endian would produce.
"""
import pathlib
import struct

import numpy as np

from npnorm.tensorcore.io import encode_tensor

HERE = pathlib.Path(__file__).parent


def bigendian():
    buf = encode_tensor(np.arange(1.0, 7.0).reshape(2, 3))
    (hlen,) = struct.unpack("<I", buf[4:8])
    start = 8 + hlen
    payload = np.frombuffer(buf[start:], dtype="<f8").astype(">f8").tobytes()
    return buf[:start] + payload


if __name__ == "__main__":
    (HERE / "bigendian.npnt").write_bytes(bigendian())
