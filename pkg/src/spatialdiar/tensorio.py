"""Binary tensor files used at every stage boundary.

Layout: 8-byte magic ``SDTENSR1``, a little-endian uint32 giving the length
of a JSON header, the header itself ({"dtype": "f32"|"c64", "shape": [...],
"order": "row-major"}), then the raw little-endian payload. Complex values
are stored as interleaved (re, im) float32 pairs.
"""

import json
import struct

import numpy as np

from .errors import InputError

MAGIC = b"SDTENSR1"

_DTYPES = {
    "f32": np.dtype("<f4"),
    "c64": np.dtype("<c8"),
}


def write_tensor(path, array) -> None:
    """Write a real or complex numpy array to ``path``.

    Real input is stored as f32, complex input as c64; higher precision is
    narrowed on write.
    """
    array = np.asarray(array)
    if np.iscomplexobj(array):
        dtype_tag = "c64"
    else:
        dtype_tag = "f32"
    payload = np.ascontiguousarray(array.astype(_DTYPES[dtype_tag]))
    header = json.dumps(
        {"dtype": dtype_tag, "shape": list(array.shape), "order": "row-major"},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a tensor file, returning float32 or complex64 data."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise InputError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise InputError(f"{path}: truncated header length")
        (header_len,) = struct.unpack("<I", raw_len)
        raw_header = fh.read(header_len)
        if len(raw_header) != header_len:
            raise InputError(f"{path}: truncated header")
        try:
            header = json.loads(raw_header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise InputError(f"{path}: invalid JSON header: {exc}") from exc
        dtype_tag = header.get("dtype")
        if dtype_tag not in _DTYPES:
            raise InputError(f"{path}: unsupported dtype {dtype_tag!r}")
        if header.get("order") != "row-major":
            raise InputError(f"{path}: unsupported order {header.get('order')!r}")
        shape = tuple(header.get("shape", ()))
        dtype = _DTYPES[dtype_tag]
        count = int(np.prod(shape)) if shape else 1
        payload = fh.read()
    expected = count * dtype.itemsize
    if len(payload) != expected:
        raise InputError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape)
