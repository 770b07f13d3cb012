"""IMOA portable array files.

Layout (little-endian)::

    b"IMOA" | u8 version | u8 dtype (0=f32, 1=f64) | u32 ndim | u64 dims[ndim] | payload
"""

import os
import struct
import tempfile

import numpy as np

from ..errors import FormatError, MagicError, TruncatedError, VersionError

MAGIC = b"IMOA"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def atomic_write(path, payload):
    """Write bytes to ``path`` via a temp file and rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_array(arr):
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in DTYPE_CODES:
        raise FormatError(f"IMOA stores f32/f64 only, got {arr.dtype}")
    head = MAGIC + struct.pack("<BBI", VERSION, DTYPE_CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_array(buf):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise MagicError("not an IMOA file (bad magic)")
    if len(buf) < 10:
        raise TruncatedError("IMOA header truncated")
    version, code, ndim = struct.unpack_from("<BBI", buf, 4)
    if version != VERSION:
        raise VersionError(f"unsupported IMOA version {version}")
    if code not in CODE_DTYPES:
        raise FormatError(f"unknown IMOA dtype code {code}")
    off = 10 + 8 * ndim
    if len(buf) < off:
        raise TruncatedError("IMOA dims truncated")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 10)
    dt = CODE_DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) < off + nbytes:
        raise TruncatedError("IMOA payload truncated")
    return np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(dims).astype(dt.newbyteorder("="))


def save_array(path, arr):
    atomic_write(path, encode_array(arr))


def load_array(path):
    with open(path, "rb") as fh:
        return decode_array(fh.read())
