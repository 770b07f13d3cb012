"""IMOC checkpoint files.

Layout (little-endian)::

    b"IMOC" | u16 version | u32 count | entry*count

    entry = u16 name_len | name (utf-8) | u8 dtype | u32 ndim | u64 dims[ndim]
            | payload | u32 crc32(name .. payload)

dtype codes: 0 = f32, 1 = f64, 2 = u8 (used for the ``__meta__`` text entry
holding the model/ablation config).
"""

import struct
import zlib
from collections import OrderedDict

import numpy as np

from .core.arrayio import atomic_write
from .errors import ChecksumError, FormatError, MagicError, TruncatedError, VersionError

MAGIC = b"IMOC"
VERSION = 1
META_KEY = "__meta__"
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def _encode_entry(name, arr):
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    if dt not in DTYPE_CODES:
        raise FormatError(f"entry {name!r}: unsupported dtype {arr.dtype}")
    nb = name.encode()
    body = struct.pack("<H", len(nb)) + nb
    body += struct.pack("<BI", DTYPE_CODES[dt], arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    body += np.ascontiguousarray(arr, dtype=dt).tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def encode_checkpoint(state, meta=None):
    """``state``: ordered name -> array; ``meta``: optional ``dict`` of str -> scalar."""
    entries = list(state.items())
    if meta is not None:
        text = "".join(f"{k}={v}\n" for k, v in meta.items()).encode()
        entries.append((META_KEY, np.frombuffer(text, dtype=np.uint8)))
    out = [MAGIC, struct.pack("<HI", VERSION, len(entries))]
    out += [_encode_entry(k, v) for k, v in entries]
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"checkpoint truncated in {what}")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b


def decode_checkpoint(buf, verify=True):
    """Returns ``(state, meta)``; ``meta`` is a ``dict`` of strings or None.

    With ``verify`` False, checksum mismatches are ignored (for inspection of
    damaged files).
    """
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise MagicError("not an IMOC checkpoint (bad magic)")
    r = _Reader(buf)
    r.take(4, "magic")
    version, count = struct.unpack("<HI", r.take(6, "header"))
    if version != VERSION:
        raise VersionError(f"unsupported IMOC version {version}")
    state, meta = OrderedDict(), None
    for i in range(count):
        start = r.pos
        (nlen,) = struct.unpack("<H", r.take(2, f"entry {i} name length"))
        name = r.take(nlen, f"entry {i} name").decode()
        code, ndim = struct.unpack("<BI", r.take(5, f"entry {name!r} header"))
        if code not in CODE_DTYPES:
            raise FormatError(f"entry {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}Q", r.take(8 * ndim, f"entry {name!r} dims"))
        dt = CODE_DTYPES[code]
        payload = r.take(int(np.prod(dims, dtype=np.int64)) * dt.itemsize, f"entry {name!r} payload")
        body = buf[start:r.pos]
        (crc,) = struct.unpack("<I", r.take(4, f"entry {name!r} checksum"))
        if verify and zlib.crc32(body) != crc:
            raise ChecksumError(name)
        arr = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        if name == META_KEY:
            meta = dict(line.split("=", 1) for line in arr.tobytes().decode().splitlines() if line)
        else:
            state[name] = arr
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after the last entry")
    return state, meta


def save_checkpoint(params, path, meta=None):
    """Atomically write ``params`` (ModelParams or name -> array mapping)."""
    state = params.state() if hasattr(params, "state") else params
    atomic_write(path, encode_checkpoint(state, meta))


def load_checkpoint(path, verify=True):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), verify=verify)
