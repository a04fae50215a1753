"""Binary container: a JSON header plus named float32 tensors.

Layout, all little-endian:
  magic "UCAM" | format version u32 | header length u32 | header JSON bytes |
  repeated tensor records: name length u32 | name bytes | rank u32 |
  one u32 per dimension | raw float32 data.

Every read is exact-length; a file that ends inside any field raises a
truncation error distinct from a malformed-header error.
"""

from __future__ import annotations

import json
import struct
from typing import Iterable

import numpy as np

from .errors import FileFormatError, TruncatedFileError

MAGIC = b"UCAM"
VERSION = 1


def _read_exact(f, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise TruncatedFileError(f"file ends inside {what}")
    return b


def write_container(path, header: dict,
                    tensors: Iterable[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        blob = json.dumps(header, sort_keys=True).encode()
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, arr in tensors:
            nb = name.encode()
            a = np.ascontiguousarray(arr, dtype="<f4")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", a.ndim))
            for dim in a.shape:
                f.write(struct.pack("<I", dim))
            f.write(a.tobytes())


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MAGIC:
            raise FileFormatError(
                f"bad magic {magic!r}; expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "format version"))
        if version != VERSION:
            raise FileFormatError(
                f"unsupported format version {version}; this build reads "
                f"version {VERSION}")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        raw = _read_exact(f, hlen, "header")
        try:
            header = json.loads(raw.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FileFormatError(f"unreadable header: {e}") from None

        tensors: dict[str, np.ndarray] = {}
        while True:
            lead = f.read(4)
            if not lead:
                break
            if len(lead) != 4:
                raise TruncatedFileError("file ends inside a tensor record")
            (nlen,) = struct.unpack("<I", lead)
            name = _read_exact(f, nlen, "tensor name").decode()
            (rank,) = struct.unpack(
                "<I", _read_exact(f, 4, f"rank of tensor '{name}'"))
            dims = struct.unpack(
                f"<{rank}I",
                _read_exact(f, 4 * rank, f"dims of tensor '{name}'"))
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = _read_exact(f, 4 * count, f"data of tensor '{name}'")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(
                dims).astype(np.float32)
        return header, tensors
