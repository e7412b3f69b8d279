"""Single-file binary bundles: a magic tag, a JSON header, then raw arrays.

Layout: magic (5 bytes) | uint32 little-endian header length | header JSON
(utf-8) | concatenated C-order array bytes in header-declared order.
"""

from __future__ import annotations

import json
import struct

import numpy as np


def write_bundle(path: str, magic: bytes, meta: dict,
                 arrays: dict[str, np.ndarray]) -> None:
    if len(magic) != 5:
        raise ValueError(f"magic must be 5 bytes, got {magic!r}")
    header = {
        "meta": meta,
        "arrays": [
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)}
            for name, arr in arrays.items()
        ],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_bundle(path: str, magic: bytes):
    with open(path, "rb") as fh:
        got = fh.read(5)
        if got != magic:
            raise ValueError(
                f"{path}: bad magic {got!r}, expected {magic!r}"
            )
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for spec in header["arrays"]:
            dtype = np.dtype(spec["dtype"])
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise ValueError(f"{path}: truncated array {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise ValueError(f"{path}: trailing bytes after declared arrays")
    return header["meta"], arrays
