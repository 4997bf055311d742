"""Binary tensor container with a plain-text header.

Layout: one magic line, one JSON header line (kind, metadata, array
directory), then the raw array payloads concatenated in directory order
(C-contiguous, little-endian). Writes go through a temp file and an
atomic rename, so a failed write never leaves a readable-but-corrupt
file, and identical content always produces identical bytes.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from advlab.errors import DataFormatError

MAGIC = b"advlab-container v1\n"


def write_container(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]):
    directory = []
    payloads = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        directory.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)}
        )
        payloads.append(arr.tobytes())
    header = json.dumps(
        {"kind": kind, "meta": meta, "arrays": directory}, sort_keys=True
    ).encode() + b"\n"
    directory_dir = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory_dir, prefix=".advlab-tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(header)
            for blob in payloads:
                f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise DataFormatError(f"{path}: not an advlab container")
        header_line = f.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: malformed header: {exc}") from exc
        for key in ("kind", "meta", "arrays"):
            if key not in header:
                raise DataFormatError(f"{path}: header missing {key!r}")
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
            blob = f.read(nbytes)
            if len(blob) != nbytes:
                raise DataFormatError(
                    f"{path}: truncated payload for array {entry['name']!r} "
                    f"(expected {nbytes} bytes, got {len(blob)})"
                )
            # Copy: frombuffer views are read-only, and callers hand these
            # straight to torch.
            arrays[entry["name"]] = (
                np.frombuffer(blob, dtype=dtype).reshape(shape).copy()
            )
        trailing = f.read(1)
        if trailing:
            raise DataFormatError(f"{path}: trailing bytes after payload")
    return header["kind"], header["meta"], arrays
