"""Single-file tensor archive: JSON header + raw little-endian array data.

Layout:  8-byte magic | uint64 header length | UTF-8 JSON header | data blob.
The header carries format version, a component tag ("encoder", "adapters",
"decoder", "checkpoint"), free-form metadata, and per-tensor dtype/shape/
offset entries. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

MAGIC = b"LSARCH01"
FORMAT_VERSION = 1


@dataclass
class Archive:
    component: str
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def save_archive(path, tensors, component, meta=None):
    """Write named arrays to `path`. Returns number of tensors written."""
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # 0-d arrays are always contiguous
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries[name] = {
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "component": component,
        "meta": meta or {},
        "tensors": entries,
    }
    header_raw = json.dumps(header, sort_keys=True).encode("utf-8")

    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(len(header_raw).to_bytes(8, "little"))
            f.write(header_raw)
            for raw in blobs:
                f.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(entries)


def load_archive(path) -> Archive:
    try:
        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != MAGIC:
                raise CheckpointError(f"{path}: not a tensor archive (bad magic)")
            header_len = int.from_bytes(f.read(8), "little")
            try:
                header = json.loads(f.read(header_len).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise CheckpointError(f"{path}: corrupt archive header: {e}") from e
            if header.get("format_version") != FORMAT_VERSION:
                raise CheckpointError(
                    f"{path}: unsupported format version {header.get('format_version')}"
                )
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read archive {path}: {e}") from e

    tensors = {}
    for name, entry in header["tensors"].items():
        start, nbytes = entry["offset"], entry["nbytes"]
        raw = data[start : start + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{path}: truncated data for tensor '{name}'")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        tensors[name] = arr.reshape(entry["shape"]).copy()
    return Archive(component=header["component"], tensors=tensors, meta=header["meta"])
