"""On-disk formats: JSON header plus a raw little-endian sidecar, and OBJ meshes.

A *block file* is the pair ``<stem>.json`` / ``<stem>.bin``.  The JSON holds
free-form metadata plus an ``arrays`` table giving name, dtype, shape and
byte offset of every array in the binary sidecar.  Arrays are written in the
order given, so the bytes are a pure function of the inputs.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

_DTYPES = {"f4": "<f4", "f8": "<f8", "i4": "<i4", "i8": "<i8", "u1": "|u1"}


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".bin") else p


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def save_blocks(path, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray], dtype: str = "f8") -> Path:
    """Write ``meta`` + ``arrays``; ``dtype`` is the default element type.

    Integer arrays keep an integer type; everything else is cast to ``dtype``.
    Returns the stem path.
    """
    stem = _stem(path)
    table = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype == np.uint8:
            code = "u1"
        elif np.issubdtype(arr.dtype, np.integer):
            code = "i8"
        else:
            code = dtype
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = dict(meta)
    header["arrays"] = table
    blob = b"".join(chunks)
    header["sha256"] = hashlib.sha256(blob).hexdigest()
    atomic_write_bytes(stem.with_suffix(".bin"), blob)
    atomic_write_text(stem.with_suffix(".json"), dump_json(header))
    return stem


def load_blocks(path) -> tuple[dict, dict[str, np.ndarray]]:
    stem = _stem(path)
    header = json.loads(stem.with_suffix(".json").read_text())
    blob = stem.with_suffix(".bin").read_bytes()
    arrays = {}
    for entry in header.get("arrays", []):
        dt = np.dtype(_DTYPES[entry["dtype"]])
        start = entry["offset"]
        a = np.frombuffer(blob, dtype=dt, count=entry["nbytes"] // dt.itemsize, offset=start)
        arrays[entry["name"]] = a.reshape(entry["shape"]).astype(dt.newbyteorder("="))
    return header, arrays


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_obj(path, vertices: np.ndarray, faces: np.ndarray | None = None) -> None:
    """Plain OBJ, 1-based face indices, 9 significant digits."""
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in np.asarray(vertices, dtype=np.float64)]
    if faces is not None:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            # accept v, v/vt, v/vt/vn
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)
