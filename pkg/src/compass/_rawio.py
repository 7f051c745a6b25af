"""Raw little-endian array files with a JSON manifest alongside."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import FormatError

DTYPES = {"float32-le": np.dtype("<f4"), "float64-le": np.dtype("<f8")}


def dtype_tag(arr: np.ndarray) -> str:
    for tag, dt in DTYPES.items():
        if arr.dtype == dt.newbyteorder("="):
            return tag
    raise TypeError(f"unsupported dtype {arr.dtype}")


def write_array(path: Path, arr: np.ndarray) -> dict:
    tag = dtype_tag(arr)
    data = np.ascontiguousarray(arr, dtype=DTYPES[tag])
    with open(path, "wb") as fh:
        fh.write(data.tobytes(order="C"))
    return {"file": path.name, "shape": list(arr.shape), "dtype": tag}


def check_entry(root: Path, entry: dict) -> int:
    """Validate one manifest entry against its payload without reading it."""
    try:
        fname = entry["file"]
        shape = [int(s) for s in entry["shape"]]
        dt = DTYPES[entry["dtype"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{root}: malformed manifest entry {entry!r}") from exc
    if any(s < 0 for s in shape):
        raise FormatError(f"{root / fname}: negative dimension in {shape}")
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    path = root / fname
    if not path.is_file():
        raise FormatError(f"{path}: missing array file (expected {expected} bytes)")
    actual = path.stat().st_size
    if actual != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for shape {tuple(shape)} "
            f"{entry['dtype']}, found {actual}"
        )
    return expected


def read_array(root: Path, entry: dict) -> np.ndarray:
    check_entry(root, entry)
    dt = DTYPES[entry["dtype"]]
    arr = np.fromfile(root / entry["file"], dtype=dt)
    return arr.reshape(entry["shape"]).astype(dt.newbyteorder("="), copy=False)


def write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def read_json(path: Path) -> dict:
    if not path.is_file():
        raise FormatError(f"{path}: manifest not found")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt manifest ({exc})") from exc
