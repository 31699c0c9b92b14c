#!/usr/bin/env python3
"""
Binary container shared by KG snapshots and model checkpoints

Layout:
    KGCAL-<KIND> <version>\\n
    <manifest as one line of JSON>\\n
    <little-endian arrays, concatenated in manifest order>
"""

import json
import logging
from typing import Any, Dict, List, Tuple

import numpy as np

from errors import FormatError, ShapeMismatchError, VersionError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DTYPES = {"int32": "<i4", "float32": "<f4"}


def write_container(path: str, kind: str, manifest: Dict[str, Any], arrays: List[Tuple[str, np.ndarray]]) -> None:
    """Write manifest plus arrays; identical inputs give identical bytes"""
    table = []
    blobs = []
    for name, array in arrays:
        dtype = "float32" if np.issubdtype(array.dtype, np.floating) else "int32"
        data = np.ascontiguousarray(array, dtype=DTYPES[dtype])
        table.append({"name": name, "dtype": dtype, "shape": list(data.shape)})
        blobs.append(data.tobytes(order="C"))

    manifest = dict(manifest)
    manifest["arrays"] = table
    header = f"KGCAL-{kind.upper()} {FORMAT_VERSION}\n".encode("ascii")
    body = (json.dumps(manifest, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")

    with open(path, "wb") as handle:
        handle.write(header)
        handle.write(body)
        for blob in blobs:
            handle.write(blob)


def read_container(path: str, kind: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Read a container written by write_container, checking header and sizes"""
    with open(path, "rb") as handle:
        header = handle.readline()
        expected = f"KGCAL-{kind.upper()} ".encode("ascii")
        if not header.startswith(expected) or not header.endswith(b"\n"):
            raise FormatError(f"{path}: not a {kind} file (bad header {header[:32]!r})")
        try:
            version = int(header[len(expected):].strip())
        except ValueError:
            raise FormatError(f"{path}: unreadable format version in header {header!r}")
        if version != FORMAT_VERSION:
            raise VersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")

        try:
            manifest = json.loads(handle.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: corrupted manifest ({exc})")
        blob = handle.read()

    arrays: Dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest.get("arrays", []):
        dtype = np.dtype(DTYPES[entry["dtype"]])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        size = count * dtype.itemsize
        if offset + size > len(blob):
            raise ShapeMismatchError(
                f"{path}: array '{entry['name']}' declares shape {list(shape)} but the blob ends early"
            )
        arrays[entry["name"]] = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        offset += size
    if offset != len(blob):
        raise ShapeMismatchError(f"{path}: {len(blob) - offset} trailing bytes after declared arrays")
    return manifest, arrays
