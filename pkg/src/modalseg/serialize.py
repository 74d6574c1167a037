"""Binary tensor container (``.eqt``) and name->tensor bundles.

Layout, all little-endian::

    b"EQTS" | version u16 | dtype code u8 | rank u8 | extents u64 * rank | raw values
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EQTS"
VERSION = 1

DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i4"): 3,
    np.dtype("<i8"): 4,
    np.dtype("u1"): 5,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


class ContainerError(ValueError):
    """Malformed, truncated, or version-incompatible container."""


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dtype not in DTYPE_CODES:
        raise ContainerError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ContainerError("rank too large")
    header = MAGIC + struct.pack("<HBB", VERSION, DTYPE_CODES[dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def decode(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise ContainerError("bad magic bytes")
    version, code, rank = struct.unpack_from("<HBB", blob, 4)
    if version != VERSION:
        raise ContainerError(f"container version {version} unsupported (expected {VERSION})")
    if code not in CODE_DTYPES:
        raise ContainerError(f"unknown dtype code {code}")
    offset = 8 + 8 * rank
    if len(blob) < offset:
        raise ContainerError("truncated header")
    shape = struct.unpack_from(f"<{rank}Q", blob, 8)
    dtype = CODE_DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise ContainerError(f"payload is {len(blob) - offset} bytes, expected {expected}")
    return np.frombuffer(blob, dtype=dtype, offset=offset).reshape(shape).copy()


def save_tensor(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load_tensor(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def save_bundle(directory, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write a manifest listing name->file entries plus one container per tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for index, (name, array) in enumerate(tensors.items()):
        filename = f"{index:04d}.eqt"
        save_tensor(directory / filename, array)
        entries[name] = filename
    manifest = {"format_version": VERSION, "tensors": entries, "meta": meta or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_bundle(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format_version") != VERSION:
        raise ContainerError(f"bundle format version {manifest.get('format_version')} unsupported")
    # file names carry the write order; the manifest itself is key-sorted
    ordered = sorted(manifest["tensors"].items(), key=lambda item: item[1])
    tensors = {name: load_tensor(directory / filename) for name, filename in ordered}
    return tensors, manifest.get("meta", {})
