"""Flat binary tensor container.

Layout (all little-endian)::

    bytes 0..3   magic b"CITB"
    byte  4      dtype code (1 = float64)
    byte  5      rank r
    bytes 6..7   reserved (zero)
    r x uint32   dims
    payload      prod(dims) float64 values, C order

The header is therefore 8 + 4r bytes (16 for a matrix).
"""

from __future__ import annotations

import json
import os
import shutil
import struct
from pathlib import Path

import numpy as np

from .autodiff import ParameterSet
from .errors import FormatError

MAGIC = b"CITB"
DTYPE_F64 = 1
PARAMS_MAGIC = "CITPARAMS"
PARAMS_VERSION = 1


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype="<f8")  # tobytes() below is C order; keeps rank 0
    if array.ndim > 255:
        raise FormatError("rank above 255 is not representable")
    head = MAGIC + struct.pack("<BBH", DTYPE_F64, array.ndim, 0)
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    return head + dims + array.tobytes(order="C")


def decode_tensor(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 8:
        raise FormatError(f"{source}: truncated header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {blob[:4]!r}")
    dtype, rank, reserved = struct.unpack("<BBH", blob[4:8])
    if dtype != DTYPE_F64:
        raise FormatError(f"{source}: unsupported dtype code {dtype}")
    if reserved != 0:
        raise FormatError(f"{source}: reserved bytes are {reserved}, expected 0")
    head_len = 8 + 4 * rank
    if len(blob) < head_len:
        raise FormatError(f"{source}: truncated dims (rank {rank})")
    dims = struct.unpack(f"<{rank}I", blob[8:head_len])
    expected = int(np.prod(dims, dtype=np.int64)) * 8
    payload = len(blob) - head_len
    if payload != expected:
        raise FormatError(f"{source}: payload {payload} bytes, dims {dims} need {expected}")
    return np.frombuffer(blob, dtype="<f8", offset=head_len).reshape(dims).astype(np.float64)


def write_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_tensor(array))
    os.replace(tmp, path)


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return decode_tensor(blob, str(path))


def save_params(params: ParameterSet, path: str | os.PathLike, meta: dict | None = None) -> Path:
    """Directory with manifest.json and one tensor file per parameter; replaced atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    entries = []
    for i, (name, t) in enumerate(params.items()):
        fname = f"t{i:04d}.citb"
        write_tensor(tmp / fname, t.data)
        entries.append({"name": name, "file": fname, "shape": list(t.shape)})
    manifest = {"magic": PARAMS_MAGIC, "version": PARAMS_VERSION, "frozen": params.frozen,
                "meta": meta or {}, "tensors": entries}
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1))
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def load_params(path: str | os.PathLike) -> tuple[ParameterSet, dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}/manifest.json: {exc}") from exc
    if manifest.get("magic") != PARAMS_MAGIC:
        raise FormatError(f"{path}: field 'magic' is {manifest.get('magic')!r}, expected {PARAMS_MAGIC!r}")
    if manifest.get("version") != PARAMS_VERSION:
        raise FormatError(f"{path}: field 'version' is {manifest.get('version')!r}, expected {PARAMS_VERSION}")
    params = ParameterSet()
    for entry in manifest["tensors"]:
        arr = read_tensor(path / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise FormatError(f"{path}/{entry['file']}: field 'shape' {entry['shape']} != stored {list(arr.shape)}")
        params.add(entry["name"], arr)
    if manifest.get("frozen"):
        params.freeze()
    return params, manifest.get("meta", {})
