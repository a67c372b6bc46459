"""Binary tensor files.

A single tensor ("TNSR"): magic ``TNSR``, u32 version (1), u8 ndim, ndim x u64
extents, then the row-major little-endian float64 payload.

A bundle groups named tensors behind a JSON header; checkpoints and PCA models
use it.  Layout: magic ``DARNBNDL``, u32 version, u32 header length, UTF-8
JSON header, u32 tensor count, then per tensor a u16 name length, the UTF-8
name and a TNSR blob.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .errors import DatasetIOError

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1
BUNDLE_MAGIC = b"DARNBNDL"
BUNDLE_VERSION = 1


def write_tensor(stream: BinaryIO, array) -> None:
    arr = np.asarray(array, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
    if arr.ndim > 255:
        raise ValueError("TNSR supports at most 255 axes")
    stream.write(TNSR_MAGIC)
    stream.write(struct.pack("<IB", TNSR_VERSION, arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    stream.write(arr.tobytes(order="C"))


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(stream: BinaryIO) -> np.ndarray:
    magic = _read_exact(stream, 4, "magic")
    if magic != TNSR_MAGIC:
        raise ValueError(f"bad TNSR magic {magic!r}")
    version, ndim = struct.unpack("<IB", _read_exact(stream, 5, "header"))
    if version != TNSR_VERSION:
        raise ValueError(f"unsupported TNSR version {version}")
    shape = struct.unpack(f"<{ndim}Q", _read_exact(stream, 8 * ndim, "extents"))
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    payload = _read_exact(stream, 8 * count, "payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def save_tensor(path, array) -> None:
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            write_tensor(fh, array)
    except OSError as exc:
        raise DatasetIOError(f"{path}: {exc.strerror or exc}") from exc


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return read_tensor(fh)
    except FileNotFoundError as exc:
        raise DatasetIOError(f"{path}: file not found") from exc
    except ValueError as exc:
        raise DatasetIOError(f"{path}: corrupt tensor file ({exc})") from exc


def tensor_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def save_bundle(path, header: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(BUNDLE_MAGIC)
            fh.write(struct.pack("<II", BUNDLE_VERSION, len(head)))
            fh.write(head)
            fh.write(struct.pack("<I", len(tensors)))
            for name, arr in tensors.items():
                raw = name.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                write_tensor(fh, arr)
    except OSError as exc:
        raise DatasetIOError(f"{path}: {exc.strerror or exc}") from exc


def load_bundle(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            if _read_exact(fh, 8, "magic") != BUNDLE_MAGIC:
                raise ValueError("bad bundle magic")
            version, head_len = struct.unpack("<II", _read_exact(fh, 8, "header"))
            if version != BUNDLE_VERSION:
                raise ValueError(f"unsupported bundle version {version}")
            header = json.loads(_read_exact(fh, head_len, "json header").decode("utf-8"))
            (count,) = struct.unpack("<I", _read_exact(fh, 4, "count"))
            tensors = {}
            for _ in range(count):
                (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
                name = _read_exact(fh, name_len, "name").decode("utf-8")
                tensors[name] = read_tensor(fh)
    except FileNotFoundError as exc:
        raise DatasetIOError(f"{path}: file not found") from exc
    except (ValueError, json.JSONDecodeError, struct.error) as exc:
        raise DatasetIOError(f"{path}: corrupt bundle ({exc})") from exc
    return header, tensors
