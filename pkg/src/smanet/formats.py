"""Little-endian binary containers and the dataset manifest.

SMAT tensor layout::

    b"SMAT" | version u8 (1) | dtype u8 (0 = f32) | rank u8 | 3 zero bytes
    | rank x u32 extents | row-major f32 payload

SMCK checkpoint layout::

    b"SMCK" | version u8 (1) | u32 entry count
    | per entry: u16 name length, UTF-8 name, embedded SMAT tensor
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SMAT_MAGIC = b"SMAT"
SMCK_MAGIC = b"SMCK"
VERSION = 1
DTYPE_F32 = 0


class FormatError(ValueError):
    """A file does not follow the SMAT/SMCK/manifest layout."""


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if not 1 <= arr.ndim <= 255:
        raise FormatError(f"cannot encode rank {arr.ndim}")
    header = SMAT_MAGIC + struct.pack("<BBB3x", VERSION, DTYPE_F32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + arr.astype("<f4").tobytes(order="C")


def _read_exact(stream, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(stream) -> np.ndarray:
    head = _read_exact(stream, 10)
    if head[:4] != SMAT_MAGIC:
        raise FormatError(f"bad tensor magic {head[:4]!r}")
    version, dtype, rank = struct.unpack("<BBB", head[4:7])
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported tensor dtype code {dtype}")
    if head[7:10] != b"\0\0\0":
        raise FormatError("reserved header bytes are not zero")
    dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank))
    count = int(np.prod(dims))
    payload = _read_exact(stream, 4 * count)
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def decode_tensor(blob: bytes) -> np.ndarray:
    stream = io.BytesIO(blob)
    arr = read_tensor(stream)
    if stream.read(1):
        raise FormatError("trailing bytes after tensor payload")
    return arr


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def encode_checkpoint(entries: dict[str, np.ndarray]) -> bytes:
    parts = [SMCK_MAGIC, struct.pack("<BI", VERSION, len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"entry name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(encode_tensor(arr))
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    stream = io.BytesIO(blob)
    magic = _read_exact(stream, 4)
    if magic != SMCK_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    version, count = struct.unpack("<BI", _read_exact(stream, 5))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    entries = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _read_exact(stream, 2))
        name = _read_exact(stream, n).decode("utf-8")
        if name in entries:
            raise FormatError(f"duplicate checkpoint entry {name}")
        entries[name] = read_tensor(stream)
    if stream.read(1):
        raise FormatError("trailing bytes after last checkpoint entry")
    return entries


def save_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(entries))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------- manifest

MANIFEST_HEADER = ("sequence_path", "label", "eye_id")


@dataclass(frozen=True)
class ManifestEntry:
    sequence_path: str
    label: int
    eye_id: int


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for e in entries:
            writer.writerow((e.sequence_path, e.label, e.eye_id))


def read_manifest(path) -> list[ManifestEntry]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != MANIFEST_HEADER:
        raise FormatError(f"{path}: expected header {','.join(MANIFEST_HEADER)}")
    entries = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        try:
            entries.append(ManifestEntry(row[0], int(row[1]), int(row[2])))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return entries
