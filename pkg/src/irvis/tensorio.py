"""Binary tensor files and named-tensor checkpoint containers.

Single tensor layout: magic ``UNIVTNSR``, u32 rank, rank x u64 extents,
little-endian f64 payload.  A checkpoint is a container holding a u32
entry count followed by (u16 name length, utf-8 name, tensor record)
entries; entries are written in sorted-name order so identical parameter
maps serialize to identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"UNIVTNSR"


def _pack_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    head = MAGIC + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.astype("<f8").tobytes(order="C")


def _unpack_tensor(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    if buf[offset:offset + 8] != MAGIC:
        raise DataError(f"bad tensor magic at offset {offset}")
    offset += 8
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    shape = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    count = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    offset += 8 * count
    return arr.reshape(shape).astype(np.float64), offset


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(_pack_tensor(arr))


def read_tensor(path) -> np.ndarray:
    arr, _ = _unpack_tensor(Path(path).read_bytes(), 0)
    return arr


def checkpoint_bytes(named: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", len(named))]
    for name in sorted(named):
        enc = name.encode("utf-8")
        out.append(struct.pack("<H", len(enc)))
        out.append(enc)
        out.append(_pack_tensor(named[name]))
    return b"".join(out)


def write_checkpoint(path, named: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(checkpoint_bytes(named))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise DataError(f"bad checkpoint magic in {path}")
    (count,) = struct.unpack_from("<I", buf, 8)
    offset = 12
    named: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset:offset + nlen].decode("utf-8")
        offset += nlen
        named[name], offset = _unpack_tensor(buf, offset)
    return named


def write_adapter_checkpoint(path, named: dict[str, np.ndarray],
                             rank: int, alpha: float, dropout: float) -> None:
    """Adapter container: plain-text header then a checkpoint blob."""
    header = f"rank={rank}\nalpha={alpha:g}\ndropout={dropout:g}\n\n".encode("ascii")
    Path(path).write_bytes(header + checkpoint_bytes(named))


def read_adapter_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    buf = Path(path).read_bytes()
    end = buf.find(b"\n\n")
    if end < 0:
        raise DataError(f"missing adapter header in {path}")
    meta: dict[str, float] = {}
    for line in buf[:end].decode("ascii").splitlines():
        key, _, value = line.partition("=")
        meta[key] = float(value)
    if buf[end + 2:end + 10] != MAGIC:
        raise DataError(f"bad adapter payload magic in {path}")
    (count,) = struct.unpack_from("<I", buf, end + 10)
    offset = end + 14
    named: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset:offset + nlen].decode("utf-8")
        offset += nlen
        named[name], offset = _unpack_tensor(buf, offset)
    return named, meta
