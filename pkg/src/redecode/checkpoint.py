"""Binary checkpoint format.

Layout (little-endian)::

    b"RDEC" | u16 version
    u32 n | n x (u32 len, key utf-8, u32 len, value utf-8)      config block
    u32 n | n x tensor record                                    parameters
    u32 n | n x tensor record                                    optimizer
    u64 step

A tensor record is ``u32 len, name utf-8, u32 rank, rank x u32 dims,
prod(dims) x f64``.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"RDEC"
VERSION = 1


class CheckpointError(Exception):
    pass


class NotACheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class RawCheckpoint:
    config: dict[str, str]
    tensors: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    step: int


def _w_str(buf: io.BytesIO, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _w_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    _w_str(buf, name)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def encode_checkpoint(raw: RawCheckpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(struct.pack("<I", len(raw.config)))
    for k, v in raw.config.items():
        _w_str(buf, k)
        _w_str(buf, v)
    for section in (raw.tensors, raw.optimizer):
        buf.write(struct.pack("<I", len(section)))
        for name, arr in section.items():
            _w_tensor(buf, name, arr)
    buf.write(struct.pack("<Q", raw.step))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.string()
        (rank,) = self.unpack("<I")
        dims = self.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)
        return name, values.reshape(dims)


def decode_checkpoint(data: bytes) -> RawCheckpoint:
    if data[:4] != MAGIC:
        raise NotACheckpointError("not a checkpoint: bad magic header")
    r = _Reader(data)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {VERSION}")
    (n,) = r.unpack("<I")
    config = {}
    for _ in range(n):
        k = r.string()
        config[k] = r.string()
    sections = []
    for _ in range(2):
        (n,) = r.unpack("<I")
        sec = {}
        for _ in range(n):
            name, arr = r.tensor()
            sec[name] = arr
        sections.append(sec)
    (step,) = r.unpack("<Q")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    return RawCheckpoint(config, sections[0], sections[1], step)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
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


def write_raw(path, raw: RawCheckpoint) -> None:
    atomic_write_bytes(path, encode_checkpoint(raw))


def read_raw(path) -> RawCheckpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
