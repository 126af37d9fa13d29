"""Activation stream files: the ``.kvcr`` wire format and batched reading.

One file holds the per-token feature rows of a single (layer, kind) pair,
heads concatenated in head order. The layout is fixed and little-endian:

    offset  0: magic "KVCR"
    offset  4: version        u32 = 1
    offset  8: layer_index    u32
    offset 12: feature_dim    u32
    offset 16: kind           u8 (0 = key, 1 = value)
    offset 17: dtype          u8 (0 = f32, the only value)
    offset 18: reserved       u16 = 0
    offset 20: token_count    u64
    offset 28: reserved       u32 = 0
    offset 32: payload, token_count * feature_dim f32, row-major

Payloads are stored as binary32; readers upcast to float64. Reading is
batched so memory stays O(batch_size * feature_dim) regardless of how many
tokens the file holds.
"""

from __future__ import annotations

import enum
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import FormatError, ShapeError

MAGIC = b"KVCR"
VERSION = 1
HEADER_SIZE = 32
_HEADER_FMT = "<4sIIIBBHQI"
DTYPE_F32 = 0
DEFAULT_BATCH_SIZE = 4096


class Kind(enum.IntEnum):
    KEY = 0
    VALUE = 1

    @property
    def label(self) -> str:
        return "key" if self is Kind.KEY else "value"

    @classmethod
    def from_label(cls, label: str) -> "Kind":
        try:
            return {"key": cls.KEY, "value": cls.VALUE}[label.lower()]
        except KeyError:
            raise ValueError(f"unknown kind {label!r}, expected 'key' or 'value'")


def stream_filename(layer_index: int, kind: Kind) -> str:
    """Canonical file name for one (layer, kind) stream."""
    return f"layer{layer_index}_{Kind(kind).label}.kvcr"


@dataclass(frozen=True)
class StreamHeader:
    layer_index: int
    feature_dim: int
    kind: Kind
    token_count: int
    version: int = VERSION
    dtype: int = DTYPE_F32

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.token_count < 0:
            raise ValueError(f"token_count must be >= 0, got {self.token_count}")
        object.__setattr__(self, "kind", Kind(self.kind))

    def pack(self) -> bytes:
        return struct.pack(
            _HEADER_FMT, MAGIC, self.version, self.layer_index,
            self.feature_dim, int(self.kind), self.dtype, 0,
            self.token_count, 0,
        )


@dataclass(frozen=True)
class BatchChunk:
    """A contiguous block of rows, upcast to float64."""

    matrix: np.ndarray
    token_offset: int

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]


def _parse_header(raw: bytes, path) -> StreamHeader:
    if len(raw) < HEADER_SIZE:
        raise FormatError(
            f"{path}: file too short for a header "
            f"({len(raw)} bytes, need {HEADER_SIZE})"
        )
    magic, version, layer, dim, kind, dtype, _r0, tokens, _r1 = struct.unpack(
        _HEADER_FMT, raw[:HEADER_SIZE]
    )
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}, expected {VERSION}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}, expected {DTYPE_F32}")
    if dim < 1:
        raise FormatError(f"{path}: feature_dim {dim} is invalid")
    try:
        kind = Kind(kind)
    except ValueError:
        raise FormatError(f"{path}: unknown kind code {kind} at offset 16")
    return StreamHeader(layer, dim, kind, tokens, version=version, dtype=dtype)


class ActivationStream:
    """Lazy view over one stream file: a validated header plus batched row
    iteration. Each call to :meth:`batches` re-opens the file, so a stream
    object can be scanned more than once; every individual iterator is
    single-consumer and holds at most one chunk of rows."""

    def __init__(self, path, header: StreamHeader):
        self.path = os.fspath(path)
        self.header = header

    def batches(self, batch_size: int = DEFAULT_BATCH_SIZE) -> Iterator[BatchChunk]:
        return batch_iter(self, batch_size)

    def rows(self) -> Iterator[np.ndarray]:
        for chunk in self.batches():
            yield from chunk.matrix

    def materialize(self) -> np.ndarray:
        """Load the full payload as one (token_count, feature_dim) matrix.
        Intended for desk-scale experiments and tests only."""
        parts = [c.matrix for c in self.batches()]
        if not parts:
            return np.empty((0, self.header.feature_dim))
        return np.concatenate(parts, axis=0)


def write_stream(path, header: StreamHeader, rows: Iterable) -> None:
    """Write a stream file atomically (temp file in the same directory,
    then rename). Row count must match ``header.token_count`` and every row
    must be finite with ``feature_dim`` entries."""
    path = os.fspath(path)
    dim = header.feature_dim
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(prefix=".kvcr-", dir=directory)
    written = 0
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header.pack())
            buf = []
            for row in rows:
                arr = np.asarray(row, dtype=np.float64).reshape(-1)
                if arr.shape[0] != dim:
                    raise ShapeError(
                        f"{path}: row {written} has {arr.shape[0]} entries, "
                        f"expected {dim}"
                    )
                if not np.all(np.isfinite(arr)):
                    raise ValueError(
                        f"{path}: non-finite value in row {written}, rejected"
                    )
                buf.append(arr.astype("<f4"))
                written += 1
                if len(buf) >= DEFAULT_BATCH_SIZE:
                    fh.write(np.concatenate(buf).tobytes())
                    buf = []
            if buf:
                fh.write(np.concatenate(buf).tobytes())
        if written != header.token_count:
            raise ShapeError(
                f"{path}: header promises {header.token_count} rows, "
                f"got {written}"
            )
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_stream(path) -> ActivationStream:
    """Validate the header and total byte count of a stream file and return
    a lazy :class:`ActivationStream` over it."""
    path = os.fspath(path)
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        header = _parse_header(fh.read(HEADER_SIZE), path)
    expected = HEADER_SIZE + header.token_count * header.feature_dim * 4
    if size != expected:
        word = "truncated" if size < expected else "oversized"
        raise FormatError(
            f"{path}: {word} payload: expected {expected} bytes "
            f"for {header.token_count} x {header.feature_dim} f32 rows, "
            f"found {size}"
        )
    return ActivationStream(path, header)


def batch_iter(stream: ActivationStream, batch_size: int) -> Iterator[BatchChunk]:
    """Yield the stream's rows as consecutive BatchChunks of ``batch_size``
    rows (the final chunk may be short). Chunks partition the stream in
    order; non-finite payload values are rejected with their token index."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    header = stream.header
    dim = header.feature_dim
    with open(stream.path, "rb") as fh:
        fh.seek(HEADER_SIZE)
        offset = 0
        while offset < header.token_count:
            n = min(batch_size, header.token_count - offset)
            raw = fh.read(n * dim * 4)
            if len(raw) != n * dim * 4:
                raise FormatError(
                    f"{stream.path}: payload ended early at byte "
                    f"{HEADER_SIZE + offset * dim * 4 + len(raw)}"
                )
            mat = np.frombuffer(raw, dtype="<f4").reshape(n, dim).astype(np.float64)
            finite = np.isfinite(mat).all(axis=1)
            if not finite.all():
                bad = offset + int(np.argmin(finite))
                raise FormatError(
                    f"{stream.path}: non-finite value at token {bad} "
                    f"(byte offset {HEADER_SIZE + bad * dim * 4})"
                )
            yield BatchChunk(mat, offset)
            offset += n
