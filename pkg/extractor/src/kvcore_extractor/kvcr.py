"""Self-contained KVCR stream writer/reader.

This mirrors the analysis toolkit's wire format byte for byte but shares
no code with it; format conformance is proven by the golden fixture and
the cross-acceptance test, not by imports. Layout (little-endian):

    offset  0: magic "KVCR"
    offset  4: version      u32 = 1
    offset  8: layer_index  u32
    offset 12: feature_dim  u32
    offset 16: kind         u8 (0 = key, 1 = value)
    offset 17: dtype        u8 (0 = f32)
    offset 18: reserved     u16 = 0
    offset 20: token_count  u64
    offset 28: reserved     u32 = 0
    offset 32: payload, token_count * feature_dim f32, row-major

The writer appends rows as they are captured and fills in token_count by
seeking back once the budget (or the dataset) runs out.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"KVCR"
VERSION = 1
HEADER_SIZE = 32
_HEADER_FMT = "<4sIIIBBHQI"

KIND_KEY = 0
KIND_VALUE = 1
KIND_LABELS = {KIND_KEY: "key", KIND_VALUE: "value"}


def stream_filename(layer_index: int, kind: int) -> str:
    return f"layer{layer_index}_{KIND_LABELS[kind]}.kvcr"


def pack_header(layer_index: int, feature_dim: int, kind: int, token_count: int) -> bytes:
    return struct.pack(
        _HEADER_FMT, MAGIC, VERSION, layer_index, feature_dim,
        kind, 0, 0, token_count, 0,
    )


@dataclass
class Header:
    layer_index: int
    feature_dim: int
    kind: int
    token_count: int


def parse_header(raw: bytes, path: str = "<bytes>") -> Header:
    if len(raw) < HEADER_SIZE:
        raise ValueError(f"{path}: only {len(raw)} header bytes, need {HEADER_SIZE}")
    magic, version, layer, dim, kind, dtype, _r0, tokens, _r1 = struct.unpack(
        _HEADER_FMT, raw[:HEADER_SIZE]
    )
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if dtype != 0:
        raise ValueError(f"{path}: unsupported dtype code {dtype} at offset 17")
    if kind not in KIND_LABELS:
        raise ValueError(f"{path}: unknown kind code {kind} at offset 16")
    if dim < 1:
        raise ValueError(f"{path}: feature_dim {dim} is invalid")
    return Header(layer, dim, kind, tokens)


class StreamWriter:
    """Append-only writer for one (layer, kind); token_count is written
    last via seek-back, so extraction can stop whenever the budget says."""

    def __init__(self, path, layer_index: int, feature_dim: int, kind: int):
        self.path = os.fspath(path)
        self.layer_index = layer_index
        self.feature_dim = feature_dim
        self.kind = kind
        self.rows_written = 0
        self._fh = open(self.path, "wb")
        self._fh.write(pack_header(layer_index, feature_dim, kind, 0))
        self._fh.flush()

    def append(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows)
        if rows.ndim != 2 or rows.shape[1] != self.feature_dim:
            raise ValueError(
                f"{self.path}: batch of shape {rows.shape} does not match "
                f"feature_dim {self.feature_dim}"
            )
        if not np.all(np.isfinite(rows)):
            bad = self.rows_written + int(
                np.argmin(np.isfinite(rows).all(axis=1))
            )
            raise ValueError(f"{self.path}: non-finite activation at token {bad}")
        self._fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())
        self.rows_written += rows.shape[0]

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.seek(0)
        self._fh.write(
            pack_header(self.layer_index, self.feature_dim, self.kind, self.rows_written)
        )
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_stream(path) -> tuple[Header, np.ndarray]:
    """Parse one stream file fully, checking size and finiteness."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    header = parse_header(raw, path)
    expected = HEADER_SIZE + header.token_count * header.feature_dim * 4
    if len(raw) != expected:
        word = "truncated" if len(raw) < expected else "oversized"
        raise ValueError(
            f"{path}: {word}: expected {expected} bytes for "
            f"{header.token_count} x {header.feature_dim} f32 rows, found {len(raw)}"
        )
    mat = np.frombuffer(raw[HEADER_SIZE:], dtype="<f4").reshape(
        header.token_count, header.feature_dim
    )
    finite = np.isfinite(mat).all(axis=1)
    if not finite.all():
        bad = int(np.argmin(finite))
        raise ValueError(
            f"{path}: non-finite value at token {bad} "
            f"(byte offset {HEADER_SIZE + bad * header.feature_dim * 4})"
        )
    return header, mat
