"""Streaming Gram-matrix accumulation and exact spectrum recovery.

The key observation: for feature rows k_1..k_l stacked as K, the d x d
second-moment matrix C = K^T K = sum_t k_t^T k_t can be built one batch at
a time in O(d^2) memory, and its eigendecomposition C = V S^2 V^T yields
exactly the singular values and right singular vectors that a direct SVD
of the full l x d matrix would produce. Accumulators form a commutative
monoid under :meth:`merge`, so dataset shards can be processed in parallel
and combined losslessly.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError
from .linalg import as_matrix, sym_eigh
from .streams import ActivationStream, BatchChunk, Kind, DEFAULT_BATCH_SIZE

DEFAULT_RANK_TOL = 1e-10

_CKPT_MAGIC = b"KVCK"
_CKPT_FMT = "<4sIIQ"
_SPEC_MAGIC = b"KVCS"
_SPEC_FMT = "<4sIIB3xIQId"


@dataclass(frozen=True)
class SpectralResult:
    """Descending singular values and right singular vectors of one
    (layer, kind) activation matrix, plus bookkeeping."""

    layer_index: int
    kind: Kind
    sigma: np.ndarray
    v: np.ndarray
    tokens_seen: int
    numerical_rank: int
    rank_tol: float = DEFAULT_RANK_TOL

    @property
    def dim(self) -> int:
        return self.sigma.shape[0]


class CovarianceAccumulator:
    """Mergeable d x d Gram accumulator over token feature rows.

    Single-writer: feed batches through :meth:`ingest`; combine shards with
    :meth:`merge`. The matrix is kept symmetric after every update.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self.dim = dim
        self.gram = np.zeros((dim, dim))
        self.tokens_seen = 0

    def ingest(self, chunk) -> "CovarianceAccumulator":
        """Add one batch of rows: gram += chunk^T chunk.

        Accepts a BatchChunk or a plain (b, dim) matrix. Equivalent to
        summing per-token outer products k_t^T k_t in row order.
        """
        matrix = chunk.matrix if isinstance(chunk, BatchChunk) else as_matrix(chunk)
        if matrix.ndim != 2 or matrix.shape[1] != self.dim:
            raise ShapeError(
                f"ingest: batch of shape {matrix.shape} does not match "
                f"accumulator dim {self.dim}"
            )
        update = matrix.T @ matrix
        self.gram += update
        self.gram = (self.gram + self.gram.T) / 2.0
        self.tokens_seen += matrix.shape[0]
        return self

    def merge(self, other: "CovarianceAccumulator") -> "CovarianceAccumulator":
        """Combine two shard accumulators into a new one."""
        if self.dim != other.dim:
            raise ShapeError(
                f"merge: accumulator dims differ: {self.dim} vs {other.dim}"
            )
        out = CovarianceAccumulator(self.dim)
        out.gram = self.gram + other.gram
        out.tokens_seen = self.tokens_seen + other.tokens_seen
        return out

    def finalize(
        self,
        layer_index: int,
        kind: Kind,
        rank_tol: float = DEFAULT_RANK_TOL,
    ) -> SpectralResult:
        """Eigendecompose the accumulated Gram matrix into the spectrum.

        sigma[i] = sqrt(eigenvalue i); eigenvectors become the right
        singular vectors, sign-canonicalized. numerical_rank counts the
        sigma above rank_tol * sigma[0].

        Eigenvalues below dim * eps * lambda_max are zeroed first: the Gram
        route cannot resolve anything under its own roundoff floor, and
        without the clamp an exactly rank-deficient input would surface
        phantom sigma near sqrt(eps) * sigma_max, above any reasonable
        rank_tol.
        """
        if not 0.0 < rank_tol < 1.0:
            raise ValueError(f"rank_tol must lie in (0, 1), got {rank_tol}")
        eig = sym_eigh(self.gram)
        # the Gram matrix is PSD up to roundoff; residual negatives are noise
        lam = np.clip(eig.eigenvalues, 0.0, None)
        if lam.size and lam[0] > 0.0:
            lam[lam < self.dim * np.finfo(np.float64).eps * lam[0]] = 0.0
        sigma = np.sqrt(lam)
        if sigma.size and sigma[0] > 0.0:
            rank = int(np.sum(sigma > rank_tol * sigma[0]))
        else:
            rank = 0
        return SpectralResult(
            layer_index=layer_index,
            kind=Kind(kind),
            sigma=sigma,
            v=eig.eigenvectors,
            tokens_seen=self.tokens_seen,
            numerical_rank=rank,
            rank_tol=rank_tol,
        )

    @classmethod
    def from_stream(
        cls, stream: ActivationStream, batch_size: int = DEFAULT_BATCH_SIZE
    ) -> "CovarianceAccumulator":
        """Accumulate an entire stream file in batches."""
        acc = cls(stream.header.feature_dim)
        for chunk in stream.batches(batch_size):
            acc.ingest(chunk)
        return acc

    # -- checkpointing ----------------------------------------------------

    def save_checkpoint(self, path) -> None:
        """Persist accumulator state so a long dataset pass can resume."""
        blob = struct.pack(_CKPT_FMT, _CKPT_MAGIC, 1, self.dim, self.tokens_seen)
        with open(path, "wb") as fh:
            fh.write(blob)
            fh.write(self.gram.astype("<f8").tobytes())

    @classmethod
    def load_checkpoint(cls, path) -> "CovarianceAccumulator":
        path = os.fspath(path)
        head_size = struct.calcsize(_CKPT_FMT)
        with open(path, "rb") as fh:
            raw = fh.read(head_size)
            if len(raw) < head_size:
                raise FormatError(f"{path}: checkpoint header truncated")
            magic, version, dim, tokens = struct.unpack(_CKPT_FMT, raw)
            if magic != _CKPT_MAGIC:
                raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
            if version != 1:
                raise FormatError(f"{path}: unsupported checkpoint version {version}")
            payload = fh.read()
        if len(payload) != dim * dim * 8:
            raise FormatError(
                f"{path}: checkpoint payload has {len(payload)} bytes, "
                f"expected {dim * dim * 8}"
            )
        acc = cls(dim)
        gram = np.frombuffer(payload, dtype="<f8").reshape(dim, dim).copy()
        if not np.all(np.isfinite(gram)):
            raise FormatError(f"{path}: checkpoint contains non-finite entries")
        acc.gram = gram
        acc.tokens_seen = tokens
        return acc


def spectrum_filename(layer_index: int, kind: Kind) -> str:
    return f"layer{layer_index}_{Kind(kind).label}.spectrum"


def save_spectrum(path, spec: SpectralResult) -> None:
    """Write a SpectralResult to its binary file (all payloads f64 LE)."""
    dim = spec.dim
    blob = struct.pack(
        _SPEC_FMT, _SPEC_MAGIC, 1, spec.layer_index, int(spec.kind),
        dim, spec.tokens_seen, spec.numerical_rank, spec.rank_tol,
    )
    with open(path, "wb") as fh:
        fh.write(blob)
        fh.write(np.ascontiguousarray(spec.sigma, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(spec.v, dtype="<f8").tobytes())


def load_spectrum(path) -> SpectralResult:
    path = os.fspath(path)
    head_size = struct.calcsize(_SPEC_FMT)
    with open(path, "rb") as fh:
        raw = fh.read(head_size)
        if len(raw) < head_size:
            raise FormatError(f"{path}: spectrum header truncated")
        magic, version, layer, kind, dim, tokens, rank, rank_tol = struct.unpack(
            _SPEC_FMT, raw
        )
        if magic != _SPEC_MAGIC:
            raise FormatError(f"{path}: bad spectrum magic {magic!r}")
        if version != 1:
            raise FormatError(f"{path}: unsupported spectrum version {version}")
        payload = fh.read()
    expected = dim * 8 + dim * dim * 8
    if len(payload) != expected:
        raise FormatError(
            f"{path}: spectrum payload has {len(payload)} bytes, expected {expected}"
        )
    sigma = np.frombuffer(payload[: dim * 8], dtype="<f8").copy()
    v = np.frombuffer(payload[dim * 8 :], dtype="<f8").reshape(dim, dim).copy()
    return SpectralResult(
        layer_index=layer,
        kind=Kind(kind),
        sigma=sigma,
        v=v,
        tokens_seen=tokens,
        numerical_rank=rank,
        rank_tol=rank_tol,
    )
