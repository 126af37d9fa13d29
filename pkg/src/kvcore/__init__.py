"""kvcore: streaming rank analysis and optimal low-rank compression of
transformer KV caches.

The pipeline: write per-(layer, kind) activation streams, accumulate their
Gram matrices with constant memory, eigendecompose to recover the exact
singular spectrum, derive the provably optimal down/up projection pair at
any retain rank, and score compressibility (NER) and end-to-end
degradation (perplexity grids, ND-PPL) on a built-in toy GQA decoder.
"""

from .analysis import (
    CovarianceAccumulator,
    SpectralResult,
    load_spectrum,
    save_spectrum,
    spectrum_filename,
)
from .compression import (
    CompressionFactors,
    CompressionReport,
    OptimalityReport,
    build_factors,
    factors_filename,
    load_factors,
    measured_error,
    predicted_error,
    resolve_rank,
    save_factors,
    subspace_projection_error,
    verify_optimality,
)
from .corpus import load_tokens, markov_corpus, save_tokens
from .errors import (
    ConvergenceError,
    FormatError,
    KvcoreError,
    NumericalError,
    OptimalityViolation,
    ShapeError,
)
from .linalg import (
    EigenResult,
    SvdResult,
    as_matrix,
    frobenius_norm,
    matmul,
    svd_direct,
    sym_eigh,
)
from .metrics import (
    NdPplReport,
    NerReport,
    PplGrid,
    effective_rank,
    load_ppl_grid,
    nd_ppl,
    ner,
    save_ppl_grid,
)
from .model import (
    CompressedOverride,
    ModelConfig,
    ModelWeights,
    dump_activations,
    forward,
    head_group,
    init_weights,
    load_model,
    perplexity,
    ppl_grid,
    save_model,
)
from .streams import (
    ActivationStream,
    BatchChunk,
    Kind,
    StreamHeader,
    batch_iter,
    read_stream,
    stream_filename,
    write_stream,
)
from .training import loss_and_grads, train_weights

__version__ = "0.1.0"

__all__ = [
    "ActivationStream",
    "BatchChunk",
    "CompressedOverride",
    "CompressionFactors",
    "CompressionReport",
    "ConvergenceError",
    "CovarianceAccumulator",
    "EigenResult",
    "FormatError",
    "Kind",
    "KvcoreError",
    "ModelConfig",
    "ModelWeights",
    "NdPplReport",
    "NerReport",
    "NumericalError",
    "OptimalityReport",
    "OptimalityViolation",
    "PplGrid",
    "ShapeError",
    "SpectralResult",
    "StreamHeader",
    "SvdResult",
    "as_matrix",
    "batch_iter",
    "build_factors",
    "dump_activations",
    "effective_rank",
    "factors_filename",
    "forward",
    "frobenius_norm",
    "head_group",
    "init_weights",
    "load_factors",
    "load_model",
    "load_ppl_grid",
    "load_spectrum",
    "load_tokens",
    "loss_and_grads",
    "markov_corpus",
    "matmul",
    "measured_error",
    "nd_ppl",
    "ner",
    "perplexity",
    "ppl_grid",
    "predicted_error",
    "read_stream",
    "resolve_rank",
    "save_factors",
    "save_model",
    "save_ppl_grid",
    "save_spectrum",
    "save_tokens",
    "spectrum_filename",
    "stream_filename",
    "subspace_projection_error",
    "svd_direct",
    "sym_eigh",
    "train_weights",
    "verify_optimality",
    "write_stream",
]
