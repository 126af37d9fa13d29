"""Synthetic token corpora with controllable structure.

Sequences are drawn from a random Markov chain whose per-context
next-token distributions are Dirichlet samples: small concentration values
give peaked, low-entropy chains (strongly structured text stand-in), large
values approach i.i.d. uniform tokens. Context distributions are derived
from (seed, context) alone, so the chain is identical no matter in which
order contexts are first visited.

On disk a corpus is a flat little-endian u16 token stream; sequence
boundaries are reintroduced by chunking into fixed-length blocks.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import FormatError

_CTX_STREAM = 0xD1
_DRAW_STREAM = 0xC0


def markov_corpus(
    vocab: int,
    n_sequences: int,
    seq_len: int,
    order: int = 1,
    concentration: float = 0.1,
    seed: int = 0,
) -> list[np.ndarray]:
    """Sample ``n_sequences`` sequences of ``seq_len`` tokens each.

    ``order`` is the Markov order (0 = i.i.d. draws from one distribution);
    ``concentration`` is the Dirichlet parameter controlling entropy.
    """
    if vocab < 2 or vocab > 65536:
        raise ValueError(f"vocab must lie in [2, 65536], got {vocab}")
    if order < 0:
        raise ValueError(f"order must be >= 0, got {order}")
    if concentration <= 0.0:
        raise ValueError(f"concentration must be positive, got {concentration}")
    rng = np.random.default_rng([seed, _DRAW_STREAM])
    dists: dict[tuple, np.ndarray] = {}

    def ctx_dist(ctx: tuple) -> np.ndarray:
        probs = dists.get(ctx)
        if probs is None:
            ctx_rng = np.random.default_rng([seed, _CTX_STREAM, *ctx])
            probs = ctx_rng.dirichlet(np.full(vocab, concentration))
            dists[ctx] = probs
        return probs

    sequences = []
    for _ in range(n_sequences):
        seq = np.empty(seq_len, dtype=np.int64)
        for t in range(seq_len):
            ctx = tuple(seq[max(0, t - order) : t]) if order else ()
            seq[t] = rng.choice(vocab, p=ctx_dist(ctx))
        sequences.append(seq)
    return sequences


def save_tokens(path, sequences) -> None:
    """Concatenate sequences and write them as raw u16 little-endian ids."""
    flat = np.concatenate([np.asarray(s) for s in sequences]) if sequences else np.empty(0, dtype=np.int64)
    if flat.size and (flat.min() < 0 or flat.max() > 0xFFFF):
        raise ValueError("token ids must fit in u16")
    with open(path, "wb") as fh:
        fh.write(flat.astype("<u2").tobytes())


def load_tokens(path, block_len: int) -> list[np.ndarray]:
    """Read a flat u16 token file and re-chunk it into ``block_len`` blocks
    (final block may be short)."""
    path = os.fspath(path)
    if block_len < 1:
        raise ValueError(f"block_len must be >= 1, got {block_len}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % 2 != 0:
        raise FormatError(f"{path}: odd byte count {len(raw)} for u16 tokens")
    flat = np.frombuffer(raw, dtype="<u2").astype(np.int64)
    return [flat[i : i + block_len] for i in range(0, flat.size, block_len)]
