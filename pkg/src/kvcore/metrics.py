"""Compressibility and degradation metrics.

Two families live here. The spectral side quantifies how evenly a singular
spectrum is spread: the effective rank is exp of the Shannon entropy of the
normalized singular values, and NER divides it by the actual rank to land
in [1/r, 1] (lower = more compressible). The end-to-end side scores a grid
of perplexities measured at different key/value retain ratios: ND-PPL
averages baseline-normalized pairwise perplexity differences, giving a
scale-free measure of how much compression hurt.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .analysis import SpectralResult
from .errors import FormatError, NumericalError
from .streams import Kind


def effective_rank(sigma, rank_r: int) -> float:
    """exp(-sum p_i log p_i) with p_i = sigma_i / sum of the top rank_r
    singular values (natural log, 0 log 0 = 0).

    The result always lies in [1, rank_r]: 1 when a single value dominates,
    rank_r when the top values are all equal.
    """
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if rank_r < 1:
        raise ValueError(f"rank_r must be >= 1, got {rank_r}")
    if rank_r > sigma.size:
        raise ValueError(f"rank_r {rank_r} exceeds spectrum length {sigma.size}")
    if np.any(sigma < 0.0) or not np.all(np.isfinite(sigma)):
        raise ValueError("sigma must be non-negative and finite")
    top = np.sort(sigma)[::-1][:rank_r]
    total = float(np.sum(top))
    if total <= 0.0:
        raise NumericalError("effective rank is undefined for an all-zero spectrum")
    p = top / total
    nz = p[p > 0.0]
    entropy = float(-np.sum(nz * np.log(nz)))
    return float(np.exp(entropy))


@dataclass(frozen=True)
class NerReport:
    layer_index: int
    kind: Kind
    erank: float
    rank_r: int
    ner: float


def ner(spectrum: SpectralResult) -> NerReport:
    """Normalized effective rank of one (layer, kind) spectrum.

    Entropy is taken over the top numerical_rank singular values, then
    divided by that rank, so the score is scale-invariant and bounded by
    [1/r, 1].
    """
    r = spectrum.numerical_rank
    if r < 1:
        raise NumericalError(
            "NER is undefined for a zero spectrum (numerical rank 0)"
        )
    erank = effective_rank(spectrum.sigma, r)
    return NerReport(
        layer_index=spectrum.layer_index,
        kind=spectrum.kind,
        erank=erank,
        rank_r=r,
        ner=erank / r,
    )


@dataclass(frozen=True)
class PplGrid:
    """Perplexity at every (key ratio, value ratio) grid point.

    ``ppl[i, j]`` belongs to ``key_ratios[i]`` x ``value_ratios[j]``; both
    ratio axes are strictly increasing and end at or below 1.
    """

    key_ratios: np.ndarray
    value_ratios: np.ndarray
    ppl: np.ndarray

    def __post_init__(self):
        kr = np.asarray(self.key_ratios, dtype=np.float64)
        vr = np.asarray(self.value_ratios, dtype=np.float64)
        grid = np.asarray(self.ppl, dtype=np.float64)
        for name, r in (("key", kr), ("value", vr)):
            if r.ndim != 1 or r.size == 0:
                raise ValueError(f"{name} ratios must be a non-empty vector")
            if np.any(r <= 0.0) or np.any(r > 1.0):
                raise ValueError(f"{name} ratios must lie in (0, 1]: {r}")
            if np.any(np.diff(r) <= 0.0):
                raise ValueError(f"{name} ratios must be strictly increasing: {r}")
        if grid.shape != (kr.size, vr.size):
            raise ValueError(
                f"ppl grid shape {grid.shape} does not match "
                f"{kr.size} key x {vr.size} value ratios"
            )
        if not np.all(np.isfinite(grid)) or np.any(grid <= 0.0):
            raise ValueError("perplexities must be positive and finite")
        object.__setattr__(self, "key_ratios", kr)
        object.__setattr__(self, "value_ratios", vr)
        object.__setattr__(self, "ppl", grid)


@dataclass(frozen=True)
class NdPplReport:
    nd_ppl_key: float
    nd_ppl_value: float
    pair_count_key: int
    pair_count_value: int


def _pairwise_side(ratios: np.ndarray, ppl: np.ndarray) -> tuple[float, int]:
    """Average over columns of the mean normalized difference across ratio
    pairs (hi, lo) along axis 0; hi retains more rank and normalizes."""
    m = ratios.size
    pairs = [(i, j) for i in range(m) for j in range(m) if ratios[i] > ratios[j]]
    acc = 0.0
    for col in range(ppl.shape[1]):
        col_sum = 0.0
        for hi, lo in pairs:
            col_sum += (ppl[lo, col] - ppl[hi, col]) / ppl[hi, col]
        acc += col_sum / len(pairs)
    return acc / ppl.shape[1], len(pairs)


def nd_ppl(grid: PplGrid) -> NdPplReport:
    """Normalized delta-perplexity for both cache sides.

    Key side: holding each value ratio fixed, every ordered key-ratio pair
    (k_hi > k_lo) contributes (PPL(k_lo, v) - PPL(k_hi, v)) / PPL(k_hi, v);
    pair means are then averaged over value ratios. The value side swaps
    the roles. The sign is preserved, so a grid where compression helps
    yields negative values; uniform grid rescaling leaves both sides
    unchanged.
    """
    if grid.key_ratios.size < 2:
        raise ValueError("nd_ppl needs at least 2 key ratios")
    if grid.value_ratios.size < 2:
        raise ValueError("nd_ppl needs at least 2 value ratios")
    key_side, key_pairs = _pairwise_side(grid.key_ratios, grid.ppl)
    value_side, value_pairs = _pairwise_side(grid.value_ratios, grid.ppl.T)
    return NdPplReport(
        nd_ppl_key=key_side,
        nd_ppl_value=value_side,
        pair_count_key=key_pairs,
        pair_count_value=value_pairs,
    )


# -- grid CSV --------------------------------------------------------------


def save_ppl_grid(path, grid: PplGrid) -> None:
    """CSV with header ``k,v,ppl``, one row per grid point, key-major."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "v", "ppl"])
        for i, k in enumerate(grid.key_ratios):
            for j, v in enumerate(grid.value_ratios):
                writer.writerow([repr(float(k)), repr(float(v)), repr(float(grid.ppl[i, j]))])


def load_ppl_grid(path) -> PplGrid:
    """Parse a grid CSV, requiring the full cartesian product of ratios."""
    path = os.fspath(path)
    entries = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["k", "v", "ppl"]:
            raise FormatError(f"{path}: expected header 'k,v,ppl', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                k, v, p = (float(c) for c in row)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric field in {row}")
            if (k, v) in entries:
                raise FormatError(f"{path}:{lineno}: duplicate grid point ({k}, {v})")
            entries[(k, v)] = p
    if not entries:
        raise FormatError(f"{path}: grid holds no points")
    key_ratios = np.array(sorted({k for k, _ in entries}))
    value_ratios = np.array(sorted({v for _, v in entries}))
    missing = [
        (k, v)
        for k in key_ratios
        for v in value_ratios
        if (k, v) not in entries
    ]
    if missing:
        listed = ", ".join(f"({k:g}, {v:g})" for k, v in missing[:8])
        more = "" if len(missing) <= 8 else f" and {len(missing) - 8} more"
        raise FormatError(f"{path}: grid is missing cartesian points {listed}{more}")
    ppl = np.array(
        [[entries[(k, v)] for v in value_ratios] for k in key_ratios]
    )
    return PplGrid(key_ratios, value_ratios, ppl)
