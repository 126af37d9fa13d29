"""A minimal decoder-only transformer with grouped-query attention.

This model exists to close the loop at desk scale: it produces realistic
key/value activation streams for the analysis pipeline and evaluates how
perplexity moves when its key/value projections are swapped for low-rank
down/up factor pairs. Pre-norm residual blocks, tied embedding/output head,
no positional encoding (the factors target raw projections, and omitting
rotation keeps the full-rank round trip an exact identity).

Heads are grouped GQA-style: m_h query heads share m_g key/value heads,
head i attending against group i // (m_h / m_g). m_g = m_h recovers
standard multi-head attention; m_g = 1 is multi-query attention.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, asdict
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .analysis import SpectralResult
from .compression import CompressionFactors, build_factors
from .errors import FormatError, ShapeError
from .metrics import PplGrid
from .streams import Kind, StreamHeader, stream_filename, write_stream

_MODEL_MAGIC = b"KVCM"
_LN_EPS = 1e-5
_INIT_STD = 0.02

CompressedOverride = Dict[Tuple[int, Kind], CompressionFactors]


@dataclass(frozen=True)
class ModelConfig:
    d_e: int = 64
    n_layers: int = 2
    m_h: int = 8
    m_g: int = 2
    d_h: int = 8
    vocab: int = 256
    d_ff: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("d_e", "n_layers", "m_h", "m_g", "d_h", "vocab", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.m_h % self.m_g != 0:
            raise ValueError(
                f"m_h ({self.m_h}) must be divisible by m_g ({self.m_g})"
            )
        if self.vocab > 65536:
            raise ValueError("vocab must fit u16 token ids")

    @property
    def q_width(self) -> int:
        return self.m_h * self.d_h

    @property
    def kv_width(self) -> int:
        return self.m_g * self.d_h


def head_group(head: int, m_h: int, m_g: int) -> int:
    """Group owning query head ``head`` (0-based); each of the m_g groups
    serves exactly m_h / m_g consecutive heads."""
    if m_h % m_g != 0:
        raise ValueError(f"m_h ({m_h}) must be divisible by m_g ({m_g})")
    if not 0 <= head < m_h:
        raise ValueError(f"head index {head} out of range [0, {m_h})")
    return head // (m_h // m_g)


@dataclass
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_in: np.ndarray
    w_out: np.ndarray
    ln1_gain: np.ndarray
    ln2_gain: np.ndarray


@dataclass
class ModelWeights:
    embedding: np.ndarray
    layers: list = field(default_factory=list)


def init_weights(cfg: ModelConfig) -> ModelWeights:
    """Seeded Gaussian init (std 0.02), unit layer-norm gains."""
    rng = np.random.default_rng(cfg.seed)
    emb = rng.normal(0.0, _INIT_STD, size=(cfg.vocab, cfg.d_e))
    layers = []
    for _ in range(cfg.n_layers):
        layers.append(
            LayerWeights(
                w_q=rng.normal(0.0, _INIT_STD, size=(cfg.d_e, cfg.q_width)),
                w_k=rng.normal(0.0, _INIT_STD, size=(cfg.d_e, cfg.kv_width)),
                w_v=rng.normal(0.0, _INIT_STD, size=(cfg.d_e, cfg.kv_width)),
                w_o=rng.normal(0.0, _INIT_STD, size=(cfg.q_width, cfg.d_e)),
                w_in=rng.normal(0.0, _INIT_STD, size=(cfg.d_e, cfg.d_ff)),
                w_out=rng.normal(0.0, _INIT_STD, size=(cfg.d_ff, cfg.d_e)),
                ln1_gain=np.ones(cfg.d_e),
                ln2_gain=np.ones(cfg.d_e),
            )
        )
    return ModelWeights(embedding=emb, layers=layers)


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + _LN_EPS)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x * x * x)))


def _project_kv(
    h: np.ndarray,
    weight: np.ndarray,
    layer: int,
    kind: Kind,
    override: Optional[CompressedOverride],
) -> np.ndarray:
    if override:
        factors = override.get((layer, kind))
        if factors is not None:
            if factors.down.shape[0] != weight.shape[0] or factors.up.shape[1] != weight.shape[1]:
                raise ShapeError(
                    f"override for layer {layer} {kind.label}: factors "
                    f"({factors.down.shape} x {factors.up.shape}) do not match "
                    f"projection {weight.shape}"
                )
            return (h @ factors.down) @ factors.up
    return h @ weight


def forward(
    cfg: ModelConfig,
    weights: ModelWeights,
    tokens,
    override: Optional[CompressedOverride] = None,
    capture: Optional[dict] = None,
) -> np.ndarray:
    """Run the decoder over one token sequence, returning (len, vocab) logits.

    Attention is causal: position t sees positions <= t only. When
    ``override`` maps (layer, kind) to factors, that projection is computed
    as x down up instead of x W. When ``capture`` is a dict, the
    uncompressed per-layer attention inputs are recorded: for each layer,
    capture[(layer, kind)] receives the raw x W rows (pre-softmax stream
    producer used by activation dumps).
    """
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size < 1:
        raise ValueError("token sequence must be non-empty")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ValueError(
            f"token id out of range [0, {cfg.vocab}): {tokens.min()}..{tokens.max()}"
        )
    t_len = tokens.size
    heads_per_group = cfg.m_h // cfg.m_g
    causal = np.where(
        np.arange(t_len)[None, :] > np.arange(t_len)[:, None], -np.inf, 0.0
    )

    x = weights.embedding[tokens]
    for layer, lw in enumerate(weights.layers):
        h = _layer_norm(x) * lw.ln1_gain
        if capture is not None:
            capture.setdefault((layer, Kind.KEY), []).append(h @ lw.w_k)
            capture.setdefault((layer, Kind.VALUE), []).append(h @ lw.w_v)
        # (heads, t, d_h) layout keeps attention on the batched-matmul path
        q = (h @ lw.w_q).reshape(t_len, cfg.m_h, cfg.d_h).transpose(1, 0, 2)
        k = _project_kv(h, lw.w_k, layer, Kind.KEY, override)
        v = _project_kv(h, lw.w_v, layer, Kind.VALUE, override)
        k = k.reshape(t_len, cfg.m_g, cfg.d_h).transpose(1, 0, 2)
        v = v.reshape(t_len, cfg.m_g, cfg.d_h).transpose(1, 0, 2)
        kh = np.repeat(k, heads_per_group, axis=0)  # head i -> group i // hpg
        vh = np.repeat(v, heads_per_group, axis=0)
        scores = q @ kh.transpose(0, 2, 1) / np.sqrt(cfg.d_h) + causal
        scores -= scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=-1, keepdims=True)
        o = (attn @ vh).transpose(1, 0, 2).reshape(t_len, cfg.q_width)
        x = x + o @ lw.w_o
        h2 = _layer_norm(x) * lw.ln2_gain
        x = x + _gelu(h2 @ lw.w_in) @ lw.w_out
    return x @ weights.embedding.T


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def perplexity(
    cfg: ModelConfig,
    weights: ModelWeights,
    corpus: Sequence,
    override: Optional[CompressedOverride] = None,
) -> float:
    """exp of the mean next-token negative log-likelihood (natural log)
    over every corpus position that has a successor."""
    total_nll = 0.0
    positions = 0
    for seq in corpus:
        seq = np.asarray(seq, dtype=np.int64).reshape(-1)
        if seq.size < 2:
            continue
        logits = forward(cfg, weights, seq, override)
        logp = _log_softmax(logits[:-1])
        total_nll -= float(logp[np.arange(seq.size - 1), seq[1:]].sum())
        positions += seq.size - 1
    if positions == 0:
        raise ValueError(
            "perplexity needs at least one sequence of length >= 2"
        )
    return float(np.exp(total_nll / positions))


def dump_activations(
    cfg: ModelConfig, weights: ModelWeights, corpus: Sequence, out_dir
) -> list:
    """Write one stream file per (layer, kind) for the whole corpus.

    Rows are the raw projection outputs x W^K and x W^V where x is the
    attention sublayer input (post-layer-norm residual stream); sequences
    are concatenated in corpus order.
    """
    corpus = [np.asarray(s, dtype=np.int64).reshape(-1) for s in corpus]
    corpus = [s for s in corpus if s.size]
    if not corpus:
        raise ValueError("corpus is empty, nothing to dump")
    capture: dict = {}
    for seq in corpus:
        forward(cfg, weights, seq, override=None, capture=capture)
    total = int(sum(s.size for s in corpus))
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for layer in range(cfg.n_layers):
        for kind in (Kind.KEY, Kind.VALUE):
            blocks = capture[(layer, kind)]
            header = StreamHeader(
                layer_index=layer,
                feature_dim=cfg.kv_width,
                kind=kind,
                token_count=total,
            )
            path = os.path.join(out_dir, stream_filename(layer, kind))
            write_stream(path, header, (row for block in blocks for row in block))
            paths.append(path)
    return paths


def ppl_grid(
    cfg: ModelConfig,
    weights: ModelWeights,
    corpus: Sequence,
    key_ratios: Sequence[float],
    value_ratios: Sequence[float],
    spectra: Dict[Tuple[int, Kind], SpectralResult],
) -> PplGrid:
    """Sweep perplexity over a cartesian grid of retain ratios, compressing
    every layer uniformly (keys at the row ratio, values at the column
    ratio)."""
    key_ratios = np.sort(np.unique(np.asarray(key_ratios, dtype=np.float64)))
    value_ratios = np.sort(np.unique(np.asarray(value_ratios, dtype=np.float64)))
    for layer in range(cfg.n_layers):
        for kind in (Kind.KEY, Kind.VALUE):
            if (layer, kind) not in spectra:
                raise ValueError(
                    f"missing spectrum for layer {layer} {kind.label}"
                )

    def side_factors(kind: Kind, ratio: float) -> dict:
        out = {}
        for layer in range(cfg.n_layers):
            w = weights.layers[layer].w_k if kind is Kind.KEY else weights.layers[layer].w_v
            out[(layer, kind)] = build_factors(w, spectra[(layer, kind)], float(ratio))
        return out

    key_side = {r: side_factors(Kind.KEY, r) for r in key_ratios}
    value_side = {r: side_factors(Kind.VALUE, r) for r in value_ratios}
    grid = np.empty((key_ratios.size, value_ratios.size))
    for i, kr in enumerate(key_ratios):
        for j, vr in enumerate(value_ratios):
            override = dict(key_side[kr])
            override.update(value_side[vr])
            grid[i, j] = perplexity(cfg, weights, corpus, override)
    return PplGrid(key_ratios, value_ratios, grid)


# -- checkpoint format -----------------------------------------------------


def _tensor_entries(cfg: ModelConfig, weights: ModelWeights):
    yield "embedding", weights.embedding
    for i, lw in enumerate(weights.layers):
        for name in ("w_q", "w_k", "w_v", "w_o", "w_in", "w_out", "ln1_gain", "ln2_gain"):
            yield f"layers.{i}.{name}", getattr(lw, name)


def save_model(path, cfg: ModelConfig, weights: ModelWeights) -> None:
    """Single-file checkpoint: config as length-prefixed JSON, then each
    tensor tagged with its name and shape, payload f32 little-endian."""
    cfg_blob = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _MODEL_MAGIC, 1, len(cfg_blob)))
        fh.write(cfg_blob)
        for name, tensor in _tensor_entries(cfg, weights):
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(tensor, dtype="<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_model(path) -> Tuple[ModelConfig, ModelWeights]:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12:
            raise FormatError(f"{path}: checkpoint header truncated")
        magic, version, cfg_len = struct.unpack("<4sII", head)
        if magic != _MODEL_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
        if version != 1:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        try:
            cfg = ModelConfig(**json.loads(fh.read(cfg_len).decode("utf-8")))
        except (ValueError, TypeError) as exc:
            raise FormatError(f"{path}: invalid embedded config: {exc}")
        tensors = {}
        while True:
            raw = fh.read(2)
            if not raw:
                break
            (name_len,) = struct.unpack("<H", raw)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(dims)) if rank else 1
            payload = fh.read(count * 4)
            if len(payload) != count * 4:
                raise FormatError(f"{path}: tensor {name!r} payload truncated")
            tensors[name] = (
                np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)
            )
    expected = dict(_tensor_entries(cfg, _empty_weights(cfg)))
    missing = [n for n in expected if n not in tensors]
    if missing:
        raise FormatError(f"{path}: checkpoint is missing tensors {missing}")
    weights = _empty_weights(cfg)
    if tensors["embedding"].shape != (cfg.vocab, cfg.d_e):
        raise FormatError(
            f"{path}: embedding has shape {tensors['embedding'].shape}, "
            f"expected {(cfg.vocab, cfg.d_e)}"
        )
    weights.embedding = tensors["embedding"]
    for i in range(cfg.n_layers):
        lw = weights.layers[i]
        for name in ("w_q", "w_k", "w_v", "w_o", "w_in", "w_out", "ln1_gain", "ln2_gain"):
            full = f"layers.{i}.{name}"
            want = getattr(lw, name).shape
            got = tensors[full].shape
            if want != got:
                raise FormatError(
                    f"{path}: tensor {full} has shape {got}, expected {want}"
                )
            setattr(lw, name, tensors[full])
    return cfg, weights


def _empty_weights(cfg: ModelConfig) -> ModelWeights:
    layers = [
        LayerWeights(
            w_q=np.zeros((cfg.d_e, cfg.q_width)),
            w_k=np.zeros((cfg.d_e, cfg.kv_width)),
            w_v=np.zeros((cfg.d_e, cfg.kv_width)),
            w_o=np.zeros((cfg.q_width, cfg.d_e)),
            w_in=np.zeros((cfg.d_e, cfg.d_ff)),
            w_out=np.zeros((cfg.d_ff, cfg.d_e)),
            ln1_gain=np.zeros(cfg.d_e),
            ln2_gain=np.zeros(cfg.d_e),
        )
        for _ in range(cfg.n_layers)
    ]
    return ModelWeights(embedding=np.zeros((cfg.vocab, cfg.d_e)), layers=layers)
