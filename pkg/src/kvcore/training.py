"""Lightweight full-batch trainer for the toy decoder.

Plain Adam on next-token cross-entropy, implemented with manual numpy
backprop through the GQA decoder. A couple hundred steps on a Markov
corpus are enough to pull the model clearly below uniform perplexity,
which is what makes compression sweeps meaningful: a model with no skill
has nothing to lose, so truncating its caches does not degrade it.

Gradients are exact (finite-difference checked in the test suite); running
the same seed and corpus twice yields bitwise-identical weights.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .model import LayerWeights, ModelConfig, ModelWeights, _LN_EPS

_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8
_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def _gelu_cached(x: np.ndarray):
    """GeLU activation plus the tanh term needed to replay its gradient."""
    x2 = x * x
    th = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    return 0.5 * x * (1.0 + th), th, x2


def _gelu_grad(x: np.ndarray, th: np.ndarray, x2: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_C * (
        1.0 + 3.0 * _GELU_A * x2
    )


def _ln_forward(x: np.ndarray):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    return (x - mean) * inv_std, inv_std


def _ln_backward(dy: np.ndarray, y: np.ndarray, inv_std: np.ndarray) -> np.ndarray:
    return (
        dy
        - dy.mean(axis=-1, keepdims=True)
        - y * (dy * y).mean(axis=-1, keepdims=True)
    ) * inv_std


def _zero_grads(cfg: ModelConfig, weights: ModelWeights) -> ModelWeights:
    layers = [
        LayerWeights(**{
            name: np.zeros_like(getattr(lw, name))
            for name in ("w_q", "w_k", "w_v", "w_o", "w_in", "w_out",
                         "ln1_gain", "ln2_gain")
        })
        for lw in weights.layers
    ]
    return ModelWeights(embedding=np.zeros_like(weights.embedding), layers=layers)


def _param_arrays(w: ModelWeights):
    yield w.embedding
    for lw in w.layers:
        for name in ("w_q", "w_k", "w_v", "w_o", "w_in", "w_out",
                     "ln1_gain", "ln2_gain"):
            yield getattr(lw, name)


def loss_and_grads(
    cfg: ModelConfig, weights: ModelWeights, batch: np.ndarray, total_positions: int
):
    """Cross-entropy over one (B, T) token batch plus exact gradients.

    The loss contribution is scaled by 1 / total_positions so batches of
    different lengths can be summed into one corpus-level mean.
    """
    tokens = np.asarray(batch, dtype=np.int64)
    b, t = tokens.shape
    grads = _zero_grads(cfg, weights)
    hpg = cfg.m_h // cfg.m_g
    causal = np.where(np.arange(t)[None, :] > np.arange(t)[:, None], -np.inf, 0.0)
    scale = 1.0 / np.sqrt(cfg.d_h)

    def flat2(a, width):
        return a.reshape(-1, width)

    # forward, caching what backward needs; attention runs in
    # (b, heads, t, d_h) layout so every contraction is a batched matmul
    x = weights.embedding[tokens]  # (b, t, d_e)
    cache = []
    for lw in weights.layers:
        y1, inv1 = _ln_forward(x)
        h = y1 * lw.ln1_gain
        q = (h @ lw.w_q).reshape(b, t, cfg.m_h, cfg.d_h).transpose(0, 2, 1, 3)
        k = (h @ lw.w_k).reshape(b, t, cfg.m_g, cfg.d_h).transpose(0, 2, 1, 3)
        v = (h @ lw.w_v).reshape(b, t, cfg.m_g, cfg.d_h).transpose(0, 2, 1, 3)
        kh = np.repeat(k, hpg, axis=1)  # (b, m_h, t, d_h)
        vh = np.repeat(v, hpg, axis=1)
        scores = q @ kh.transpose(0, 1, 3, 2) * scale + causal
        scores -= scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=-1, keepdims=True)
        o = attn @ vh  # (b, m_h, t, d_h)
        o_flat = o.transpose(0, 2, 1, 3).reshape(b, t, cfg.q_width)
        x2 = x + o_flat @ lw.w_o
        y2, inv2 = _ln_forward(x2)
        h2 = y2 * lw.ln2_gain
        u = h2 @ lw.w_in
        act, th, u2 = _gelu_cached(u)
        x3 = x2 + act @ lw.w_out
        cache.append((y1, inv1, h, q, kh, vh, attn, o_flat, y2, inv2, h2, u, th, u2, act))
        x = x3

    logits = x @ weights.embedding.T  # (b, t, vocab)
    m = logits.max(axis=-1, keepdims=True)
    logz = m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    logp = logits - logz
    targets = tokens[:, 1:]
    rows = np.arange(t - 1)
    nll = 0.0
    for i in range(b):
        nll -= float(logp[i, rows, targets[i]].sum())
    loss = nll / total_positions

    # backward
    p = np.exp(logp)
    dz = p
    for i in range(b):
        dz[i, rows, targets[i]] -= 1.0
    dz[:, -1, :] = 0.0  # last position predicts nothing
    dz /= total_positions

    grads.embedding += flat2(dz, cfg.vocab).T @ flat2(x, cfg.d_e)
    dx = dz @ weights.embedding

    for layer in reversed(range(cfg.n_layers)):
        lw = weights.layers[layer]
        gl = grads.layers[layer]
        (y1, inv1, h, q, kh, vh, attn, o_flat, y2, inv2, h2, u, th, u2, act) = cache[layer]

        # MLP block
        gl.w_out += flat2(act, cfg.d_ff).T @ flat2(dx, cfg.d_e)
        dact = dx @ lw.w_out.T
        du = dact * _gelu_grad(u, th, u2)
        gl.w_in += flat2(h2, cfg.d_e).T @ flat2(du, cfg.d_ff)
        dh2 = du @ lw.w_in.T
        gl.ln2_gain += (dh2 * y2).sum(axis=(0, 1))
        dx2 = dx + _ln_backward(dh2 * lw.ln2_gain, y2, inv2)

        # attention block
        gl.w_o += flat2(o_flat, cfg.q_width).T @ flat2(dx2, cfg.d_e)
        do = (dx2 @ lw.w_o.T).reshape(b, t, cfg.m_h, cfg.d_h).transpose(0, 2, 1, 3)
        da = do @ vh.transpose(0, 1, 3, 2)
        dvh = attn.transpose(0, 1, 3, 2) @ do
        ds = (da - (da * attn).sum(axis=-1, keepdims=True)) * attn
        dq = ds @ kh * scale
        dkh = ds.transpose(0, 1, 3, 2) @ q * scale
        dk = dkh.reshape(b, cfg.m_g, hpg, t, cfg.d_h).sum(axis=2)
        dv = dvh.reshape(b, cfg.m_g, hpg, t, cfg.d_h).sum(axis=2)
        dqf = dq.transpose(0, 2, 1, 3).reshape(b, t, cfg.q_width)
        dkf = dk.transpose(0, 2, 1, 3).reshape(b, t, cfg.kv_width)
        dvf = dv.transpose(0, 2, 1, 3).reshape(b, t, cfg.kv_width)
        gl.w_q += flat2(h, cfg.d_e).T @ flat2(dqf, cfg.q_width)
        gl.w_k += flat2(h, cfg.d_e).T @ flat2(dkf, cfg.kv_width)
        gl.w_v += flat2(h, cfg.d_e).T @ flat2(dvf, cfg.kv_width)
        dh = dqf @ lw.w_q.T + dkf @ lw.w_k.T + dvf @ lw.w_v.T
        gl.ln1_gain += (dh * y1).sum(axis=(0, 1))
        dx = dx2 + _ln_backward(dh * lw.ln1_gain, y1, inv1)

    demb_in = np.zeros_like(weights.embedding)
    np.add.at(demb_in, tokens.reshape(-1), dx.reshape(-1, cfg.d_e))
    grads.embedding += demb_in
    return loss, grads


def train_weights(
    cfg: ModelConfig,
    weights: ModelWeights,
    corpus: Sequence,
    steps: int = 250,
    lr: float = 3e-3,
) -> list:
    """Run full-batch Adam in place; returns the per-step loss history.

    Sequences are grouped by length so every block trains (the corpus tail
    block may be shorter than the rest); sequences shorter than 2 tokens
    carry no predictions and are skipped.
    """
    groups: dict[int, list] = {}
    for seq in corpus:
        seq = np.asarray(seq, dtype=np.int64).reshape(-1)
        if seq.size >= 2:
            groups.setdefault(seq.size, []).append(seq)
    if not groups:
        raise ValueError("training needs at least one sequence of length >= 2")
    batches = [np.stack(seqs) for _, seqs in sorted(groups.items())]
    total_positions = sum(b.shape[0] * (b.shape[1] - 1) for b in batches)

    m_state = _zero_grads(cfg, weights)
    v_state = _zero_grads(cfg, weights)
    history = []
    for step in range(1, steps + 1):
        loss = 0.0
        grads = _zero_grads(cfg, weights)
        for batch in batches:
            part, g = loss_and_grads(cfg, weights, batch, total_positions)
            loss += part
            for acc, new in zip(_param_arrays(grads), _param_arrays(g)):
                acc += new
        bc1 = 1.0 - _ADAM_B1**step
        bc2 = 1.0 - _ADAM_B2**step
        for w, g, ms, vs in zip(
            _param_arrays(weights), _param_arrays(grads),
            _param_arrays(m_state), _param_arrays(v_state),
        ):
            ms *= _ADAM_B1
            ms += (1.0 - _ADAM_B1) * g
            vs *= _ADAM_B2
            vs += (1.0 - _ADAM_B2) * g * g
            w -= lr * (ms / bc1) / (np.sqrt(vs / bc2) + _ADAM_EPS)
        history.append(loss)
    return history
