"""NER as a compressibility dial: token diversity shapes cache rank.

Normalized effective rank = exp(entropy of the normalized singular values)
divided by the actual rank. A cache whose energy is spread evenly scores
near 1 (incompressible); one dominated by a few directions scores near
1/rank. Here a fixed decoder digests i.i.d. corpora whose token
distribution ranges from a handful of symbols to near-uniform, and the
key/value caches' NER tracks that diversity.
"""

import os
import tempfile

import numpy as np

from kvcore import (
    CovarianceAccumulator,
    Kind,
    ModelConfig,
    dump_activations,
    init_weights,
    markov_corpus,
    ner,
    read_stream,
    stream_filename,
)

cfg = ModelConfig(seed=0)
weights = init_weights(cfg)
print(f"decoder: {cfg.n_layers} layers, {cfg.m_h} heads in {cfg.m_g} groups, "
      f"kv width {cfg.kv_width}, vocab {cfg.vocab}\n")

print("concentration   distinct tokens    NER(key)   NER(value)")
for concentration in (0.005, 0.02, 0.1, 1.0, 10.0):
    corpus = markov_corpus(
        cfg.vocab, n_sequences=8, seq_len=64,
        order=0, concentration=concentration, seed=3,
    )
    distinct = len(set(np.concatenate(corpus).tolist()))
    with tempfile.TemporaryDirectory() as td:
        dump_activations(cfg, weights, corpus, td)
        ner_k, ner_v = [], []
        for layer in range(cfg.n_layers):
            for kind, bucket in ((Kind.KEY, ner_k), (Kind.VALUE, ner_v)):
                stream = read_stream(os.path.join(td, stream_filename(layer, kind)))
                spec = CovarianceAccumulator.from_stream(stream).finalize(layer, kind)
                bucket.append(ner(spec).ner)
    print(f"   {concentration:7.3f}         {distinct:5d}          "
          f"{np.mean(ner_k):.4f}     {np.mean(ner_v):.4f}")

print("\na corpus that only ever visits a few tokens exercises a few cache"
      "\ndirections, so the spectrum concentrates and NER drops: those caches"
      "\ntolerate aggressive rank truncation. Diverse corpora fill the space"
      "\nand push NER toward 1.")
