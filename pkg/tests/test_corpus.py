"""Markov corpus generator and the flat u16 token file."""

import numpy as np
import pytest

from kvcore import FormatError, load_tokens, markov_corpus, save_tokens


class TestMarkovCorpus:
    def test_shapes_and_range(self):
        seqs = markov_corpus(vocab=50, n_sequences=4, seq_len=20, seed=0)
        assert len(seqs) == 4
        for s in seqs:
            assert s.shape == (20,)
            assert s.min() >= 0 and s.max() < 50

    def test_deterministic(self):
        a = markov_corpus(64, 3, 25, order=1, seed=7)
        b = markov_corpus(64, 3, 25, order=1, seed=7)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_seeds_differ(self):
        a = np.concatenate(markov_corpus(64, 3, 25, seed=1))
        b = np.concatenate(markov_corpus(64, 3, 25, seed=2))
        assert not np.array_equal(a, b)

    def test_low_concentration_repeats_more(self):
        # peaked transition rows produce fewer distinct bigrams
        def bigram_count(conc):
            seqs = markov_corpus(32, 4, 200, order=1, concentration=conc, seed=3)
            pairs = set()
            for s in seqs:
                pairs.update(zip(s[:-1], s[1:]))
            return len(pairs)

        assert bigram_count(0.01) < bigram_count(10.0)

    def test_order_zero_is_iid_from_one_distribution(self):
        seqs = markov_corpus(16, 2, 400, order=0, concentration=100.0, seed=5)
        counts = np.bincount(np.concatenate(seqs), minlength=16)
        # near-uniform Dirichlet(100): every symbol should appear
        assert np.all(counts > 0)

    def test_validation(self):
        with pytest.raises(ValueError):
            markov_corpus(1, 1, 5)
        with pytest.raises(ValueError):
            markov_corpus(10, 1, 5, order=-1)
        with pytest.raises(ValueError):
            markov_corpus(10, 1, 5, concentration=0.0)


class TestTokenFile:
    def test_round_trip_blocks(self, tmp_path):
        seqs = markov_corpus(100, 3, 17, seed=0)
        path = tmp_path / "corpus.u16"
        save_tokens(path, seqs)
        assert path.stat().st_size == 3 * 17 * 2
        back = load_tokens(path, 17)
        assert len(back) == 3
        for x, y in zip(seqs, back):
            assert np.array_equal(x, y)

    def test_rechunk_with_tail(self, tmp_path):
        path = tmp_path / "c.u16"
        save_tokens(path, [np.arange(10)])
        blocks = load_tokens(path, 4)
        assert [len(b) for b in blocks] == [4, 4, 2]
        assert np.array_equal(np.concatenate(blocks), np.arange(10))

    def test_odd_byte_count_rejected(self, tmp_path):
        path = tmp_path / "c.u16"
        path.write_bytes(b"\x01\x02\x03")
        with pytest.raises(FormatError, match="odd"):
            load_tokens(path, 4)

    def test_oversized_ids_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="u16"):
            save_tokens(tmp_path / "c.u16", [np.array([70000])])

    def test_bad_block_len(self, tmp_path):
        path = tmp_path / "c.u16"
        save_tokens(path, [np.arange(4)])
        with pytest.raises(ValueError):
            load_tokens(path, 0)
