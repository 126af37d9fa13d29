"""Shared fixtures: a tiny local GQA model + char-level tokenizer.

The sandbox has no hub access, so conformance runs against a randomly
initialized Llama-architecture model saved to disk; the extractor treats
it exactly like any hub snapshot.
"""

import pytest


def build_char_tokenizer(save_dir):
    from tokenizers import Tokenizer, models
    from tokenizers.pre_tokenizers import Split
    from transformers import PreTrainedTokenizerFast

    vocab = {chr(i): i for i in range(256)}
    vocab["<unk>"] = 256
    tok = Tokenizer(models.WordLevel(vocab=vocab, unk_token="<unk>"))
    tok.pre_tokenizer = Split("", "isolated")
    fast = PreTrainedTokenizerFast(tokenizer_object=tok, unk_token="<unk>")
    fast.save_pretrained(save_dir)


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    import torch
    from transformers import LlamaConfig, LlamaForCausalLM

    path = tmp_path_factory.mktemp("tiny-llama")
    cfg = LlamaConfig(
        hidden_size=64,
        intermediate_size=128,
        num_hidden_layers=2,
        num_attention_heads=8,
        num_key_value_heads=2,
        vocab_size=300,
        max_position_embeddings=256,
    )
    torch.manual_seed(0)
    model = LlamaForCausalLM(cfg)
    model.save_pretrained(path)
    build_char_tokenizer(path)
    return str(path)


@pytest.fixture(scope="session")
def fused_model_dir(tmp_path_factory):
    """GPT-2 fuses qkv into c_attn: no pre-rotation hook point exists."""
    import torch
    from transformers import GPT2Config, GPT2LMHeadModel

    path = tmp_path_factory.mktemp("tiny-gpt2")
    cfg = GPT2Config(
        n_embd=32, n_layer=2, n_head=4, n_positions=64, vocab_size=300
    )
    torch.manual_seed(0)
    GPT2LMHeadModel(cfg).save_pretrained(path)
    build_char_tokenizer(path)
    return str(path)


@pytest.fixture(scope="session")
def sample_text(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "sample.txt"
    # structured, repetitive text so the spectra are anisotropic
    motif = (
        "the cache remembers what the model already said. "
        "rank tells how much of it was ever new. "
    )
    path.write_text(motif * 40)
    return str(path)
