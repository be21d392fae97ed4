import numpy as np
import pytest

from caslm.architecture import ArchDescriptor, ModelConfig, build_model
from caslm.tokenizer import TokenizedCorpus


def tiny_config(vocab_size=11, hidden=8, heads=2, max_len=8, dropout=0.0):
    return ModelConfig(
        vocab_size=vocab_size, hidden=hidden, heads=heads, max_len=max_len,
        embed_dropout=dropout, attn_dropout=dropout, resid_dropout=dropout,
        lstm_dropout=dropout, head_dropout=dropout,
    )


def tiny_model(seed=0, descriptor=None, **kw):
    d = descriptor or ArchDescriptor(
        num_blocks=2, lstm_position="last", lstm_count=1, has_output_linear=True,
        head_kind="mos", mos_components=3,
    )
    return build_model(d, tiny_config(**kw), np.random.default_rng(seed))


def randomize(model, rng, std=0.3):
    """Push parameters away from the small init so every gradient is well above noise."""
    for name, p in model.named_parameters():
        if name.endswith("ln1.gain") or name.endswith("ln2.gain"):
            p.data = 1.0 + rng.normal(0, std, p.shape)
        else:
            p.data = rng.normal(0, std, p.shape)


def random_corpus(vocab_size=20, sizes=(600, 120, 120), seed=0):
    rng = np.random.default_rng(seed)
    parts = [rng.integers(0, vocab_size, n) for n in sizes]
    return TokenizedCorpus(*parts, vocab_size=vocab_size)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
