import numpy as np
import pytest

from isinvert.corpus import synthetic_corpus
from isinvert.model import MicroLMConfig, train_lm
from isinvert.tokenizer import ByteBPETokenizer


@pytest.fixture(scope="session")
def small_corpus():
    return synthetic_corpus(300, seed=0)


@pytest.fixture(scope="session")
def small_tok(small_corpus):
    return ByteBPETokenizer.train(small_corpus, 300)


@pytest.fixture(scope="session")
def tiny_cfg():
    return MicroLMConfig(vocab_size=300, d_model=16, n_layers=2, n_heads=2, max_seq_len=64)


@pytest.fixture(scope="session")
def tiny_model(small_corpus, small_tok, tiny_cfg):
    """A lightly trained 2-layer model; cheap enough for unit tests."""
    return train_lm(small_corpus, tiny_cfg, steps=30, lr=3e-3, tokenizer=small_tok, batch_size=4, seq_len=32)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
