import sys

import numpy as np
import pytest

from kinject.data import KnowledgeSample, render
from kinject.model import DecoderConfig, EncoderConfig, init_models

TINY_DEC = dict(n_layers=3, d_model=16, n_heads=2, d_mlp=32, max_context=128)
TINY_ENC = dict(n_blocks=1, d_enc=8, n_heads_enc=2, layer_subset=(1, 2))


def tiny_models(seed=0, dtype=None, **enc_kw):
    ecfg = EncoderConfig(**{**TINY_ENC, **enc_kw})
    return init_models(DecoderConfig(**TINY_DEC), ecfg, seed, dtype)


def randomize(bank, seed=1, scale=0.3):
    """Give encoders non-trivial outputs (fresh ones emit exact zeros)."""
    rng = np.random.default_rng(seed)
    for p in bank.parameters():
        p.data[...] = (rng.standard_normal(p.data.shape) * scale).astype(p.data.dtype)


SAMPLES = [
    KnowledgeSample(["abc is XYZ"], "what is abc?", "XYZ"),
    KnowledgeSample(["k1 is A", "k2 is BB"], "what is k2?", "BB"),
    KnowledgeSample([], "hello", "world"),
]


@pytest.fixture
def tiny():
    return tiny_models()


@pytest.fixture
def rendered():
    return [render(s) for s in SAMPLES]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
