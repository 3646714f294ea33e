import numpy as np
import pytest
import torch

from conmamba_asr.decoder import DecoderConfig
from conmamba_asr.encoder import EncoderConfig
from conmamba_asr.model import ASRModel, ModelConfig


def tiny_config(vocab_size=12, d_model=16, enc_layers=2, dec_layers=2, heads=4, n_mels=20, dropout=0.0):
    enc = EncoderConfig(num_layers=enc_layers, d_model=d_model, d_ff=2 * d_model, conv_kernel=5,
                        subsample_channels=4, n_mels=n_mels, d_state=4, dropout=dropout)
    dec = DecoderConfig(num_layers=dec_layers, num_heads=heads, d_model=d_model, d_ff=2 * d_model,
                        vocab_size=vocab_size, d_state=4, dropout=dropout)
    return ModelConfig(enc, dec, "tiny")


def randomize_(module, scale=0.3, seed=0):
    """Overwrite every parameter with noise so that no branch is trivially zero."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return module


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return ASRModel(tiny_config()).double().eval()


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    from conmamba_asr.data import make_toy_corpus

    root = tmp_path_factory.mktemp("toy")
    return root, make_toy_corpus(root, n_utts=24, seed=3, n_other=6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# (criterion number, line) pairs appended by test_acceptance.py
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES, key=lambda item: item[0]):
            terminalreporter.write_line(line)
