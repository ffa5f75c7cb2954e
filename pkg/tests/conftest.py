import numpy as np
import pytest

from master_str.decoder import DecoderConfig
from master_str.encoder import EncoderConfig
from master_str.model import ModelConfig


def tiny_config(dropout: float = 0.1) -> ModelConfig:
    """Smallest sensible full model; keeps training tests to seconds."""
    enc = EncoderConfig.scaled(16, magc_heads=2, ratio=4, out_channels=32, blocks=(1, 1, 1, 1))
    dec = DecoderConfig(d_model=32, heads=2, blocks=1, d_ff=64, dropout=dropout, max_len=12, vocab_size=14)
    return ModelConfig(encoder=enc, decoder=dec, charset="0123456789")


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
