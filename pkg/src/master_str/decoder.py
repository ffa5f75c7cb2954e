"""Transformer decoder: embeddings, positional codes, N post-LN blocks, classifier."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import MhaParams, attend_heads, causal_mask, init_mha, mha
from .errors import ConfigurationError, ContractError, ShapeError
from .tensor import Tensor


@dataclass
class DecoderConfig:
    d_model: int = 512
    heads: int = 8
    blocks: int = 3
    d_ff: int = 2048
    dropout: float = 0.2
    max_len: int = 50
    vocab_size: int = 66
    attn_scale: str = "head"  # "head": 1/sqrt(d/H); "model": 1/sqrt(d)
    eps: float = 1e-5

    def validate(self) -> None:
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigurationError(f"{self.heads} heads do not divide d_model={self.d_model}")
        if self.d_model % 4:
            raise ConfigurationError("d_model must be a multiple of 4 for the 2-D positional code")
        if self.blocks < 1 or self.max_len < 1 or self.d_ff < 1 or self.vocab_size < 4:
            raise ConfigurationError("blocks, max_len, d_ff must be >= 1 and vocab_size >= 4")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")


@dataclass
class FfnParams:
    w1: Tensor  # d x d_ff
    b1: Tensor
    w2: Tensor  # d_ff x d
    b2: Tensor


@dataclass
class DecoderBlock:
    self_attn: MhaParams
    cross_attn: MhaParams
    ffn: FfnParams
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ln3_g: Tensor
    ln3_b: Tensor


@dataclass
class DecoderParams:
    cfg: DecoderConfig
    embed: Tensor  # vocab x d
    blocks: list = field(default_factory=list)
    out_w: Optional[Tensor] = None  # d x vocab, shared by every position
    out_b: Optional[Tensor] = None


def build_decoder(cfg: DecoderConfig, seed: int = 0) -> DecoderParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    d, dff = cfg.d_model, cfg.d_ff

    def uni(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return T.parameter(rng.uniform(-bound, bound, size=shape))

    def ones():
        return T.parameter(np.ones(d))

    def zeros():
        return T.parameter(np.zeros(d))

    embed = T.parameter(rng.normal(0.0, 1.0 / math.sqrt(d), size=(cfg.vocab_size, d)))
    params = DecoderParams(cfg=cfg, embed=embed)
    for _ in range(cfg.blocks):
        ffn = FfnParams(uni((d, dff), d), uni((dff,), d), uni((dff, d), dff), uni((d,), dff))
        params.blocks.append(DecoderBlock(
            init_mha(d, cfg.heads, rng), init_mha(d, cfg.heads, rng), ffn,
            ones(), zeros(), ones(), zeros(), ones(), zeros()))
    params.out_w = uni((d, cfg.vocab_size), d)
    params.out_b = T.parameter(np.zeros(cfg.vocab_size))
    return params


def positional_encoding(length: int, d: int) -> np.ndarray:
    """Sinusoidal table: ``sin(pos / 10000^(2i/d))`` at column 2i, ``cos`` at 2i+1."""
    if d % 2:
        raise ContractError(f"positional code width must be even, got {d}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.empty((length, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table


def memory_positional_code(height: int, width: int, d: int) -> np.ndarray:
    """``L x d`` code for a row-major ``height x width`` grid: [row code | column code]."""
    if d % 4:
        raise ConfigurationError(f"2-D positional code needs d divisible by 4, got {d}")
    rows = positional_encoding(height, d // 2)
    cols = positional_encoding(width, d // 2)
    grid = np.concatenate([np.repeat(rows, width, axis=0), np.tile(cols, (height, 1))], axis=1)
    return grid


def encode_memory_positions(feature, d_model: int) -> Tensor:
    """Flatten an encoder feature map to ``(N x) L x d`` and add the 2-D positional code."""
    from .encoder import FeatureMap

    fmap = feature if isinstance(feature, FeatureMap) else FeatureMap(tensor=feature)
    c = fmap.tensor.shape[-3]
    if c != d_model:
        raise ConfigurationError(f"feature has {c} channels but d_model is {d_model}")
    h, w = fmap.extents
    return T.add(fmap.sequence(), Tensor(memory_positional_code(h, w, d_model)))


def ffn(x: Tensor, p: FfnParams) -> Tensor:
    hid = T.relu(T.add(T.matmul(x, p.w1), p.b1))
    return T.add(T.matmul(hid, p.w2), p.b2)


def project_memory(memory: Tensor, block: DecoderBlock) -> tuple[Tensor, Tensor]:
    """Cross-attention keys and values of the encoder memory for one block."""
    return T.matmul(memory, block.cross_attn.wk), T.matmul(memory, block.cross_attn.wv)


def embed_tokens(tokens, params: DecoderParams, offset: int = 0) -> Tensor:
    """``embedding * sqrt(d) + positional code`` for tokens at positions offset, offset+1, ..."""
    d = params.cfg.d_model
    t = np.shape(tokens)[-1]
    pe = positional_encoding(offset + t, d)[offset:]
    return T.add(T.scale(T.take_rows(params.embed, tokens), math.sqrt(d)), Tensor(pe))


def decoder_block(x: Tensor, mem_k: Tensor, mem_v: Tensor, block: DecoderBlock, cfg: DecoderConfig,
                  mask: Optional[np.ndarray], training: bool = False,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    sa = mha(x, x, x, block.self_attn, mask, cfg.attn_scale)
    x = T.layer_norm(T.add(x, sa), block.ln1_g, block.ln1_b, cfg.eps)
    ca = attend_heads(T.matmul(x, block.cross_attn.wq), mem_k, mem_v, block.cross_attn,
                      None, cfg.attn_scale)
    x = T.layer_norm(T.add(x, ca), block.ln2_g, block.ln2_b, cfg.eps)
    f = T.dropout(ffn(x, block.ffn), cfg.dropout, rng, training)
    return T.layer_norm(T.add(x, f), block.ln3_g, block.ln3_b, cfg.eps)


def classify(x: Tensor, params: DecoderParams) -> Tensor:
    return T.add(T.matmul(x, params.out_w), params.out_b)


def check_tokens(tokens: np.ndarray, cfg: DecoderConfig) -> None:
    if tokens.ndim not in (1, 2) or tokens.shape[-1] < 1:
        raise ContractError(f"token array must be (t,) or (B, t) with t >= 1, got {tokens.shape}")
    if tokens.shape[-1] > cfg.max_len:
        raise ContractError(f"sequence length {tokens.shape[-1]} exceeds max_len={cfg.max_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ContractError(f"token id out of range for vocabulary of {cfg.vocab_size}")


def decode_train(memory: Tensor, tokens, params: DecoderParams, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """Teacher-forced logits for every position of ``tokens`` (which start with SOS).

    ``memory`` is ``L x d`` with ``tokens`` of shape ``(t,)``, or ``B x L x d``
    with ``(B, t)``. Returns ``(B x) t x vocab``.
    """
    cfg = params.cfg
    tokens = np.asarray(tokens, dtype=np.int64)
    check_tokens(tokens, cfg)
    if memory.ndim != tokens.ndim + 1 or memory.shape[-1] != cfg.d_model:
        raise ShapeError(f"memory {memory.shape} does not pair with tokens {tokens.shape}")
    if training and cfg.dropout > 0 and rng is None:
        raise ContractError("training with dropout needs an rng")
    t = tokens.shape[-1]
    x = T.dropout(embed_tokens(tokens, params), cfg.dropout, rng, training)
    mask = causal_mask(t)
    for block in params.blocks:
        mem_k, mem_v = project_memory(memory, block)
        x = decoder_block(x, mem_k, mem_v, block, cfg, mask, training, rng)
    x = T.dropout(x, cfg.dropout, rng, training)
    return classify(x, params)
