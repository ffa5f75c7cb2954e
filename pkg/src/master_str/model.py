"""Whole-model configuration, construction and parameter naming."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .decoder import DecoderConfig, DecoderParams, build_decoder, encode_memory_positions
from .encoder import EncoderConfig, EncoderParams, build_encoder, encode
from .errors import ConfigurationError
from .tensor import Tensor
from .vocab import DEFAULT_CHARSET, Vocabulary, build_vocab


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    charset: str = DEFAULT_CHARSET

    @classmethod
    def full(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def micro(cls) -> "ModelConfig":
        """Desk-scale model used by the toy end-to-end run."""
        enc = EncoderConfig.scaled(8, blocks=(1, 1, 1, 1), magc_heads=4, out_channels=128)
        dec = DecoderConfig(d_model=128, heads=4, blocks=2, d_ff=512, dropout=0.0)
        return cls(encoder=enc, decoder=dec)

    def validate(self) -> None:
        self.encoder.validate()
        self.decoder.validate()
        if self.encoder.feature_channels != self.decoder.d_model:
            raise ConfigurationError(
                f"encoder emits {self.encoder.feature_channels} channels, decoder expects "
                f"d_model={self.decoder.d_model}")
        if self.decoder.vocab_size != len(self.charset) + 4:
            raise ConfigurationError(
                f"vocab_size={self.decoder.vocab_size} but charset defines {len(self.charset) + 4} symbols")

    # flat key=value form, shared by config files and checkpoints
    def to_kv(self) -> dict:
        e, d = self.encoder, self.decoder
        return {
            "channels": ",".join(map(str, e.channels)),
            "res_blocks": ",".join(map(str, e.blocks)),
            "magc_heads": str(e.magc_heads),
            "ratio": str(e.ratio),
            "out_channels": str(e.out_channels or 0),
            "height": str(e.height),
            "width": str(e.width),
            "d_model": str(d.d_model),
            "heads": str(d.heads),
            "blocks": str(d.blocks),
            "d_ff": str(d.d_ff),
            "dropout": repr(d.dropout),
            "max_len": str(d.max_len),
            "vocab_size": str(d.vocab_size),
            "attn_scale": d.attn_scale,
            "charset": self.charset,
        }

    @classmethod
    def from_kv(cls, kv: dict, base: Optional["ModelConfig"] = None) -> "ModelConfig":
        cfg = dataclasses.replace(base) if base is not None else cls()
        enc, dec = dataclasses.replace(cfg.encoder), dataclasses.replace(cfg.decoder)
        charset = cfg.charset
        ints = lambda s: tuple(int(v) for v in s.split(","))  # noqa: E731
        try:
            for key, val in kv.items():
                if key == "channels":
                    enc.channels = ints(val)
                elif key == "res_blocks":
                    enc.blocks = ints(val)
                elif key in ("magc_heads", "ratio", "height", "width"):
                    setattr(enc, key, int(val))
                elif key == "out_channels":
                    enc.out_channels = int(val) or None
                elif key in ("d_model", "heads", "blocks", "d_ff", "max_len", "vocab_size"):
                    setattr(dec, key, int(val))
                elif key == "dropout":
                    dec.dropout = float(val)
                elif key == "attn_scale":
                    dec.attn_scale = val
                elif key == "charset":
                    charset = val
                else:
                    raise ConfigurationError(f"unknown model config key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"bad model config value: {exc}") from exc
        if "vocab_size" not in kv and "charset" in kv:
            dec.vocab_size = len(charset) + 4
        return cls(encoder=enc, decoder=dec, charset=charset)


@dataclass
class MasterModel:
    cfg: ModelConfig
    vocab: Vocabulary
    encoder: EncoderParams
    decoder: DecoderParams

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(_walk(self.encoder, "encoder")) + list(_walk(self.decoder, "decoder"))

    def memory(self, images) -> Tensor:
        """Encoder memory ``(B x) L x d`` with positional codes added."""
        fmap = encode(images, self.encoder)
        return encode_memory_positions(fmap, self.cfg.decoder.d_model)


def build_model(cfg: ModelConfig, seed: int = 0) -> MasterModel:
    cfg.validate()
    vocab = build_vocab(cfg.charset)
    seeds = np.random.SeedSequence(seed).spawn(2)
    enc = build_encoder(cfg.encoder, int(seeds[0].generate_state(1)[0]))
    dec = build_decoder(cfg.decoder, int(seeds[1].generate_state(1)[0]))
    return MasterModel(cfg=cfg, vocab=vocab, encoder=enc, decoder=dec)


def _walk(obj, prefix: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            yield prefix, obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}")
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.name == "cfg":
                continue
            yield from _walk(getattr(obj, f.name), f"{prefix}.{f.name}")


def count_parameters(model: MasterModel) -> int:
    return sum(p.size for _, p in model.named_parameters())
