"""Cross-entropy objective, Adam, the teacher-forced training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Sample, preprocess
from .decoder import decode_train
from .errors import ConfigurationError, ContractError, FormatError
from .inference import greedy_cached
from .model import MasterModel, ModelConfig, build_model
from .tensor import GradTape, Tensor
from .vocab import decode_tokens, encode_text

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if self.lr < 0 or self.adam_eps <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("learning rate/eps must be non-negative/positive, batch size >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in [0, 1)")

    def to_kv(self) -> dict:
        return {f.name: repr(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_kv(cls, kv: dict, base: Optional["TrainConfig"] = None) -> "TrainConfig":
        cfg = base or cls()
        vals = {}
        for f in fields(cls):
            if f.name in kv:
                try:
                    vals[f.name] = int(kv[f.name]) if f.type in ("int", int) else float(kv[f.name])
                except ValueError as exc:
                    raise ConfigurationError(f"bad value for {f.name}: {kv[f.name]!r}") from exc
        unknown = set(kv) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**{**{f.name: getattr(cfg, f.name) for f in fields(cls)}, **vals})


# ---------------------------------------------------------------------------
# loss and optimiser


def xent_loss(logits: Tensor, targets, pad_id: int = 0) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over non-PAD positions."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ContractError(f"logits {logits.shape} and targets {targets.shape} lengths differ")
    keep = (targets != pad_id).astype(np.float64)
    count = keep.sum()
    if count == 0:
        raise ContractError("every target position is padding")
    picked = T.pick_last(T.log_softmax(logits, axis=-1), targets)
    return T.scale(T.sum(T.mul(picked, Tensor(keep))), -1.0 / count)


def adam_update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
                lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam step; returns new ``(p, m, v)``."""
    if step < 1:
        raise ContractError("Adam step counter starts at 1")
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    mhat = m / (1 - beta1 ** step)
    vhat = v / (1 - beta2 ** step)
    return p - lr * mhat / (np.sqrt(vhat) + eps), m, v


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(named_params: Sequence[tuple[str, Tensor]], state: AdamState, cfg: TrainConfig) -> None:
    """Update every parameter that has a gradient, in place on the tensors' data."""
    state.step += 1
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p.data), np.zeros_like(p.data)
        p.data, state.m[name], state.v[name] = adam_update(
            p.data, g, m, v, state.step, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    model: MasterModel
    train_cfg: TrainConfig
    opt: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    rng: np.random.Generator = None

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.train_cfg.seed)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    token_acc: float
    seq_acc: float  # teacher-forced: every target position predicted correctly
    seconds: float = 0.0


def make_batch(samples: Sequence[Sample], model: MasterModel):
    vocab = model.vocab
    images = np.stack([preprocess(s.image) for s in samples])
    seqs = [encode_text(s.text, vocab) for s in samples]
    if any(len(s) - 1 > model.cfg.decoder.max_len for s in seqs):
        raise ContractError("transcription longer than the decoder's max_len")
    t = max(len(s) for s in seqs) - 1
    inp = np.full((len(seqs), t), vocab.pad_id, dtype=np.int64)
    tgt = np.full((len(seqs), t), vocab.pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        inp[i, :len(s) - 1] = s[:-1]
        tgt[i, :len(s) - 1] = s[1:]
    return images, inp, tgt


def batch_loss(model: MasterModel, images, inp, tgt, training: bool = False,
               rng: Optional[np.random.Generator] = None):
    memory = model.memory(Tensor(images))
    logits = decode_train(memory, inp, model.decoder, training=training, rng=rng)
    return xent_loss(logits, tgt, model.vocab.pad_id), logits


def train_epoch(state: TrainState, corpus: Sequence[Sample]) -> EpochMetrics:
    if not corpus:
        raise ContractError("training corpus is empty")
    cfg = state.train_cfg
    model = state.model
    params = model.named_parameters()
    order = state.rng.permutation(len(corpus))
    t0 = time.perf_counter()
    loss_sum = tok_ok = tok_n = seq_ok = 0.0
    for start in range(0, len(corpus), cfg.batch_size):
        batch = [corpus[i] for i in order[start:start + cfg.batch_size]]
        images, inp, tgt = make_batch(batch, model)
        for _, p in params:
            p.grad = None
        with GradTape() as tape:
            loss, logits = batch_loss(model, images, inp, tgt, training=True, rng=state.rng)
        tape.backward(loss)
        adam_step(params, state.opt, cfg)

        pred = logits.data.argmax(axis=-1)
        live = tgt != model.vocab.pad_id
        hits = (pred == tgt) & live
        loss_sum += loss.item() * len(batch)
        tok_ok += hits.sum()
        tok_n += live.sum()
        seq_ok += np.all(hits | ~live, axis=1).sum()
        tape.nodes.clear()
    for _, p in params:
        p.grad = None
    state.epoch += 1
    n = len(corpus)
    return EpochMetrics(state.epoch, loss_sum / n, tok_ok / tok_n, seq_ok / n, time.perf_counter() - t0)


def recognize(model: MasterModel, images: np.ndarray, batch_size: int = 32) -> list[str]:
    """Greedy transcriptions for a stack of preprocessed ``N x 1 x 48 x 160`` images."""
    out = []
    for start in range(0, len(images), batch_size):
        mem = model.memory(Tensor(images[start:start + batch_size]))
        for row in mem.data:
            res = greedy_cached(Tensor(row), model.decoder)
            out.append(decode_tokens(res.tokens, model.vocab))
    return out


def sequence_accuracy(model: MasterModel, samples: Sequence[Sample]) -> float:
    images = np.stack([preprocess(s.image) for s in samples])
    preds = recognize(model, images)
    return float(np.mean([p == s.text for p, s in zip(preds, samples)]))


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"MSTR"
VERSION = 1


def _state_kv(state: TrainState) -> dict:
    kv = {f"model.{k}": v for k, v in state.model.cfg.to_kv().items()}
    kv.update({f"train.{k}": v for k, v in state.train_cfg.to_kv().items()})
    kv["state.epoch"] = str(state.epoch)
    kv["state.step"] = str(state.opt.step)
    kv["state.rng"] = json.dumps(state.rng.bit_generator.state, sort_keys=True)
    return kv


def _tensors(state: TrainState) -> list[tuple[str, np.ndarray]]:
    out = []
    for name, p in state.model.named_parameters():
        out.append((f"param:{name}", p.data))
        if name in state.opt.m:
            out.append((f"adam.m:{name}", state.opt.m[name]))
            out.append((f"adam.v:{name}", state.opt.v[name]))
    return out


def dump_checkpoint(state: TrainState) -> bytes:
    kv = _state_kv(state)
    for k, v in kv.items():
        if "\n" in v or "=" in k:
            raise ContractError(f"config entry {k!r} cannot be serialised")
    text = "".join(f"{k}={v}\n" for k, v in kv.items()).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text]
    tensors = _tensors(state)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, state: TrainState) -> None:
    Path(path).write_bytes(dump_checkpoint(state))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def parse_checkpoint(buf: bytes) -> TrainState:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("not a checkpoint: bad magic bytes")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    text = r.take(r.u32("config length"), "config").decode("utf-8")
    kv = {}
    for line in text.splitlines():
        key, sep, val = line.partition("=")
        if not sep:
            raise FormatError(f"malformed checkpoint config line {line!r}")
        kv[key] = val
    try:
        model_cfg = ModelConfig.from_kv({k[6:]: v for k, v in kv.items() if k.startswith("model.")})
        train_cfg = TrainConfig.from_kv({k[6:]: v for k, v in kv.items() if k.startswith("train.")})
        epoch, step = int(kv["state.epoch"]), int(kv["state.step"])
        rng_state = json.loads(kv["state.rng"])
    except (KeyError, ValueError, ConfigurationError) as exc:
        raise FormatError(f"checkpoint config incomplete or invalid: {exc}") from exc

    tensors = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        rank = r.u32("rank")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, "extents"))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(8 * n, f"payload of {name}"), dtype="<f8").reshape(shape)
        tensors[name] = arr.astype(np.float64)
    if r.pos != len(buf):
        raise FormatError(f"trailing bytes after checkpoint payload at byte {r.pos}")

    model = build_model(model_cfg, seed=0)
    opt = AdamState(step=step)
    for name, p in model.named_parameters():
        key = f"param:{name}"
        if key not in tensors:
            raise FormatError(f"checkpoint lacks parameter {name}")
        if tensors[key].shape != p.shape:
            raise FormatError(f"parameter {name} has shape {tensors[key].shape}, config implies {p.shape}")
        p.data = tensors.pop(key)
        if f"adam.m:{name}" in tensors:
            opt.m[name] = tensors.pop(f"adam.m:{name}")
            opt.v[name] = tensors.pop(f"adam.v:{name}")
    if tensors:
        raise FormatError(f"checkpoint holds unknown tensors: {sorted(tensors)[:3]}")
    rng = np.random.default_rng()
    rng.bit_generator.state = rng_state
    return TrainState(model=model, train_cfg=train_cfg, opt=opt, epoch=epoch, rng=rng)


def load_checkpoint(path) -> TrainState:
    return parse_checkpoint(Path(path).read_bytes())
