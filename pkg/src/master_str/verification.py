"""Gradient-check and shape-conformance suites shared by the CLI and the tests."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import attend, causal_mask, init_mha, mha
from .context import gc_block, init_gc, init_magc, magc_block
from .decoder import DecoderConfig, FfnParams, build_decoder, decode_train, ffn
from .encoder import BACKBONE_ROWS, EncoderConfig, build_encoder, encode
from .tensor import Tensor, grad_check
from .training import xent_loss

GRAD_TOL = 1e-4


def _weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    return T.sum(T.mul(y, Tensor(w)))


def check_wrt(build: Callable[[dict], Tensor], tensors: dict, rng: np.random.Generator) -> float:
    """Max grad_check error of ``sum(R * build(tensors))`` w.r.t. each named tensor in turn."""
    out_shape = build(tensors).shape
    weights = rng.normal(size=out_shape)
    worst = 0.0
    for name in tensors:
        def f(x, name=name):
            return _weighted_sum(build({**tensors, name: x}), weights)
        worst = max(worst, grad_check(f, tensors[name]))
    return worst


def _gc_case(rng):
    p = init_gc(8, 2, rng)
    x = Tensor(rng.normal(size=(8, 4, 5)))
    tb = p.transform
    ts = {"x": x, "wk": p.wk, "w1": tb.w1, "ln_g": tb.ln_g, "w2": tb.w2}

    def build(t):
        q = init_gc(8, 2, np.random.default_rng(0))
        q.wk, q.transform.w1, q.transform.ln_g, q.transform.w2 = t["wk"], t["w1"], t["ln_g"], t["w2"]
        q.transform.b1, q.transform.ln_b, q.transform.b2 = tb.b1, tb.ln_b, tb.b2
        return gc_block(t["x"], q)
    return build, ts


def _magc_case(rng):
    p = init_magc(8, 2, 2, rng)
    x = Tensor(rng.normal(size=(8, 4, 5)))
    tb = p.transform
    ts = {"x": x, "wk": p.wk, "w1": tb.w1, "b2": tb.b2}

    def build(t):
        q = init_magc(8, 2, 2, np.random.default_rng(0))
        q.wk, q.transform.w1, q.transform.b2 = t["wk"], t["w1"], t["b2"]
        q.transform.b1, q.transform.ln_g, q.transform.ln_b, q.transform.w2 = \
            tb.b1, tb.ln_g, tb.ln_b, tb.w2
        return magc_block(t["x"], q)
    return build, ts


def _attend_case(rng):
    ts = {k: Tensor(rng.normal(size=s)) for k, s in
          (("q", (5, 4)), ("k", (5, 4)), ("v", (5, 6)))}
    mask = causal_mask(5)
    return (lambda t: attend(t["q"], t["k"], t["v"], mask)), ts


def _mha_case(rng):
    p = init_mha(8, 2, rng)
    ts = {"q": Tensor(rng.normal(size=(4, 8))), "kv": Tensor(rng.normal(size=(6, 8))),
          "wq": p.wq, "wk": p.wk, "wv": p.wv, "wo": p.wo}

    def build(t):
        q = init_mha(8, 2, np.random.default_rng(0))
        q.wq, q.wk, q.wv, q.wo = t["wq"], t["wk"], t["wv"], t["wo"]
        return mha(t["q"], t["kv"], t["kv"], q)
    return build, ts


def _ffn_case(rng):
    ts = {"x": Tensor(rng.normal(size=(5, 4))), "w1": Tensor(rng.normal(size=(4, 8))),
          "b1": Tensor(rng.normal(size=8)), "w2": Tensor(rng.normal(size=(8, 4))),
          "b2": Tensor(rng.normal(size=4))}
    return (lambda t: ffn(t["x"], FfnParams(t["w1"], t["b1"], t["w2"], t["b2"]))), ts


def _layer_norm_case(rng):
    ts = {"x": Tensor(rng.normal(size=(3, 4, 5))), "g": Tensor(rng.normal(size=(4, 1))),
          "b": Tensor(rng.normal(size=(4, 1)))}
    return (lambda t: T.layer_norm(t["x"], t["g"], t["b"])), ts


def _conv_case(rng):
    ts = {"x": Tensor(rng.normal(size=(2, 5, 6))), "w": Tensor(rng.normal(size=(3, 2, 3, 3))),
          "b": Tensor(rng.normal(size=3))}
    return (lambda t: T.conv2d(t["x"], t["w"], t["b"], stride=1, padding=1)), ts


def _decoder_case(rng):
    cfg = DecoderConfig(d_model=8, heads=2, blocks=2, d_ff=8, dropout=0.0, max_len=8, vocab_size=8)
    params = build_decoder(cfg, seed=int(rng.integers(2**31)))
    memory = Tensor(rng.normal(size=(6, 8)))
    inp = np.array([1, 4, 5, 6, 7])
    tgt = np.array([4, 5, 6, 7, 2])
    blk = params.blocks[-1]
    ts = {"memory": memory, "embed": params.embed, "self.wq": params.blocks[0].self_attn.wq,
          "cross.wk": blk.cross_attn.wk, "ffn.w1": blk.ffn.w1, "ln3_g": blk.ln3_g, "out_w": params.out_w}

    def build(t):
        params.embed = t["embed"]
        params.blocks[0].self_attn.wq = t["self.wq"]
        blk.cross_attn.wk, blk.ffn.w1, blk.ln3_g = t["cross.wk"], t["ffn.w1"], t["ln3_g"]
        params.out_w = t["out_w"]
        return T.reshape(xent_loss(decode_train(t["memory"], inp, params), tgt), (1,))
    return build, ts


GRAD_CASES = {
    "gc_block": _gc_case,
    "magc_block": _magc_case,
    "attend": _attend_case,
    "mha": _mha_case,
    "ffn": _ffn_case,
    "layer_norm": _layer_norm_case,
    "conv2d": _conv_case,
    "decoder+loss": _decoder_case,
}


def gradcheck_suite(seed: int = 0) -> dict[str, float]:
    """Max finite-difference relative error per component."""
    out = {}
    for i, (name, case) in enumerate(GRAD_CASES.items()):
        rng = np.random.default_rng([seed, i])
        build, tensors = case(rng)
        out[name] = check_wrt(build, tensors, rng)
    return out


@dataclass
class ShapeReport:
    rows: list  # (row name, expected (h, w), got (c, h, w))
    final: tuple

    @property
    def ok(self) -> bool:
        return all(exp == got[1:] for _, exp, got in self.rows)


def shape_conformance(cfg: EncoderConfig = None, seed: int = 0) -> ShapeReport:
    """Encode a 1 x 48 x 160 image and compare every intermediate extent with the backbone table."""
    cfg = cfg or EncoderConfig()
    params = build_encoder(cfg, seed)
    img = np.random.default_rng(seed).random((1, cfg.height, cfg.width))
    fmap = encode(Tensor(img), params)
    got = dict(fmap.trace)
    rows = [(name, (h, w), got.get(name, (0, 0, 0))) for name, h, w in BACKBONE_ROWS]
    return ShapeReport(rows, tuple(fmap.tensor.shape))
