"""Global context block and its multi-aspect (grouped) variant.

Both blocks pool the feature map into one context vector with a
softmax-weighted sum over all ``L = H * W`` positions, pass it through a
channel bottleneck ``C -> C/r -> C`` (1x1 conv, layer norm, ReLU, 1x1 conv),
and add the result back to every position.

The multi-aspect variant splits the channels into ``h`` contiguous groups;
each group gets its own spatial softmax with logits scaled by ``1/sqrt(C/h)``.
The pooled group vectors are concatenated before the shared bottleneck.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ShapeError
from .tensor import Tensor


@dataclass
class Bottleneck:
    """``delta(z) = w2 @ relu(LN(w1 @ z + b1)) + b2``; 1x1 convs on a 1x1 map are linear maps."""

    w1: Tensor  # (C/r, C)
    b1: Tensor  # (C/r,)
    ln_g: Tensor  # (C/r,)
    ln_b: Tensor  # (C/r,)
    w2: Tensor  # (C, C/r)
    b2: Tensor  # (C,)

    def __call__(self, z: Tensor) -> Tensor:
        hid = T.add(T.matmul(z, T.swap_last(self.w1)), self.b1)
        hid = T.relu(T.layer_norm(hid, self.ln_g, self.ln_b))
        return T.add(T.matmul(hid, T.swap_last(self.w2)), self.b2)

    @property
    def channels(self) -> int:
        return self.w1.shape[1]


@dataclass
class GcParams:
    wk: Tensor  # (1, C) spatial-logit projection
    transform: Bottleneck
    ratio: int


@dataclass
class MagcParams:
    """Parameters of a multi-aspect block; ``heads == 0`` disables the block."""

    heads: int
    wk: Optional[Tensor] = None  # (h, C/h): one logit projection per channel group
    transform: Optional[Bottleneck] = None
    ratio: int = 16
    # None -> 1/sqrt(C/h); set 1.0 to reproduce the unscaled single-context block
    logit_scale: Optional[float] = None

    @property
    def group_width(self) -> int:
        return self.wk.shape[1]


def check_divisible(channels: int, heads: int, ratio: int) -> None:
    if ratio < 1 or channels % ratio:
        raise ConfigurationError(f"bottleneck ratio {ratio} does not divide {channels} channels")
    if heads < 0 or (heads and channels % heads):
        raise ConfigurationError(f"context head count {heads} does not divide {channels} channels")


def init_bottleneck(channels: int, ratio: int, rng: np.random.Generator) -> Bottleneck:
    hidden = channels // ratio

    def uni(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return T.parameter(rng.uniform(-bound, bound, size=shape))

    return Bottleneck(
        w1=uni((hidden, channels), channels), b1=uni((hidden,), channels),
        ln_g=T.parameter(np.ones(hidden)), ln_b=T.parameter(np.zeros(hidden)),
        w2=uni((channels, hidden), hidden), b2=uni((channels,), hidden),
    )


def init_gc(channels: int, ratio: int, rng: np.random.Generator) -> GcParams:
    check_divisible(channels, 1, ratio)
    bound = 1.0 / math.sqrt(channels)
    wk = T.parameter(rng.uniform(-bound, bound, size=(1, channels)))
    return GcParams(wk=wk, transform=init_bottleneck(channels, ratio, rng), ratio=ratio)


def init_magc(channels: int, heads: int, ratio: int, rng: np.random.Generator) -> MagcParams:
    check_divisible(channels, heads, ratio)
    if heads == 0:
        return MagcParams(heads=0, ratio=ratio)
    width = channels // heads
    bound = 1.0 / math.sqrt(width)
    wk = T.parameter(rng.uniform(-bound, bound, size=(heads, width)))
    return MagcParams(heads=heads, wk=wk, transform=init_bottleneck(channels, ratio, rng), ratio=ratio)


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"context block expects C x H x W or N x C x H x W, got {x.shape}")


def pool_weights(x: Tensor, wk: Tensor, logit_scale: float) -> Tensor:
    """Per-group spatial attention weights, shape ``N x h x 1 x L``."""
    n, c, hh, ww = x.shape
    heads, width = wk.shape
    if heads * width != c:
        raise ShapeError(f"logit projection {wk.shape} does not cover {c} channels")
    groups = T.reshape(x, (n, heads, width, hh * ww))
    logits = T.matmul(T.reshape(wk, (heads, 1, width)), groups)
    return T.softmax(T.scale(logits, logit_scale), axis=-1)


def pool_context(x: Tensor, wk: Tensor, logit_scale: float) -> Tensor:
    """Concatenated per-group contexts, shape ``N x C``."""
    n, c, hh, ww = x.shape
    heads, width = wk.shape
    alpha = pool_weights(x, wk, logit_scale)
    groups = T.reshape(x, (n, heads, width, hh * ww))
    ctx = T.matmul(groups, T.swap_last(alpha))  # N x h x d_h x 1
    return T.reshape(ctx, (n, c))


def _residual(x: Tensor, ctx: Tensor) -> Tensor:
    n, c = ctx.shape
    return T.add(x, T.reshape(ctx, (n, c, 1, 1)))


def gc_block(x: Tensor, p: GcParams) -> Tensor:
    xb, single = _as_batch(x)
    check_divisible(xb.shape[1], 1, p.ratio)
    ctx = p.transform(pool_context(xb, p.wk, 1.0))
    y = _residual(xb, ctx)
    return T.reshape(y, y.shape[1:]) if single else y


def magc_scale(p: MagcParams) -> float:
    return 1.0 / math.sqrt(p.group_width) if p.logit_scale is None else p.logit_scale


def magc_attend(x: Tensor, p: MagcParams) -> Tensor:
    """Concatenation of the ``h`` group contexts (a C-vector per image)."""
    if p.heads < 1:
        raise ConfigurationError("magc_attend needs at least one context head")
    xb, single = _as_batch(x)
    check_divisible(xb.shape[1], p.heads, p.ratio)
    ctx = pool_context(xb, p.wk, magc_scale(p))
    return T.reshape(ctx, (ctx.shape[1],)) if single else ctx


def magc_block(x: Tensor, p: MagcParams) -> Tensor:
    if p.heads == 0:
        return x
    xb, single = _as_batch(x)
    check_divisible(xb.shape[1], p.heads, p.ratio)
    ctx = p.transform(pool_context(xb, p.wk, magc_scale(p)))
    y = _residual(xb, ctx)
    return T.reshape(y, y.shape[1:]) if single else y
