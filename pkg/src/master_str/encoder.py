"""ResNet31-style convolutional encoder with multi-aspect context blocks.

Layout per stage (default 1 x 48 x 160 input)::

    conv1_x  conv 3x3 -> 64, conv 3x3 -> 128, max-pool 2x2        -> 24 x 80
    conv2_x  residual x1 (256), context block, conv 256, pool 2x2 -> 12 x 40
    conv3_x  residual x2 (512), context block, conv 512, pool 2x1 -> 6 x 40
    conv4_x  residual x5 (512), context block, conv 512           -> 6 x 40
    conv5_x  residual x3 (512), context block, conv 512           -> 6 x 40

Every conv is followed by a layer norm over the whole C x H x W slice of
one image (per-channel affine) and a ReLU. Residual blocks use a 1x1
projection shortcut when the channel count changes. With ``identity_init``
the last norm gain of every residual branch and the output projection of
every context block start at zero, so a fresh encoder passes image content
through its depth instead of washing it out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .context import MagcParams, check_divisible, init_magc, magc_block
from .errors import ConfigurationError, ShapeError
from .tensor import Tensor

STAGE_NAMES = ("conv1_x", "conv2_x", "conv3_x", "conv4_x", "conv5_x")

# (row, height, width) of every layer in the backbone table at 48 x 160 input.
BACKBONE_ROWS = (
    ("conv1_x.conv1", 48, 160),
    ("conv1_x.conv2", 48, 160),
    ("conv1_x.pool", 24, 80),
    ("conv2_x.residual", 24, 80),
    ("conv2_x.magc", 24, 80),
    ("conv2_x.conv", 24, 80),
    ("conv2_x.pool", 12, 40),
    ("conv3_x.residual", 12, 40),
    ("conv3_x.magc", 12, 40),
    ("conv3_x.conv", 12, 40),
    ("conv3_x.pool", 6, 40),
    ("conv4_x.residual", 6, 40),
    ("conv4_x.magc", 6, 40),
    ("conv4_x.conv", 6, 40),
    ("conv5_x.residual", 6, 40),
    ("conv5_x.magc", 6, 40),
    ("conv5_x.conv", 6, 40),
)

# pooling after conv1_x .. conv3_x; the height-only pool keeps horizontal resolution
POOLS = ((2, 2), (2, 2), (2, 1), None, None)


@dataclass
class EncoderConfig:
    channels: tuple = (64, 128, 256, 512, 512, 512)
    blocks: tuple = (1, 2, 5, 3)
    magc_heads: int = 8
    ratio: int = 16
    out_channels: Optional[int] = None  # final conv width; defaults to channels[-1]
    height: int = 48
    width: int = 160
    eps: float = 1e-5
    # residual branches and context blocks start as the identity map
    identity_init: bool = True

    @classmethod
    def scaled(cls, divisor: int, **overrides) -> "EncoderConfig":
        """Desk-scale variant: every channel count divided by ``divisor``, geometry unchanged."""
        base = cls()
        chans = tuple(c // divisor for c in base.channels)
        if any(c * divisor != b for c, b in zip(chans, base.channels)):
            raise ConfigurationError(f"channel divisor {divisor} does not divide {base.channels}")
        return replace(base, channels=chans, **overrides)

    @property
    def feature_channels(self) -> int:
        return self.out_channels or self.channels[-1]

    def stage_extents(self) -> list[tuple[int, int]]:
        h, w = self.height, self.width
        out = []
        for pool in POOLS:
            if pool:
                if h % pool[0] or w % pool[1]:
                    raise ConfigurationError(f"input {self.height}x{self.width} not divisible by pooling")
                h, w = h // pool[0], w // pool[1]
            out.append((h, w))
        return out

    def validate(self) -> None:
        if len(self.channels) != 6 or len(self.blocks) != 4:
            raise ConfigurationError("encoder needs 6 channel widths and 4 residual block counts")
        if any(c < 1 for c in self.channels) or any(b < 1 for b in self.blocks):
            raise ConfigurationError("channel widths and block counts must be positive")
        for c in self.channels[2:]:
            check_divisible(c, self.magc_heads, self.ratio)
        self.stage_extents()


@dataclass
class ConvUnit:
    """conv (no bias) followed by layer norm with per-channel affine."""

    w: Tensor
    ln_g: Tensor
    ln_b: Tensor
    padding: int = 1

    def __call__(self, x: Tensor, act: bool = True, eps: float = 1e-5) -> Tensor:
        y = T.layer_norm(T.conv2d(x, self.w, None, 1, self.padding), self.ln_g, self.ln_b, eps)
        return T.relu(y) if act else y


@dataclass
class ResBlock:
    conv1: ConvUnit
    conv2: ConvUnit
    shortcut: Optional[ConvUnit] = None

    def __call__(self, x: Tensor, eps: float) -> Tensor:
        y = self.conv2(self.conv1(x, eps=eps), act=False, eps=eps)
        skip = x if self.shortcut is None else self.shortcut(x, act=False, eps=eps)
        return T.relu(T.add(y, skip))


@dataclass
class Stage:
    blocks: list
    magc: MagcParams
    conv: ConvUnit


@dataclass
class EncoderParams:
    cfg: EncoderConfig
    conv1: ConvUnit
    conv2: ConvUnit
    stages: list = field(default_factory=list)


@dataclass
class FeatureMap:
    """Encoder output ``N x C x H x W`` plus a row-major ``N x L x C`` view."""

    tensor: Tensor
    trace: list = field(default_factory=list)

    @property
    def extents(self) -> tuple[int, int]:
        return self.tensor.shape[-2], self.tensor.shape[-1]

    def sequence(self) -> Tensor:
        x = self.tensor
        if x.ndim == 3:
            c, h, w = x.shape
            return T.transpose(T.reshape(x, (c, h * w)), (1, 0))
        n, c, h, w = x.shape
        return T.transpose(T.reshape(x, (n, c, h * w)), (0, 2, 1))

    @staticmethod
    def unflatten(seq: np.ndarray, height: int, width: int) -> np.ndarray:
        """Inverse of :meth:`sequence` on raw arrays."""
        seq = np.asarray(seq)
        moved = np.moveaxis(seq, -1, -2)
        return moved.reshape(moved.shape[:-1] + (height, width))


def _conv_unit(cin: int, cout: int, k: int, rng: np.random.Generator) -> ConvUnit:
    bound = 1.0 / math.sqrt(cin * k * k)
    w = T.parameter(rng.uniform(-bound, bound, size=(cout, cin, k, k)))
    return ConvUnit(w=w, ln_g=T.parameter(np.ones((cout, 1, 1))),
                    ln_b=T.parameter(np.zeros((cout, 1, 1))), padding=k // 2)


def build_encoder(cfg: EncoderConfig, seed: int = 0) -> EncoderParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    c = cfg.channels
    params = EncoderParams(cfg=cfg, conv1=_conv_unit(1, c[0], 3, rng), conv2=_conv_unit(c[0], c[1], 3, rng))
    cin = c[1]
    for i, nblocks in enumerate(cfg.blocks):
        cout = c[i + 2]
        blocks = []
        for _ in range(nblocks):
            sc = _conv_unit(cin, cout, 1, rng) if cin != cout else None
            blocks.append(ResBlock(_conv_unit(cin, cout, 3, rng), _conv_unit(cout, cout, 3, rng), sc))
            cin = cout
        magc = init_magc(cout, cfg.magc_heads, cfg.ratio, rng)
        if cfg.identity_init:
            for blk in blocks:
                blk.conv2.ln_g.data[:] = 0.0
            if magc.transform is not None:
                magc.transform.w2.data[:] = 0.0
                magc.transform.b2.data[:] = 0.0
        last = i == len(cfg.blocks) - 1
        conv_out = cfg.feature_channels if last else cout
        params.stages.append(Stage(blocks, magc, _conv_unit(cout, conv_out, 3, rng)))
        cin = conv_out
    return params


def _expect(name: str, x: Tensor, hw: tuple[int, int], trace: list) -> None:
    got = tuple(x.shape[-2:])
    trace.append((name, tuple(x.shape[-3:])))
    if got != tuple(hw):
        raise AssertionError(f"encoder stage {name}: expected {hw[0]}x{hw[1]}, got {got[0]}x{got[1]}")


def encode(x, params: EncoderParams) -> FeatureMap:
    """Encode ``1 x H x W`` (or ``N x 1 x H x W``) images into a feature map."""
    cfg = params.cfg
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim not in (3, 4) or x.shape[-3] != 1 or x.shape[-2:] != (cfg.height, cfg.width):
        raise ShapeError(f"encoder expects 1 x {cfg.height} x {cfg.width} input, got {x.shape}")
    eps = cfg.eps
    extents = cfg.stage_extents()
    trace: list = []
    full = (cfg.height, cfg.width)

    x = params.conv1(x, eps=eps)
    _expect("conv1_x.conv1", x, full, trace)
    x = params.conv2(x, eps=eps)
    _expect("conv1_x.conv2", x, full, trace)
    x = T.max_pool2d(x, POOLS[0], POOLS[0])
    _expect("conv1_x.pool", x, extents[0], trace)

    for i, stage in enumerate(params.stages):
        name = STAGE_NAMES[i + 1]
        here = extents[i]
        for block in stage.blocks:
            x = block(x, eps)
        _expect(f"{name}.residual", x, here, trace)
        x = magc_block(x, stage.magc)
        _expect(f"{name}.magc", x, here, trace)
        x = stage.conv(x, eps=eps)
        _expect(f"{name}.conv", x, here, trace)
        pool = POOLS[i + 1]
        if pool:
            x = T.max_pool2d(x, pool, pool)
            _expect(f"{name}.pool", x, extents[i + 1], trace)
    return FeatureMap(tensor=x, trace=trace)
