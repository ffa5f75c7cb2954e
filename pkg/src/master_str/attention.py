"""Scaled dot-product attention, multi-head attention and the causal mask."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, ShapeError
from .tensor import Tensor

# additive logit for hidden positions
MASK_FILL = -1e9


@dataclass
class MhaParams:
    """Projections for ``heads`` attention heads.

    ``wq``/``wk``/``wv`` are ``d x d``; columns ``i*d/H:(i+1)*d/H`` hold head
    ``i``'s ``d x d/H`` projection. ``wo`` maps the concatenated heads back.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    def __post_init__(self):
        d = self.wq.shape[0]
        if self.heads < 1 or d % self.heads:
            raise ConfigurationError(f"{self.heads} heads do not divide model width {d}")
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be {d}x{d}, got {getattr(self, name).shape}")

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    @property
    def head_width(self) -> int:
        return self.width // self.heads


def init_mha(d: int, heads: int, rng: np.random.Generator) -> MhaParams:
    """Xavier-uniform projections (variance 1/d for a d x d map)."""
    bound = math.sqrt(3.0 / d)

    def uni():
        return T.parameter(rng.uniform(-bound, bound, size=(d, d)))

    return MhaParams(uni(), uni(), uni(), uni(), heads)


def causal_mask(t: int) -> np.ndarray:
    """``t x t`` boolean mask; ``mask[i, j]`` is True when query ``i`` may see key ``j``."""
    if t < 1:
        raise ContractError(f"causal mask length must be >= 1, got {t}")
    return np.tril(np.ones((t, t), dtype=bool))


def mask_bias(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ShapeError(f"attention mask must be 2-D, got {mask.shape}")
    if not mask.any(axis=1).all():
        raise ContractError("attention mask hides every key from some query")
    return np.where(mask, 0.0, MASK_FILL)


def attend(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None,
           scale: Optional[float] = None) -> Tensor:
    """``softmax(q k^T * scale) v`` over the last two axes; leading axes are batch.

    ``scale`` defaults to ``1/sqrt(width of q)``.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attend: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    logits = T.scale(T.matmul(q, T.swap_last(k)), scale)
    if mask is not None:
        if np.shape(mask) != (q.shape[-2], k.shape[-2]):
            raise ShapeError(f"attend: mask {np.shape(mask)} vs {q.shape[-2]}x{k.shape[-2]} logits")
        logits = T.add(logits, Tensor(mask_bias(mask)))
    return T.matmul(T.softmax(logits, axis=-1), v)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``(..., t, d) -> (..., H, t, d/H)``."""
    *lead, t, d = x.shape
    y = T.reshape(x, (*lead, t, heads, d // heads))
    n = len(lead)
    return T.transpose(y, (*range(n), n + 1, n, n + 2))


def merge_heads(x: Tensor) -> Tensor:
    """Inverse of :func:`split_heads`."""
    *lead, h, t, dh = x.shape
    n = len(lead)
    y = T.transpose(x, (*range(n), n + 1, n, n + 2))
    return T.reshape(y, (*lead, t, h * dh))


def head_scale(params: MhaParams, mode: str = "head") -> float:
    """Logit scale: ``"head"`` uses the projected width d/H, ``"model"`` the full width d."""
    if mode == "head":
        return 1.0 / math.sqrt(params.head_width)
    if mode == "model":
        return 1.0 / math.sqrt(params.width)
    raise ConfigurationError(f"unknown attention scale mode {mode!r}")


def attend_heads(q: Tensor, k: Tensor, v: Tensor, params: MhaParams,
                 mask: Optional[np.ndarray] = None, scale_mode: str = "head") -> Tensor:
    """Attention over already-projected ``q``/``k``/``v`` (width d), then the output projection."""
    h = params.heads
    heads = attend(split_heads(q, h), split_heads(k, h), split_heads(v, h), mask,
                   head_scale(params, scale_mode))
    return T.matmul(merge_heads(heads), params.wo)


def mha(q: Tensor, k: Tensor, v: Tensor, params: MhaParams,
        mask: Optional[np.ndarray] = None, scale_mode: str = "head") -> Tensor:
    d = params.width
    if q.shape[-1] != d or k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(f"mha: inputs must have width {d}")
    return attend_heads(T.matmul(q, params.wq), T.matmul(k, params.wk), T.matmul(v, params.wv),
                        params, mask, scale_mode)
