"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are plain functions over :class:`Tensor`. When a :class:`GradTape`
is active on the current thread and any operand requires a gradient, the
operation appends a backward rule to the tape. ``tape.backward(loss)`` then
replays the rules in reverse recording order.

Broadcasting is deliberately narrow: elementwise binary ops only accept a
right operand that broadcasts onto the left operand's shape (bias add, the
context-vector add of the global context blocks, masks). ``matmul`` follows
numpy batch broadcasting.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractError, ShapeError

Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An n-dimensional float64 array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not self.is_finite():
            raise FloatingPointError(f"{what} contains NaN or Inf")
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar, restricted to the same narrow broadcasting rules
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional["GradTape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of differentiable operations on one thread.

    Use as a context manager; operations executed inside the block are
    recorded, and :meth:`backward` accumulates gradients into ``.grad`` of
    every tensor that requires one.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("GradTape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Backward) -> None:
        self.nodes.append(_Node(tuple(inputs), output, backward))

    def backward(self, loss: Tensor, seed: Optional[np.ndarray] = None) -> None:
        if seed is None:
            if loss.size != 1:
                raise ContractError(f"backward from non-scalar output of shape {loss.shape}")
            seed = np.ones_like(loss.data)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                inp.grad = gi if inp.grad is None else inp.grad + gi


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Backward) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req:
        tape = current_tape()
        if tape is not None:
            tape.record(inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_onto(a: Tensor, b: Tensor, op: str) -> None:
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        out = None
    if out != a.shape:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_onto(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_onto(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_onto(a, b, "mul")

    def backward(g):
        ga = g * b.data if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    on = x.data > 0
    return _make(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), xs, backward)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; used for token embedding lookup."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"take_rows: index out of range for table with {table.shape[0]} rows")

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _make(table.data[ids], (table,), backward)


def pick_last(x: Tensor, ids) -> Tensor:
    """out[..., ] = x[..., ids[...]] along the last axis."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != x.shape[:-1]:
        raise ShapeError(f"pick_last: index shape {ids.shape} vs {x.shape}")
    idx = ids[..., None]

    def backward(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, idx, g[..., None], axis=-1)
        return (out,)

    return _make(np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), backward)


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: batch dimensions disagree for {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# normalisation and softmax


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the trailing ``gamma.ndim`` axes, then apply ``gamma * x_hat + beta``.

    ``gamma``/``beta`` extents must equal the normalised extents or be 1 (a
    per-channel affine over a C x H x W slice uses shape ``(C, 1, 1)``).
    """
    k = gamma.ndim
    if k == 0 or k > x.ndim or gamma.shape != beta.shape:
        raise ShapeError(f"layer_norm: affine shape {gamma.shape} incompatible with {x.shape}")
    tail = x.shape[-k:]
    if any(gs not in (1, xs) for gs, xs in zip(gamma.shape, tail)):
        raise ShapeError(f"layer_norm: affine shape {gamma.shape} does not match {tail}")
    axes = tuple(range(x.ndim - k, x.ndim))
    n = int(np.prod(tail))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.sum(axis=axes, keepdims=True) / n
                        - xhat * (gh * xhat).sum(axis=axes, keepdims=True) / n)
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gbeta = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gbeta

    return _make(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# convolution and pooling


def _pair(v) -> tuple:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ConfigurationError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_extent(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if stride < 1 or span < 0 or span % stride:
        raise ConfigurationError(
            f"conv extent {n} with kernel {k}, stride {stride}, padding {pad} is not integral")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation over ``C x H x W`` or ``N x C x H x W`` input."""
    single = x.ndim == 3
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks for input {x.shape} and kernel {w.shape}")
    xd = x.data[None] if single else x.data
    n, c, h, wd = xd.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel {w.shape} expects {ci}")
    if b is not None and b.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {b.shape} vs {co} output channels")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho = conv_output_extent(h, kh, sh, ph)
    wo = conv_output_extent(wd, kw, sw, pw)

    # channel-major im2col: rows are (kh, kw, C_in), columns (N, H', W'); every
    # copy moves contiguous image rows
    xp = np.zeros((c, n, h + 2 * ph, wd + 2 * pw))
    xp[:, :, ph:ph + h, pw:pw + wd] = xd.transpose(1, 0, 2, 3)
    hs, ws = sh * (ho - 1) + 1, sw * (wo - 1) + 1
    cols = np.empty((kh, kw, c, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xp[:, :, i:i + hs:sh, j:j + ws:sw]
    cols = cols.reshape(kh * kw * c, n * ho * wo)
    del xp
    wmat = w.data.transpose(0, 2, 3, 1).reshape(co, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(co, n, ho, wo).transpose(1, 0, 2, 3))
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        gm = g4.transpose(1, 0, 2, 3).reshape(co, -1)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (gm @ cols.T).reshape(co, kh, kw, c).transpose(0, 3, 1, 2)
        if b is not None and b.requires_grad:
            gb = gm.sum(axis=1)
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape(kh, kw, c, n, ho, wo)
            gxp = np.zeros((c, n, h + 2 * ph, wd + 2 * pw))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + hs:sh, j:j + ws:sw] += gcols[i, j]
            gx = np.ascontiguousarray(gxp[:, :, ph:ph + h, pw:pw + wd].transpose(1, 0, 2, 3))
            if single:
                gx = gx[0]
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, backward)


def max_pool2d(x: Tensor, kernel, stride) -> Tensor:
    """Windowed maximum; the gradient goes to the first maximal element of each window."""
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    if min(kh, kw, sh, sw) < 1:
        raise ConfigurationError(f"max_pool2d: kernel {kernel} and stride {stride} must be positive")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    n, c, h, wd = xd.shape
    if h < kh or wd < kw or (h - kh) % sh or (wd - kw) % sw:
        raise ConfigurationError(
            f"max_pool2d: kernel {kernel}/stride {stride} does not tile a {h}x{wd} map")
    ho, wo = (h - kh) // sh + 1, (wd - kw) // sw + 1
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    flat = win.reshape(n, c, ho, wo, kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                hit = arg == i * kw + j
                gx[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += g4 * hit
        return (gx[0] if single else gx,)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Largest ``|analytic - central difference| / max(1, |analytic|)`` over coordinates of ``x``."""
    probe = Tensor(x.data.copy(), requires_grad=True)
    with GradTape() as tape:
        y = f(probe)
    if y.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {y.shape}")
    tape.backward(y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    base = x.data.copy()
    numeric = np.empty_like(base)
    flat, nflat = base.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f(Tensor(base)).data)
        flat[i] = orig - eps
        down = float(f(Tensor(base)).data)
        flat[i] = orig
        nflat[i] = (up - down) / (2 * eps)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
