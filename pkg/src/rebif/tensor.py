"""Dense float64 tensors with a small reverse-mode autodiff tape.

Every feature map is a rank-4 array laid out as (n, c, h, w). Operations
record a backward closure on their output when any input requires a
gradient; ``Tensor.backward`` walks the graph in reverse topological order.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        """Backpropagate from this tensor. A scalar (size-1) output defaults to seed 1."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        backward_many([self], [grad])


def backward_many(roots: Sequence[Tensor], grads: Sequence[np.ndarray]):
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(r, False) for r in roots]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    for r, g in zip(roots, grads):
        if np.shape(g) != r.shape:
            raise ShapeError(f"seed gradient shape {np.shape(g)} != output shape {r.shape}")
        r.accumulate(g)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _result(data, parents, backward) -> Tensor:
    if _needs_grad(*parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


@contextmanager
def no_grad(tensors: Iterable[Tensor]):
    """Temporarily stop ``tensors`` from recording a backward graph."""
    tensors = list(tensors)
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in zip(tensors, saved):
            t.requires_grad = flag


def tensor4(data, requires_grad: bool = False) -> Tensor:
    t = Tensor(data, requires_grad=requires_grad)
    check4(t)
    return t


def check4(x: Tensor, name: str = "x"):
    if x.data.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")


# ---------------------------------------------------------------- convolution


@dataclass
class ConvParams:
    weight: Tensor  # (c_out, c_in, k, k)
    bias: Tensor  # (c_out,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = self.weight.data
        if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] not in (1, 3):
            raise ShapeError(f"conv weight must be (c_out, c_in, k, k) with k in {{1, 3}}, got {w.shape}")
        if self.bias.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match c_out={w.shape[0]}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    def tensors(self):
        return (self.weight, self.bias)

    @classmethod
    def zeros(cls, c_out, c_in, k, stride=1, padding=None):
        if padding is None:
            padding = k // 2
        return cls(
            Tensor(np.zeros((c_out, c_in, k, k)), requires_grad=True),
            Tensor(np.zeros(c_out), requires_grad=True),
            stride,
            padding,
        )


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integral conv output size: ({size} + 2*{padding} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation with zero padding, plus bias."""
    check4(x)
    n, c, h, w = x.shape
    if c != p.c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weights expect {p.c_in}")
    k, s, pad = p.k, p.stride, p.padding
    ho = conv_output_size(h, k, s, pad)
    wo = conv_output_size(w, k, s, pad)
    # columns are built channels-last with (ki, kj, c) ordering
    W = p.weight.data.transpose(0, 2, 3, 1).reshape(p.c_out, k * k * c)
    xh = x.data.transpose(0, 2, 3, 1)
    if k == 1 and pad == 0:
        cols = (xh[:, ::s, ::s, :] if s > 1 else xh).reshape(-1, c)
    else:
        xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
        xp[:, pad : pad + h, pad : pad + w, :] = xh
        cols = np.concatenate(
            [xp[:, i : i + s * ho : s, j : j + s * wo : s, :] for i in range(k) for j in range(k)],
            axis=-1,
        ).reshape(n * ho * wo, k * k * c)
    out = cols @ W.T + p.bias.data
    out = out.reshape(n, ho, wo, p.c_out).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, p.c_out)
        if p.weight.requires_grad:
            dW = (gm.T @ cols).reshape(p.c_out, k, k, c).transpose(0, 3, 1, 2)
            p.weight.accumulate(dW)
        if p.bias.requires_grad:
            p.bias.accumulate(gm.sum(axis=0))
        if x.requires_grad:
            dcols = (gm @ W).reshape(n, ho, wo, k * k, c)
            dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += dcols[:, :, :, i * k + j, :]
            x.accumulate(dxp[:, pad : pad + h, pad : pad + w, :].transpose(0, 3, 1, 2))

    return _result(out, (x, p.weight, p.bias), backward)


# -------------------------------------------------------------------- pooling


@dataclass
class PoolRecord:
    """Flat row-major indices (into the full input array) of each window's winner."""

    argmax_indices: np.ndarray


def maxpool2(x: Tensor) -> tuple[Tensor, PoolRecord]:
    """2x2 max-pool, stride 2. Ties go to the smallest row-major index."""
    check4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    win = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    local = win.argmax(axis=-1)  # first maximum == smallest row-major offset
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]

    dr, dc = np.divmod(local, 2)
    rows = 2 * np.arange(ho)[None, None, :, None] + dr
    cols = 2 * np.arange(wo)[None, None, None, :] + dc
    plane = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * w)
    flat = plane + rows * w + cols
    record = PoolRecord(flat)

    def backward(g):
        dx = np.zeros(x.data.size)
        dx[flat.ravel()] = g.ravel()  # windows are disjoint, so no index repeats
        x.accumulate(dx.reshape(x.shape))

    return _result(out, (x,), backward), record


def avgpool2(x: Tensor) -> Tensor:
    check4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        x.accumulate(0.25 * np.repeat(np.repeat(g, 2, axis=2), 2, axis=3))

    return _result(out, (x,), backward)


def upsample_nearest2(x: Tensor) -> Tensor:
    check4(x)
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        x.accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _result(out, (x,), backward)


# ------------------------------------------------------------- reorganization


def _to_depth(a: np.ndarray, bh: int, bw: int) -> np.ndarray:
    n, c, h, w = a.shape
    # phase (i, j) of channel ch lands at output channel ch * bh * bw + i * bw + j
    return (
        a.reshape(n, c, h // bh, bh, w // bw, bw)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, c * bh * bw, h // bh, w // bw)
    )


def _to_space(a: np.ndarray, bh: int, bw: int) -> np.ndarray:
    n, cb, h, w = a.shape
    c = cb // (bh * bw)
    return a.reshape(n, c, bh, bw, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * bh, w * bw)


def _reorg(x: Tensor, bh: int, bw: int) -> Tensor:
    check4(x)
    _, _, h, w = x.shape
    if h % bh or w % bw:
        raise ShapeError(f"space_to_depth needs spatial dims divisible by ({bh}, {bw}), got {h}x{w}")
    out = _to_depth(x.data, bh, bw)

    def backward(g):
        x.accumulate(_to_space(g, bh, bw))

    return _result(out, (x,), backward)


def _unreorg(y: Tensor, bh: int, bw: int) -> Tensor:
    check4(y, "y")
    if y.shape[1] % (bh * bw):
        raise ShapeError(f"depth_to_space needs channels divisible by {bh * bw}, got {y.shape[1]}")
    out = _to_space(y.data, bh, bw)

    def backward(g):
        y.accumulate(_to_depth(g, bh, bw))

    return _result(out, (y,), backward)


def space_to_depth2(x: Tensor) -> Tensor:
    """(n, c, h, w) -> (n, 4c, h/2, w/2).

    Channel ``4*ch + phase`` holds channel ``ch`` sampled at stride 2 from
    offset (0,0), (0,1), (1,0), (1,1) for phase 0..3.
    """
    return _reorg(x, 2, 2)


def depth_to_space2(y: Tensor) -> Tensor:
    return _unreorg(y, 2, 2)


def space_to_depth_w2(x: Tensor) -> Tensor:
    """Width-only reorganization, (n, c, h, w) -> (n, 2c, h, w/2): even then odd columns."""
    return _reorg(x, 1, 2)


def depth_to_space_w2(y: Tensor) -> Tensor:
    return _unreorg(y, 1, 2)


# ----------------------------------------------------------------- elementwise


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    for t in xs:
        check4(t)
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels mismatch: {xs[0].shape} vs {t.shape}")
    if len(xs) == 1:
        return xs[0]
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t.accumulate(g[:, lo:hi])

    return _result(out, tuple(xs), backward)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    pos = x.data >= 0
    out = np.where(pos, x.data, slope * x.data)

    def backward(g):
        x.accumulate(np.where(pos, g, slope * g))

    return _result(out, (x,), backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"add shape mismatch: {x.shape} vs {y.shape}")
    out = x.data + y.data

    def backward(g):
        if x.requires_grad:
            x.accumulate(g)
        if y.requires_grad:
            y.accumulate(g)

    return _result(out, (x, y), backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar <weights, x>; handy as a random projection loss in gradient checks."""
    weights = np.asarray(weights, dtype=DTYPE)
    out = np.array(float(np.sum(x.data * weights)))

    def backward(g):
        x.accumulate(g * weights)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------- init / rng


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Generator keyed by (seed, *keys). String keys are hashed stably."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            words.extend(key.encode("utf-8"))
            words.append(0x100)
        else:
            words.append(int(key))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def he_bound(fan_in: int) -> float:
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    return math.sqrt(6.0 / fan_in)


def he_init(shape, rng: np.random.Generator) -> np.ndarray:
    """He-uniform weights in [-sqrt(6/fan_in), sqrt(6/fan_in)], fan_in = c_in*k*k."""
    fan_in = int(np.prod(shape[1:]))
    b = he_bound(fan_in)
    return rng.uniform(-b, b, size=shape)


def init_conv(c_out, c_in, k, rng, stride=1, padding=None) -> ConvParams:
    p = ConvParams.zeros(c_out, c_in, k, stride, padding)
    p.weight.data[...] = he_init(p.weight.shape, rng)
    return p


# ---------------------------------------------------------------- grad check


def grad_check(
    f: Callable[[], Tensor],
    x: Tensor,
    step: float = 1e-6,
    coords: Iterable[int] | None = None,
    zero: Iterable[Tensor] = (),
    weights: np.ndarray | None = None,
) -> float:
    """Max relative error between the tape gradient of sum(weights * f()) wrt
    ``x`` and central differences; ``weights`` defaults to all ones.

    ``f`` is re-evaluated from scratch for every probe, so it must read
    ``x.data`` rather than a captured copy. ``coords`` restricts the probe to
    a subset of flat indices; ``zero`` lists other leaves whose gradients
    should be cleared before the analytic pass. The two probe outputs are
    differenced elementwise before the reduction, which keeps summation
    roundoff out of the numeric estimate.
    """
    was = x.requires_grad
    x.requires_grad = True
    for t in zero:
        t.zero_grad()
    x.zero_grad()
    out = f()
    w = np.ones(out.shape) if weights is None else np.broadcast_to(weights, out.shape)
    out.backward(np.array(w, dtype=DTYPE))
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    x.requires_grad = was

    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = f().data
        flat[i] = orig - step
        fm = f().data
        flat[i] = orig
        numeric = float(np.sum(w * (fp - fm))) / (2 * step)
        a = analytic.reshape(-1)[i]
        if not (math.isfinite(numeric) and math.isfinite(a)):
            raise FloatingPointError(f"non-finite value during grad check at index {i}")
        err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst


# --------------------------------------------------------------- text fixture


def dumps_tensor(x: Tensor | np.ndarray) -> str:
    a = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)
    if a.ndim != 4:
        raise ShapeError("only rank-4 tensors serialize")
    lines = [" ".join(str(d) for d in a.shape)]
    lines.append(" ".join(repr(float(v)) for v in a.ravel()))
    return "\n".join(lines) + "\n"


def loads_tensor(text: str) -> Tensor:
    head, _, body = text.strip().partition("\n")
    dims = tuple(int(t) for t in head.split())
    if len(dims) != 4 or min(dims) < 1:
        raise ShapeError(f"bad tensor header: {head!r}")
    values = np.array([float(t) for t in body.split()], dtype=DTYPE)
    if values.size != int(np.prod(dims)):
        raise ShapeError(f"expected {int(np.prod(dims))} values, found {values.size}")
    return Tensor(values.reshape(dims))
