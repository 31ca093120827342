"""Dense tensors with reverse-mode automatic differentiation.

Images are laid out batch-first, channels-first (N x C x H x W). Every
operation records a node on the output tensor when at least one input
requires a gradient; ``backward`` replays those nodes in reverse execution
order exactly once and then frees them.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes or a scalar on one side. Anything else goes through the explicit
``broadcast_to`` op so every gradient reduction is visible in the graph.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class GradError(RuntimeError):
    """Raised for invalid graph usage (non-scalar loss, bad shapes, ...)."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str, where: str | None = None):
        self.op = op
        self.where = where
        msg = f"non-finite values produced by '{op}'"
        if where:
            msg += f" ({where})"
        super().__init__(msg)


_state = threading.local()
_seq = itertools.count()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


def is_grad_enabled() -> bool:
    return _grad_enabled()


@contextmanager
def no_grad():
    """Disable graph recording inside the block (thread-local)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One executed operation: kind, inputs, and the closure computing
    input gradients from the output gradient. Saved intermediates live in
    the closure."""

    __slots__ = ("op", "inputs", "backward", "seq")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.seq = next(_seq)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # --- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise GradError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self) -> None:
        backward(self)

    # --- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# --- graph plumbing -----------------------------------------------------------

def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(op)


def _make(data: np.ndarray, op: str, inputs: tuple, backward_fn: Callable) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled() and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _coerce_pair(a, b, op: str) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = _as_tensor(b, a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    if a.dtype != b.dtype:
        raise GradError(f"{op}: mixed precision {a.dtype} vs {b.dtype}")
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise GradError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.size == 1 and b.size == 1 and a.shape != b.shape and a.ndim and b.ndim:
        raise GradError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    """Undo scalar broadcasting in a gradient."""
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(t.shape)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf with ``requires_grad``.

    Calling backward twice without zeroing accumulates; the graph is freed
    after the first call so intermediate results act as leaves afterwards.
    """
    if loss.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data)
    if loss.node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    # gather reachable nodes; sequence numbers give execution order
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in nodes:
            continue
        nodes[id(t)] = t
        for inp in t.node.inputs:
            if isinstance(inp, Tensor) and inp.requires_grad and inp.node is not None:
                stack.append(inp)
    order = sorted(nodes.values(), key=lambda t: t.node.seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): seed}
    for out in order:
        g = grads.pop(id(out), None)
        node = out.node
        out.node = None
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


# --- elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "add")
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_reduce_to(g * bd, a) if a.requires_grad else None,
                            _reduce_to(g * ad, b) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "div")
    ad, bd = a.data, b.data
    if (a.requires_grad or b.requires_grad) and _grad_enabled() and np.any(bd == 0):
        raise GradError("div: zero denominator with gradient requested")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bw(g):
        ga = _reduce_to(g / bd, a) if a.requires_grad else None
        gb = _reduce_to(-g * out / bd, b) if b.requires_grad else None
        return ga, gb

    return _make(out, "div", (a, b), bw)


def _unary(x: Tensor, op: str, value: np.ndarray, deriv: Callable[[], np.ndarray]) -> Tensor:
    return _make(value, op, (x,), lambda g: (g * deriv(),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _unary(x, "exp", out, lambda: out)


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        if x.requires_grad and _grad_enabled():
            raise GradError("log: non-positive input with gradient requested")
        raise NonFiniteError("log", "non-positive input")
    return _unary(x, "log", np.log(xd), lambda: 1.0 / xd)


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return _unary(x, "sigmoid", out, lambda: out * (1.0 - out))


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return _unary(x, "softplus", np.logaddexp(0.0, xd).astype(xd.dtype),
                  lambda: _stable_sigmoid(xd))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _unary(x, "tanh", out, lambda: 1.0 - out * out)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return _make(np.where(mask, xd, 0).astype(xd.dtype), "relu", (x,), lambda g: (g * mask,))


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient is 1 on the closed interval, 0 outside."""
    xd = x.data
    out = np.clip(xd, lo, hi)
    inside = np.ones(xd.shape, dtype=bool)
    if lo is not None:
        inside &= xd >= lo
    if hi is not None:
        inside &= xd <= hi
    return _make(out, "clamp", (x,), lambda g: (g * inside,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    xd = x.data
    return _unary(x, "abs", np.abs(xd), lambda: np.sign(xd))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _unary(x, "square", xd * xd, lambda: 2.0 * xd)


def sqrt(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd < 0):
        raise NonFiniteError("sqrt", "negative input")
    out = np.sqrt(xd)
    if x.requires_grad and _grad_enabled() and np.any(out == 0):
        raise GradError("sqrt: zero input with gradient requested")
    return _unary(x, "sqrt", out, lambda: 0.5 / out)


def power(x: Tensor, k: float) -> Tensor:
    """``x ** k`` for a constant exponent; ``x`` must be non-negative."""
    xd = x.data
    if np.any(xd < 0):
        raise NonFiniteError("power", "negative base")
    out = xd ** k
    return _unary(x, "power", out, lambda: k * xd ** (k - 1) if k != 0 else np.zeros_like(xd))


def maximum(a, b) -> Tensor:
    """max(a, b) = b + relu(a - b)."""
    return add(b, relu(sub(a, b)))


def minimum(a, b) -> Tensor:
    """min(a, b) = a - relu(a - b)."""
    return sub(a, relu(sub(a, b)))


# --- reductions -------------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), "sum", (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = np.mean(x.data, axis=axes, keepdims=keepdims)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).astype(x.dtype),)

    return _make(np.asarray(out, dtype=x.dtype), "mean", (x,), bw)


def variance(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divides by the element count)."""
    m = mean(x, axis=axis, keepdims=True)
    centered = sub(x, broadcast_to(m, x.shape))
    return mean(square(centered), axis=axis, keepdims=keepdims)


def norm2(x: Tensor, axis=None) -> Tensor:
    """Euclidean norm; the gradient at the origin is taken as zero."""
    axes = _norm_axes(axis, x.ndim)
    xd = x.data
    out = np.sqrt(np.sum(xd * xd, axis=axes))

    def bw(g):
        o = np.expand_dims(out, axes)
        safe = np.where(o > 0, o, 1.0)
        return (np.expand_dims(g, axes) * np.where(o > 0, xd / safe, 0.0),)

    return _make(np.asarray(out, dtype=xd.dtype), "norm2", (x,), bw)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; ``x`` must have the target rank with 1s to expand."""
    shape = tuple(shape)
    if x.ndim != len(shape):
        raise GradError(f"broadcast_to: rank mismatch {x.shape} -> {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s != t)
    for i in axes:
        if x.shape[i] != 1:
            raise GradError(f"broadcast_to: cannot expand {x.shape} to {shape}")
    out = np.broadcast_to(x.data, shape)
    return _make(out, "broadcast_to", (x,),
                 lambda g: (g.sum(axis=axes, keepdims=True),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def index(x: Tensor, idx) -> Tensor:
    """Fancy/basic indexing with scatter-add backward."""
    out = np.asarray(x.data[idx])

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, "index", (x,), bw)


# --- layout -------------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) != 1:
        raise GradError("concat: mixed precision")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]
    return _make(out, "concat", tuple(tensors),
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(x: Tensor, sections: int | Sequence[int], axis: int = 1) -> list[Tensor]:
    """Split along ``axis`` into equal parts (int) or the given sizes."""
    n = x.shape[axis]
    if isinstance(sections, int):
        if n % sections:
            raise GradError(f"split: {n} channels not divisible by {sections}")
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if np.sum(sizes) != n:
            raise GradError(f"split: sizes {sizes} do not cover {n}")
    outs = []
    start = 0
    for s in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + s)
        sl = tuple(sl)

        def bw(g, sl=sl):
            full = np.zeros_like(x.data)
            full[sl] = g
            return (full,)

        outs.append(_make(x.data[sl], "split", (x,), bw))
        start += s
    return outs


def _squeeze_np(a: np.ndarray) -> np.ndarray:
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise GradError(f"squeeze2x needs even spatial dims, got {h}x{w}")
    a = a.reshape(n, c, h // 2, 2, w // 2, 2)
    return a.transpose(0, 1, 3, 5, 2, 4).reshape(n, c * 4, h // 2, w // 2)


def _unsqueeze_np(a: np.ndarray) -> np.ndarray:
    n, c, h, w = a.shape
    if c % 4:
        raise GradError(f"unsqueeze2x needs channels divisible by 4, got {c}")
    a = a.reshape(n, c // 4, 2, 2, h, w)
    return a.transpose(0, 1, 4, 2, 5, 3).reshape(n, c // 4, h * 2, w * 2)


def squeeze2x(x: Tensor) -> Tensor:
    """Space-to-depth: c x h x w -> 4c x h/2 x w/2. Output channel ``4k + 2i + j``
    holds input channel ``k`` at offsets (i, j) within each 2x2 cell."""
    return _make(_squeeze_np(x.data), "squeeze2x", (x,), lambda g: (_unsqueeze_np(g),))


def unsqueeze2x(x: Tensor) -> Tensor:
    return _make(_unsqueeze_np(x.data), "unsqueeze2x", (x,), lambda g: (_squeeze_np(g),))


def avgpool2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise GradError(f"avgpool2x needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * np.asarray(0.25, g.dtype),)

    return _make(out, "avgpool2x", (x,), bw)


# --- convolution -----------------------------------------------------------------------

def _fold_edge(dxp: np.ndarray, p: int, h: int, w: int) -> np.ndarray:
    """Adjoint of edge padding: border gradients return to the edge pixels."""
    d = dxp.copy()
    d[:, :, p, :] += d[:, :, :p, :].sum(axis=2)
    d[:, :, p + h - 1, :] += d[:, :, p + h:, :].sum(axis=2)
    d = d[:, :, p:p + h, :]
    d[:, :, :, p] += d[:, :, :, :p].sum(axis=3)
    d[:, :, :, p + w - 1] += d[:, :, :, p + w:].sum(axis=3)
    return np.ascontiguousarray(d[:, :, :, p:p + w])


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, pad_mode: str = "zero") -> Tensor:
    """Cross-correlation of an N x C x H x W batch (a 3-D input is treated as
    a batch of one and returned 3-D). ``pad_mode`` is ``"zero"`` or ``"edge"``
    (replicate the border pixels)."""
    if pad_mode not in ("zero", "edge"):
        raise GradError(f"conv2d: unknown pad_mode {pad_mode!r}")
    squeeze_batch = x.ndim == 3
    if squeeze_batch:
        x = reshape(x, (1,) + x.shape)
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c:
        raise GradError(f"conv2d: input has {c} channels, weight expects {ci}")
    if k != k2 or k % 2 == 0:
        raise GradError("conv2d: kernel must be square with odd size")
    if x.dtype != weight.dtype:
        raise GradError("conv2d: mixed precision")
    p, s = padding, stride
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    if ho <= 0 or wo <= 0:
        raise GradError("conv2d: kernel larger than padded input")
    wmat = weight.data.reshape(o, c * k * k)

    if k == 1 and p == 0 and s == 1:
        cols = None
        xr = x.data.reshape(n, c, h * w)
        out = np.matmul(wmat, xr).reshape(n, o, h, w)
    else:
        mode = "edge" if pad_mode == "edge" else "constant"
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode=mode) if p else x.data
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        # rows: (n, ho, wo); cols: (c, ki, kj)
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
        out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if cols is None:
            gr = g.reshape(n, o, h * w)
            if weight.requires_grad:
                gw = np.einsum("noq,ncq->oc", gr, xr).reshape(weight.shape)
            if x.requires_grad:
                gx = np.matmul(wmat.T, gr).reshape(n, c, h, w)
            return gx, gw, gb
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
            dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if not p:
                gx = dxp
            elif pad_mode == "edge":
                gx = _fold_edge(dxp, p, h, w)
            else:
                gx = dxp[:, :, p:p + h, p:p + w]
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    res = _make(out, "conv2d", inputs, bw)
    if squeeze_batch:
        res = reshape(res, res.shape[1:])
    return res


def channel_matmul(weight: Tensor, x: Tensor) -> Tensor:
    """Multiply every pixel's channel vector by a c x c matrix."""
    c = weight.shape[0]
    return conv2d(x, reshape(weight, (c, weight.shape[1], 1, 1)))


def matrix_inverse(w: Tensor) -> Tensor:
    """Inverse through LAPACK's LU with partial pivoting (gesv)."""
    wd = w.data
    try:
        inv = np.linalg.solve(wd, np.eye(wd.shape[0], dtype=wd.dtype))
    except np.linalg.LinAlgError as exc:
        raise GradError(f"matrix_inverse: singular matrix ({exc})") from None

    def bw(g):
        return (-(inv.T @ g @ inv.T),)

    return _make(inv, "matrix_inverse", (w,), bw)


# --- optimisation ------------------------------------------------------------------------

def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: dict,
              lr: float | Sequence[float], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """One bias-corrected Adam update, in place on ``params``.

    ``state`` holds ``m``, ``v`` (lists aligned with params) and step ``t``;
    it is created on first use and returned. ``lr`` is one rate or one per
    parameter.
    """
    if len(params) != len(grads):
        raise GradError("adam_step: params and grads differ in length")
    if not state:
        state["m"] = [np.zeros_like(p.data) for p in params]
        state["v"] = [np.zeros_like(p.data) for p in params]
        state["t"] = 0
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    lrs = [lr] * len(params) if np.isscalar(lr) else list(lr)
    if len(lrs) != len(params):
        raise GradError("adam_step: one learning rate per parameter expected")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape or state["m"][i].shape != p.shape:
            raise GradError(f"adam_step: shape mismatch for parameter {i}")
        m = state["m"][i]
        v = state["v"][i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = (p.data - lrs[i] * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    return state


class Adam:
    """Thin stateful wrapper around ``adam_step``."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr, self.betas[0], self.betas[1], self.eps)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(np.sum([np.sum(p.grad.astype(np.float64) ** 2) for p in params]))) if params else 0.0
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = (p.grad * scale).astype(p.grad.dtype)
    return total


# --- verification -----------------------------------------------------------------------------

def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``fn()`` with respect to ``x``."""
    if not x.data.flags.c_contiguous or not x.data.flags.writeable:
        x.data = x.data.copy()
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              tol: float = 1e-4) -> float:
    """Compare analytic and central-difference gradients for each input.

    Returns the worst ``|analytic - numeric| / max(1, |analytic|)``; raises
    ``AssertionError`` when it exceeds ``tol``.
    """
    for t in inputs:
        t.grad = None
    loss = fn()
    backward(loss)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(fn, t, h)
        err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
        worst = max(worst, float(err.max()) if err.size else 0.0)
    if worst >= tol:
        raise AssertionError(f"gradient mismatch: worst relative error {worst:.3e} >= {tol:.1e}")
    return worst
