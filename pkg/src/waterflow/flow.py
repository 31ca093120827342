"""Hybrid invertible blocks and the enhancement flow.

One block is ``[squeeze] -> actnorm -> 1x1 conv -> prior injector ->
conditional affine coupling``. The stack runs the same parameters in both
directions: ``forward`` maps an underwater image towards its clear
counterpart and ``inverse`` maps a clear image back.

Squeezed channels stay grouped by input channel (colour). Each coupling
passes one colour group through unchanged and transforms the others, and the
pass-through colour rotates from block to block. The coupling nets emit one
scale and one shift field per colour, and these are expanded smoothly onto
that colour's sub-pixel channels. Actnorm and the 1x1 mixing likewise share
their parameters across the sub-pixels of a colour. Splitting a colour's
sub-pixels between the two halves, or giving each sub-pixel channel its own
field or offset, treats neighbouring pixels differently and shows up as
stripe or checkerboard artefacts.

Log-determinants are tracked per sample as plain numpy values. They are
exposed for verification only and never enter a training loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as G
from .nn import ConvStack, Module, expand_subpixels, param
from .prng import Xoshiro256


class FlowError(RuntimeError):
    pass


class Actnorm(Module):
    """``y = s * (x + b)`` per channel.

    With ``group > 1`` one scale and bias is shared by each run of ``group``
    consecutive channels (the sub-pixels of one colour)."""

    def __init__(self, channels: int, dtype=np.float32, group: int = 1):
        if channels % group:
            raise FlowError(f"{channels} channels do not split into groups of {group}")
        self.group = group
        self.scale = param(np.ones(channels // group), dtype)
        self.bias = param(np.zeros(channels // group), dtype)
        self.initialized = False

    def _grouped(self, shape):
        n, c, h, w = shape
        return (n, c // self.group, self.group * h, w)

    def initialize(self, x: np.ndarray, eps: float = 1e-6) -> None:
        """Data-dependent init: the batch ``x`` maps to zero mean, unit variance."""
        x = x.reshape(self._grouped(x.shape))
        m = x.mean(axis=(0, 2, 3))
        sd = x.std(axis=(0, 2, 3))
        self.bias.data = (-m).astype(self.bias.dtype)
        self.scale.data = (1.0 / (sd + eps)).astype(self.scale.dtype)
        self.initialized = True

    def _check(self):
        if np.any(np.abs(self.scale.data) < 1e-12):
            raise FlowError("actnorm scale too close to zero; layer is not invertible")

    def _expand(self, v: G.Tensor, shape) -> G.Tensor:
        return G.broadcast_to(G.reshape(v, (1, -1, 1, 1)), shape)

    def log_det(self, x_shape) -> np.ndarray:
        n = x_shape[0]
        hw = int(np.prod(x_shape[2:])) * self.group
        return np.full(n, hw * np.sum(np.log(np.abs(self.scale.data.astype(np.float64)))))

    def forward(self, x: G.Tensor) -> tuple[G.Tensor, np.ndarray]:
        self._check()
        g = G.reshape(x, self._grouped(x.shape))
        y = self._expand(self.scale, g.shape) * (g + self._expand(self.bias, g.shape))
        return G.reshape(y, x.shape), self.log_det(x.shape)

    def inverse(self, y: G.Tensor) -> tuple[G.Tensor, np.ndarray]:
        self._check()
        g = G.reshape(y, self._grouped(y.shape))
        x = g / self._expand(self.scale, g.shape) - self._expand(self.bias, g.shape)
        return G.reshape(x, y.shape), -self.log_det(y.shape)


def random_orthogonal(c: int, rng: Xoshiro256) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal_array((c, c)))
    return q * np.sign(np.diag(r))[None, :]


class Inv1x1(Module):
    """Invertible 1x1 convolution (a channel mixing matrix).

    With ``group > 1`` the matrix mixes groups of ``group`` consecutive
    channels and acts identically on every position within a group, i.e. the
    full mixing matrix is ``kron(W, I_group)``."""

    def __init__(self, channels: int, rng: Xoshiro256 | None = None, dtype=np.float32,
                 group: int = 1):
        if channels % group:
            raise FlowError(f"{channels} channels do not split into groups of {group}")
        self.group = group
        c = channels // group
        w = np.eye(c) if rng is None else random_orthogonal(c, rng)
        self.weight = param(w, dtype)

    def log_det(self, x_shape) -> np.ndarray:
        sign, logabs = np.linalg.slogdet(self.weight.data.astype(np.float64))
        if sign == 0 or logabs < np.log(1e-8):
            raise FlowError("1x1 convolution weight is singular (|det W| < 1e-8)")
        return np.full(x_shape[0], int(np.prod(x_shape[2:])) * self.group * logabs)

    def _mix(self, w: G.Tensor, x: G.Tensor) -> G.Tensor:
        if self.group == 1:
            return G.channel_matmul(w, x)
        n, c, h, wd = x.shape
        g = G.reshape(x, (n, c // self.group, self.group * h, wd))
        return G.reshape(G.channel_matmul(w, g), x.shape)

    def forward(self, x: G.Tensor) -> tuple[G.Tensor, np.ndarray]:
        ld = self.log_det(x.shape)
        return self._mix(self.weight, x), ld

    def inverse(self, y: G.Tensor) -> tuple[G.Tensor, np.ndarray]:
        ld = self.log_det(y.shape)
        return self._mix(G.matrix_inverse(self.weight), y), -ld


def _check_prior(B: G.Tensor, T: G.Tensor, shape) -> None:
    if T.shape != tuple(shape) or B.shape != tuple(shape):
        raise FlowError(f"prior shapes {B.shape}/{T.shape} do not match features {tuple(shape)}")
    if not (np.isfinite(T.data).all() and np.isfinite(B.data).all()):
        raise FlowError("non-finite prior maps")
    if np.any(T.data < 1.0):
        raise FlowError("reciprocal transmission T must be >= 1")


def hpi_forward(u: G.Tensor, B: G.Tensor, T: G.Tensor) -> tuple[G.Tensor, np.ndarray]:
    """``T * u + B * (1 - T)``."""
    _check_prior(B, T, u.shape)
    y = T * u + B * (1.0 - T)
    return y, np.log(T.data.astype(np.float64)).reshape(u.shape[0], -1).sum(axis=1)


def hpi_inverse(y: G.Tensor, B: G.Tensor, T: G.Tensor) -> tuple[G.Tensor, np.ndarray]:
    """``(y - B * (1 - T)) / T``."""
    _check_prior(B, T, y.shape)
    u = (y - B * (1.0 - T)) / T
    return u, -np.log(T.data.astype(np.float64)).reshape(y.shape[0], -1).sum(axis=1)


def identity_prior(shape, dtype) -> tuple[G.Tensor, G.Tensor]:
    return G.Tensor(np.full(shape, 0.5, dtype=dtype)), G.Tensor(np.ones(shape, dtype=dtype))


class Coupling(Module):
    """Conditional affine coupling.

    A contiguous block of ``keep`` channels passes through; the remaining
    channels ``u2`` become ``scale * u2 + shift`` with ``scale =
    sigmoid(phi(u1, fA(cond))) + 0.5`` and ``shift = rho(u1, fB(cond))``.
    The bounded positive scale keeps the map invertible whatever the networks
    output. ``keep`` is ``(start, count)``; the default is the first half.

    With ``field_level`` set, channels are colour groups of ``4**field_level``
    squeezed sub-pixels and the nets emit one field per transformed colour,
    expanded smoothly onto its sub-pixels (see ``expand_subpixels``).
    """

    def __init__(self, channels: int, cond_channels: int, hidden: int,
                 rng: Xoshiro256, dtype=np.float32, keep: tuple[int, int] | None = None,
                 field_level: int | None = None):
        if channels % 2:
            raise FlowError(f"coupling needs an even channel count, got {channels}")
        start, count = keep if keep is not None else (0, channels // 2)
        if count <= 0 or count >= channels or start < 0 or start + count > channels:
            raise FlowError(f"bad pass-through block {keep} for {channels} channels")
        self.channels = channels
        self.sizes = [start, count, channels - start - count]
        moved = channels - count
        self.field_level = field_level
        if field_level is not None:
            group = 4 ** field_level
            if count % group or moved % group:
                raise FlowError(f"pass-through block {keep} does not align with colour groups of {group}")
            moved //= group
        self.f_a = ConvStack([cond_channels, hidden, hidden], rng, dtype, relu_last=True, pad_mode="edge")
        self.f_b = ConvStack([cond_channels, hidden, hidden], rng, dtype, relu_last=True, pad_mode="edge")
        self.phi = ConvStack([count + hidden, hidden, moved], rng, dtype, zero_last=True, pad_mode="edge")
        self.rho = ConvStack([count + hidden, hidden, moved], rng, dtype, zero_last=True, pad_mode="edge")

    def condition(self, cond: G.Tensor) -> tuple[G.Tensor, G.Tensor]:
        return self.f_a(cond), self.f_b(cond)

    def _scale_shift(self, u1: G.Tensor, feats) -> tuple[G.Tensor, G.Tensor]:
        fa, fb = feats
        if fa.shape[0] != u1.shape[0] or fa.shape[2:] != u1.shape[2:]:
            raise FlowError("condition features are not aligned with the flow features")
        raw_scale = self.phi(G.concat([u1, fa]))
        shift = self.rho(G.concat([u1, fb]))
        if self.field_level is not None:
            raw_scale = expand_subpixels(raw_scale, self.field_level)
            shift = expand_subpixels(shift, self.field_level)
        return G.sigmoid(raw_scale) + 0.5, shift

    def _parts(self, x: G.Tensor):
        """(pass-through block, transformed channels)."""
        if x.shape[1] != self.channels:
            raise FlowError(f"coupling expects {self.channels} channels, got {x.shape[1]}")
        pre, mid, post = self.sizes
        if pre == 0:
            return tuple(G.split(x, [mid, post], axis=1))
        if post == 0:
            a, b = G.split(x, [pre, mid], axis=1)
            return b, a
        a, b, c = G.split(x, self.sizes, axis=1)
        return b, G.concat([a, c])

    def _join(self, keep: G.Tensor, moved: G.Tensor) -> G.Tensor:
        pre, _, post = self.sizes
        if pre == 0:
            return G.concat([keep, moved])
        if post == 0:
            return G.concat([moved, keep])
        a, c = G.split(moved, [pre, post], axis=1)
        return G.concat([a, keep, c])

    def forward(self, u: G.Tensor, feats) -> tuple[G.Tensor, np.ndarray]:
        u1, u2 = self._parts(u)
        scale, shift = self._scale_shift(u1, feats)
        v = self._join(u1, scale * u2 + shift)
        ld = np.log(scale.data.astype(np.float64)).reshape(u.shape[0], -1).sum(axis=1)
        return v, ld

    def inverse(self, v: G.Tensor, feats) -> tuple[G.Tensor, np.ndarray]:
        v1, v2 = self._parts(v)
        scale, shift = self._scale_shift(v1, feats)
        u = self._join(v1, (v2 - shift) / scale)
        ld = np.log(scale.data.astype(np.float64)).reshape(v.shape[0], -1).sum(axis=1)
        return u, -ld


class Block(Module):
    def __init__(self, channels: int, cond_channels: int, hidden: int, rng: Xoshiro256,
                 squeeze: bool, dtype=np.float32, orthogonal: bool = True,
                 keep: tuple[int, int] | None = None, field_level: int | None = None):
        self.squeeze = squeeze
        group = 1 if field_level is None else 4 ** field_level
        self.actnorm = Actnorm(channels, dtype, group)
        self.inv1x1 = Inv1x1(channels, rng if orthogonal else None, dtype, group)
        self.coupling = Coupling(channels, cond_channels, hidden, rng, dtype, keep=keep,
                                 field_level=field_level)


@dataclass
class FlowContext:
    """Side information for one batch: per-block coupling condition features
    and injector priors. Built once from the underwater image and shared by
    both directions."""

    feats: list
    priors: list


@dataclass
class FlowTrace:
    total_log_det: np.ndarray
    layers: list = field(default_factory=list)  # (block, layer name, increment)


class FlowStack(Module):
    """N hybrid invertible blocks.

    With ``squeeze_per_block=False`` the input is squeezed once before block 1
    and unsqueezed after block N; otherwise every block squeezes on entry and
    the output is unsqueezed N times.
    """

    LAYERS = ("actnorm", "inv1x1", "hpi", "coupling")

    def __init__(self, n_blocks: int = 3, in_channels: int = 3, cond_channels: int = 5,
                 hidden: int = 16, squeeze_per_block: bool = False, seed: int = 1,
                 dtype=np.float32, orthogonal: bool = False, data_init: bool = False,
                 colour_fields: bool = True):
        if not 1 <= n_blocks <= 5:
            raise FlowError("block count must be within 1..5")
        rng = Xoshiro256(seed)
        self.n_blocks = n_blocks
        self.in_channels = in_channels
        self.cond_channels = cond_channels
        self.squeeze_per_block = squeeze_per_block
        self.dtype = np.dtype(dtype)
        # a single-channel input has no colour groups to rotate through
        self.colour_fields = colour_fields and in_channels > 1
        self.blocks = []
        for i in range(n_blocks):
            lv = self.levels[i]
            group = 4 ** lv
            if self.colour_fields:
                keep, field_level = (group * (i % in_channels), group), lv
            else:
                keep, field_level = None, None
            self.blocks.append(Block(in_channels * group, cond_channels * group, hidden, rng,
                                     squeeze=squeeze_per_block or i == 0, dtype=dtype,
                                     orthogonal=orthogonal, keep=keep, field_level=field_level))
        # without data-dependent init every actnorm starts as the identity
        self.data_init = data_init
        if not data_init:
            self.mark_initialized()

    @property
    def levels(self) -> list[int]:
        """Number of squeezes applied before each block."""
        if self.squeeze_per_block:
            return list(range(1, self.n_blocks + 1))
        return [1] * self.n_blocks

    @property
    def block_channels(self) -> list[int]:
        return [self.in_channels * 4 ** lv for lv in self.levels]

    def check_input(self, x_shape, data=None) -> None:
        if data is not None and not np.isfinite(data).all():
            raise FlowError("non-finite values in the flow input")
        div = 2 ** max(self.levels)
        if x_shape[-1] % div or x_shape[-2] % div:
            raise FlowError(f"spatial size {x_shape[-2:]} not divisible by {div}")

    # --- side information ----------------------------------------------------
    def condition_pyramid(self, cond: G.Tensor) -> list[G.Tensor]:
        """Squeeze the condition image to each block's resolution."""
        self.check_input(cond.shape)
        out = []
        cur, done = cond, 0
        for lv in self.levels:
            while done < lv:
                cur = G.squeeze2x(cur)
                done += 1
            out.append(cur)
        return out

    def context(self, cond: G.Tensor, priors=None) -> FlowContext:
        pyramid = self.condition_pyramid(cond)
        feats = [b.coupling.condition(c) for b, c in zip(self.blocks, pyramid)]
        if priors is None:
            priors = [None] * self.n_blocks
        if len(priors) != self.n_blocks:
            raise FlowError("one prior pair per block is required")
        return FlowContext(feats, list(priors))

    def _prior(self, ctx: FlowContext, i: int, shape):
        p = ctx.priors[i]
        return identity_prior(shape, self.dtype) if p is None else p

    # --- directions ----------------------------------------------------------
    def _run(self, name: str, fn, i: int, trace: FlowTrace, *args):
        try:
            out, ld = fn(*args)
        except G.NonFiniteError as exc:
            raise FlowError(f"non-finite values in block {i} layer '{name}' ({exc})") from None
        trace.layers.append((i, name, ld))
        trace.total_log_det = trace.total_log_det + ld
        return out

    def forward(self, x: G.Tensor, ctx: FlowContext, trace: bool = False):
        """Returns ``(y, total_log_det)`` or ``(y, FlowTrace)`` with ``trace``.

        In training mode (gradients enabled) with ``data_init`` the first call
        initialises each actnorm from the incoming batch."""
        self.check_input(x.shape, x.data)
        tr = FlowTrace(np.zeros(x.shape[0]))
        h = x
        for i, blk in enumerate(self.blocks):
            if blk.squeeze:
                h = G.squeeze2x(h)
            if not blk.actnorm.initialized:
                if not (self.data_init and G.is_grad_enabled()):
                    raise FlowError(f"actnorm of block {i} is not initialised")
                blk.actnorm.initialize(h.data)
            h = self._run("actnorm", blk.actnorm.forward, i, tr, h)
            h = self._run("inv1x1", blk.inv1x1.forward, i, tr, h)
            B, T = self._prior(ctx, i, h.shape)
            h = self._run("hpi", hpi_forward, i, tr, h, B, T)
            h = self._run("coupling", blk.coupling.forward, i, tr, h, ctx.feats[i])
        for blk in reversed(self.blocks):
            if blk.squeeze:
                h = G.unsqueeze2x(h)
        return h, (tr if trace else tr.total_log_det)

    def inverse(self, y: G.Tensor, ctx: FlowContext, trace: bool = False):
        self.check_input(y.shape, y.data)
        tr = FlowTrace(np.zeros(y.shape[0]))
        h = y
        for blk in self.blocks:
            if blk.squeeze:
                h = G.squeeze2x(h)
        for i in reversed(range(self.n_blocks)):
            blk = self.blocks[i]
            h = self._run("coupling", blk.coupling.inverse, i, tr, h, ctx.feats[i])
            B, T = self._prior(ctx, i, h.shape)
            h = self._run("hpi", hpi_inverse, i, tr, h, B, T)
            h = self._run("inv1x1", blk.inv1x1.inverse, i, tr, h)
            h = self._run("actnorm", blk.actnorm.inverse, i, tr, h)
            if blk.squeeze:
                h = G.unsqueeze2x(h)
        return h, (tr if trace else tr.total_log_det)

    def mark_initialized(self) -> None:
        for blk in self.blocks:
            blk.actnorm.initialized = True
