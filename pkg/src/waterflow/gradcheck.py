"""Float64 central-difference checks for every differentiable op and loss.

Each case builds a scalar function of a few random inputs; non-scalar ops
are reduced by a dot product with a fixed random tensor. Inputs to kinked
ops (relu, abs, clamp, min/max) are kept away from their kinks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ndgrad as G
from .detect import Box, det_loss, focal_loss, giou_loss
from .flow import Actnorm, Coupling, FlowStack, Inv1x1, hpi_forward, hpi_inverse
from .perception import (EnhanceLosses, FeatureExtractor, LossWeights, bilateral_l1,
                         contrastive_loss, style_loss, total_loss)
from .nn import expand_subpixels
from .physics import HpeNet
from .prng import Xoshiro256

F64 = np.float64


@dataclass
class CaseResult:
    name: str
    trials: int
    worst: float
    passed: bool
    seconds: float


def _rand(rng: np.random.Generator, *shape, lo=-1.0, hi=1.0) -> G.Tensor:
    return G.Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _away(rng, *shape, gap=0.1) -> G.Tensor:
    """Values in [-1, -gap] U [gap, 1]."""
    v = rng.uniform(gap, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    return G.Tensor(v, requires_grad=True)


def _dot(y: G.Tensor, r: np.ndarray) -> G.Tensor:
    return G.sum(y * G.Tensor(r))


def _proj(rng, fn: Callable[[], G.Tensor], inputs):
    """Reduce a tensor-valued ``fn`` to a scalar with a fixed random weight."""
    with G.no_grad():
        shape = fn().shape
    r = rng.standard_normal(shape)
    return (lambda: _dot(fn(), r)), inputs


def _small_params(module, limit=6, max_size=200):
    """A few of the smaller parameters; conv weights themselves are covered
    by the conv cases, so the layer cases stay cheap."""
    ps = [p for _, p in module.named_parameters() if p.size <= max_size]
    return ps[:limit]


def _perturb(module, rng, scale=0.1):
    for _, p in module.named_parameters():
        p.data = p.data + scale * rng.standard_normal(p.data.shape)
        p.requires_grad = True


# --- case builders: rng -> (scalar fn, inputs) ---------------------------------------------

def _binary(op, positive_b=False):
    def build(rng):
        a = _rand(rng, 2, 3, 4)
        b = G.Tensor(rng.uniform(0.5, 2.0, (2, 3, 4)) * (1 if positive_b else rng.choice([-1, 1], (2, 3, 4))),
                     requires_grad=True)
        return _proj(rng, lambda: op(a, b), [a, b])
    return build


def _unary(op, lo=-2.0, hi=2.0, kink=False):
    def build(rng):
        x = _away(rng, 3, 5) if kink else _rand(rng, 3, 5, lo=lo, hi=hi)
        return _proj(rng, lambda: op(x), [x])
    return build


def _minmax(op):
    def build(rng):
        a = _rand(rng, 4, 5)
        gap = rng.uniform(0.1, 0.5, (4, 5)) * rng.choice([-1.0, 1.0], (4, 5))
        b = G.Tensor(a.data + gap, requires_grad=True)
        return _proj(rng, lambda: op(a, b), [a, b])
    return build


def _clamp(rng):
    v = rng.uniform(-2, 2, (4, 5))
    v[np.abs(np.abs(v) - 1.0) < 0.1] = 0.3
    x = G.Tensor(v, requires_grad=True)
    return _proj(rng, lambda: G.clamp(x, -1.0, 1.0), [x])


def _reduction(op, **kw):
    def build(rng):
        x = _rand(rng, 2, 3, 4, 4)
        return _proj(rng, lambda: op(x, **kw), [x])
    return build


def _norm2(rng):
    x = _rand(rng, 3, 6)
    return _proj(rng, lambda: G.norm2(x, axis=1), [x])


def _broadcast(rng):
    x = _rand(rng, 1, 3, 1, 1)
    return _proj(rng, lambda: G.broadcast_to(x, (2, 3, 4, 4)), [x])


def _reshape(rng):
    x = _rand(rng, 2, 3, 4)
    return _proj(rng, lambda: G.reshape(x, (6, 4)), [x])


def _index(rng):
    x = _rand(rng, 2, 5, 3)
    idx = (np.array([0, 1, 1, 0]), np.array([4, 2, 2, 0]), np.array([1, 0, 0, 2]))
    return _proj(rng, lambda: G.index(x, idx), [x])


def _concat(rng):
    a, b = _rand(rng, 2, 2, 3, 3), _rand(rng, 2, 4, 3, 3)
    return _proj(rng, lambda: G.concat([a, b], axis=1), [a, b])


def _split(rng):
    x = _rand(rng, 2, 6, 3, 3)
    r = [rng.standard_normal((2, k, 3, 3)) for k in (1, 2, 3)]

    def fn():
        parts = G.split(x, [1, 2, 3], axis=1)
        return _dot(parts[0], r[0]) + _dot(parts[1], r[1]) * 2.0 + _dot(parts[2], r[2])
    return fn, [x]


def _squeeze(rng):
    x = _rand(rng, 2, 3, 4, 6)
    return _proj(rng, lambda: G.squeeze2x(x), [x])


def _unsqueeze(rng):
    x = _rand(rng, 2, 12, 2, 3)
    return _proj(rng, lambda: G.unsqueeze2x(x), [x])


def _avgpool(rng):
    x = _rand(rng, 2, 3, 4, 6)
    return _proj(rng, lambda: G.avgpool2x(x), [x])


def _conv(k, stride, padding, bias=True, pad_mode="zero"):
    def build(rng):
        x = _rand(rng, 2, 3, 6, 6)
        w = _rand(rng, 4, 3, k, k)
        b = _rand(rng, 4) if bias else None
        inputs = [x, w] + ([b] if bias else [])
        return _proj(rng, lambda: G.conv2d(x, w, b, stride=stride, padding=padding, pad_mode=pad_mode), inputs)
    return build


def _channel_matmul(rng):
    w = _rand(rng, 4, 4)
    x = _rand(rng, 2, 4, 3, 3)
    return _proj(rng, lambda: G.channel_matmul(w, x), [w, x])


def _matrix_inverse(rng):
    w = G.Tensor(np.eye(4) + 0.3 * rng.standard_normal((4, 4)), requires_grad=True)
    return _proj(rng, lambda: G.matrix_inverse(w), [w])


# flow layers: gradients with respect to the input and to every parameter

def _layer_case(make, direction):
    def build(rng):
        layer = make(rng)
        _perturb(layer, rng)
        x = _rand(rng, 2, 4, 3, 3)
        params = [p for _, p in layer.named_parameters()]
        fn = (lambda: getattr(layer, direction)(x)[0])
        return _proj(rng, fn, [x] + params)
    return build


def _actnorm(rng):
    a = Actnorm(4, F64)
    a.initialized = True
    return a


def _inv1x1(rng):
    return Inv1x1(4, Xoshiro256(int(rng.integers(1, 2**31))), F64)


def _actnorm_grouped(rng):
    a = Actnorm(4, F64, group=2)
    a.initialized = True
    return a


def _inv1x1_grouped(rng):
    return Inv1x1(4, Xoshiro256(int(rng.integers(1, 2**31))), F64, group=2)


def _expand(rng):
    x = _rand(rng, 2, 3, 2, 3)
    return _proj(rng, lambda: expand_subpixels(x, 2), [x])


def _hpi(direction):
    def build(rng):
        u = _rand(rng, 2, 4, 3, 3)
        B = _rand(rng, 2, 4, 3, 3, lo=0.1, hi=0.9)
        T = _rand(rng, 2, 4, 3, 3, lo=1.0, hi=3.0)
        op = hpi_forward if direction == "forward" else hpi_inverse
        return _proj(rng, lambda: op(u, B, T)[0], [u, B, T])
    return build


def _coupling(direction, field_level=None):
    def build(rng):
        keep = None if field_level is None else (4, 4)
        c = Coupling(12 if field_level else 4, 3, 4, Xoshiro256(int(rng.integers(1, 2**31))), F64,
                     keep=keep, field_level=field_level)
        _perturb(c, rng)
        n, hw = (2, 3) if field_level is None else (1, 2)
        u = _rand(rng, n, c.channels, hw, hw)
        cond = _rand(rng, n, 3, hw, hw)
        params = _small_params(c)

        def fn():
            feats = c.condition(cond)
            return getattr(c, direction)(u, feats)[0]
        return _proj(rng, fn, [u, cond] + params)
    return build


def _stack(direction):
    def build(rng):
        s = FlowStack(2, 3, 5, 4, seed=int(rng.integers(1, 2**31)), dtype=F64)
        _perturb(s, rng, 0.05)
        x = _rand(rng, 1, 3, 4, 4, lo=0.0, hi=1.0)
        cond = _rand(rng, 1, 5, 4, 4, lo=0.0, hi=1.0)
        sh = (1, 12, 2, 2)
        pri = [(G.Tensor(rng.uniform(0.2, 0.8, sh), requires_grad=True),
                G.Tensor(rng.uniform(1.0, 2.0, sh), requires_grad=True)) for _ in range(2)]
        first = _small_params(s)

        def fn():
            ctx = s.context(cond, pri)
            return getattr(s, direction)(x, ctx)[0]
        return _proj(rng, fn, [x, cond, *pri[0], *pri[1]] + first)
    return build


def _hpe(rng):
    net = HpeNet([12, 12], [1, 1], Xoshiro256(int(rng.integers(1, 2**31))), F64, trunk=(4, 4, 4))
    _perturb(net, rng)
    x = _rand(rng, 1, 5, 4, 4, lo=0.0, hi=1.0)

    def fn():
        total = None
        for B, T in net(x):
            term = G.sum(B * B) + G.sum(T * 0.5)
            total = term if total is None else total + term
        return total
    return fn, [x] + _small_params(net, 4)


# losses

_FX: dict = {}


def _extractor() -> FeatureExtractor:
    if "fx" not in _FX:
        _FX["fx"] = FeatureExtractor(F64)
    return _FX["fx"]


def _images(rng, n=3):
    return [rng.uniform(0, 1, (1, 3, 8, 8)) for _ in range(n)]


def _contrastive(rng):
    fx = _extractor()
    e, r, u = _images(rng)
    E = G.Tensor(e, requires_grad=True)
    with G.no_grad():
        fr, fu = fx(G.Tensor(r)), fx(G.Tensor(u))
    return (lambda: contrastive_loss(fx(E), fr, fu, LossWeights().rho)), [E]


def _style(rng):
    fx = _extractor()
    e, r = _images(rng, 2)
    E = G.Tensor(e, requires_grad=True)
    with G.no_grad():
        fr = fx(G.Tensor(r))
    return (lambda: style_loss(fx(E), fr)), [E]


def _bilateral(rng):
    e, r, d, u = _images(rng, 4)
    E = G.Tensor(e, requires_grad=True)
    D = G.Tensor(d, requires_grad=True)
    return (lambda: bilateral_l1(E, G.Tensor(r), D, G.Tensor(u))), [E, D]


def _focal(rng):
    x = _rand(rng, 2, 1, 4, 4, lo=-3, hi=3)
    t = (rng.uniform(size=(2, 1, 4, 4)) < 0.3).astype(F64)
    return (lambda: focal_loss(x, t)), [x]


def _giou(rng):
    m = 3
    gt = np.column_stack([rng.uniform(0.3, 0.7, m), rng.uniform(0.3, 0.7, m),
                          rng.uniform(0.1, 0.4, m), rng.uniform(0.1, 0.4, m)])
    pred = [G.Tensor(gt[:, k] + rng.uniform(-0.05, 0.05, m) * (1 if k < 2 else 0.5), requires_grad=True)
            for k in range(4)]
    # keep min/max branches separated so the kinks are not straddled
    for k in range(4):
        off = pred[k].data - gt[:, k]
        pred[k].data = np.where(np.abs(off) < 0.01, gt[:, k] + 0.02, pred[k].data)
    return (lambda: giou_loss(tuple(pred), gt)), pred


def _det(rng):
    head = _rand(rng, 1, 8, 4, 4, lo=-1.5, hi=1.5)
    boxes = [[Box(0.3, 0.3, 0.2, 0.25, 0), Box(0.7, 0.62, 0.3, 0.2, 2)]]
    return (lambda: det_loss(head, boxes)[0]), [head]


def _total(rng):
    fx = _extractor()
    e, r, u, d = _images(rng, 4)
    E = G.Tensor(e, requires_grad=True)
    D = G.Tensor(d, requires_grad=True)
    head = _rand(rng, 1, 8, 4, 4, lo=-1.5, hi=1.5)
    losses = EnhanceLosses(fx, LossWeights())
    boxes = [[Box(0.4, 0.6, 0.3, 0.3, 1)]]

    def fn():
        parts = losses.parts(E, G.Tensor(r), G.Tensor(u), D)
        parts["detection"] = det_loss(head, boxes)[0]
        return total_loss(parts, losses.weights)
    return fn, [E, head]


CASES: dict[str, Callable] = {
    "add": _binary(G.add), "sub": _binary(G.sub), "mul": _binary(G.mul), "div": _binary(G.div),
    "exp": _unary(G.exp), "log": _unary(G.log, 0.2, 3.0), "sigmoid": _unary(G.sigmoid, -4, 4),
    "softplus": _unary(G.softplus, -4, 4), "tanh": _unary(G.tanh),
    "relu": _unary(G.relu, kink=True), "abs": _unary(G.abs, kink=True), "clamp": _clamp,
    "square": _unary(G.square), "sqrt": _unary(G.sqrt, 0.2, 3.0),
    "power": _unary(lambda x: G.power(x, 2.5), 0.2, 2.0),
    "maximum": _minmax(G.maximum), "minimum": _minmax(G.minimum),
    "sum": _reduction(G.sum, axis=(2, 3)), "mean": _reduction(G.mean, axis=1),
    "variance": _reduction(G.variance, axis=(2, 3)), "norm2": _norm2,
    "broadcast_to": _broadcast, "reshape": _reshape, "index": _index, "concat": _concat, "split": _split,
    "squeeze2x": _squeeze, "unsqueeze2x": _unsqueeze, "avgpool2x": _avgpool,
    "conv2d_3x3": _conv(3, 1, 1), "conv2d_3x3_stride2": _conv(3, 2, 1),
    "conv2d_3x3_edge": _conv(3, 1, 1, pad_mode="edge"), "conv2d_5x5_edge": _conv(5, 1, 2, pad_mode="edge"),
    "conv2d_1x1": _conv(1, 1, 0, bias=False), "channel_matmul": _channel_matmul,
    "matrix_inverse": _matrix_inverse,
    "actnorm_forward": _layer_case(_actnorm, "forward"), "actnorm_inverse": _layer_case(_actnorm, "inverse"),
    "inv1x1_forward": _layer_case(_inv1x1, "forward"), "inv1x1_inverse": _layer_case(_inv1x1, "inverse"),
    "actnorm_grouped": _layer_case(_actnorm_grouped, "forward"),
    "inv1x1_grouped": _layer_case(_inv1x1_grouped, "inverse"), "expand_subpixels": _expand,
    "hpi_forward": _hpi("forward"), "hpi_inverse": _hpi("inverse"),
    "coupling_forward": _coupling("forward"), "coupling_inverse": _coupling("inverse"),
    "coupling_colour_forward": _coupling("forward", 1), "coupling_colour_inverse": _coupling("inverse", 1),
    "flow_forward": _stack("forward"), "flow_inverse": _stack("inverse"), "hpe": _hpe,
    "contrastive_loss": _contrastive, "style_loss": _style, "bilateral_l1": _bilateral,
    "focal_loss": _focal, "giou_loss": _giou, "det_loss": _det, "total_loss": _total,
}


def run_case(name: str, trials: int = 10, seed: int = 0, tol: float = 1e-4, h: float = 1e-6) -> CaseResult:
    t0 = time.perf_counter()
    worst = 0.0
    passed = True
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial, sum(map(ord, name))])
        fn, inputs = CASES[name](rng)
        try:
            worst = max(worst, G.gradcheck(fn, inputs, h=h, tol=tol))
        except AssertionError as exc:
            passed = False
            worst = max(worst, float(str(exc).split("error ")[1].split(" ")[0]))
    return CaseResult(name, trials, worst, passed, time.perf_counter() - t0)


def run_suite(trials: int = 10, seed: int = 0, tol: float = 1e-4, names=None) -> list[CaseResult]:
    return [run_case(n, trials, seed, tol) for n in (names or CASES)]
