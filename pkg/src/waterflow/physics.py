"""Underwater image formation, prior maps and the prior-guided encoder.

Formation model, per colour channel c:

    I = J * t + B * (1 - t),    t = exp(-beta * d)

and its inverse ``J = I / t + B * (t - 1) / t``. The decaying exponent is
the Beer-Lambert law; transmission never exceeds 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as G
from .nn import Conv2d, ConvStack, Module, expand_subpixels
from .prng import Xoshiro256

T_MIN = 0.05
T_MAX = 1.0 / T_MIN
LUMA = np.array([0.299, 0.587, 0.114])
# rawT starts here so T = 1 + softplus(rawT) ~= 1.0067 at initialisation
HPE_T_BIAS = -5.0
# head outputs are multiplied by this gain: with Adam's roughly lr-sized steps
# the raw parameters could otherwise not leave the identity start within a
# few thousand iterations
HPE_HEAD_GAIN = 20.0


class PhysicsError(ValueError):
    pass


@dataclass
class ImagingParams:
    """Ground-truth imaging parameters of one synthetic scene.

    ``beta`` and ``B`` are per-channel (shape (3,)), ``depth`` is H x W.
    """

    beta: np.ndarray
    B: np.ndarray
    depth: np.ndarray

    @property
    def t(self) -> np.ndarray:
        return transmission(self.beta, self.depth)

    @property
    def T(self) -> np.ndarray:
        return 1.0 / self.t


def transmission(beta: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Per-channel Beer-Lambert transmission, shape (3, H, W)."""
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta < 0) or np.any(depth < 0):
        raise PhysicsError("attenuation and depth must be non-negative")
    return np.exp(-beta[:, None, None] * depth[None, :, :])


def _ambient(B, shape) -> np.ndarray:
    B = np.asarray(B, dtype=np.float64)
    if B.ndim == 1:
        return np.broadcast_to(B[:, None, None], shape)
    return B


def degrade(J: np.ndarray, t: np.ndarray, B) -> np.ndarray:
    """Apply the formation model. ``t`` is (3,H,W) or broadcastable; ``B`` is
    per-channel or a full map."""
    t = np.broadcast_to(t, J.shape)
    Bm = _ambient(B, J.shape)
    return J * t + Bm * (1.0 - t)


def degrade_params(J: np.ndarray, params: ImagingParams) -> np.ndarray:
    return degrade(J, params.t, params.B)


def enhance_analytic(I: np.ndarray, t: np.ndarray, B) -> np.ndarray:
    """Invert the formation model. Transmission is clamped to ``T_MIN``."""
    t = np.maximum(np.broadcast_to(t, I.shape), T_MIN)
    Bm = _ambient(B, I.shape)
    J = I / t + Bm * (t - 1.0) / t
    if not np.isfinite(J).all():
        raise PhysicsError("non-finite result in enhance_analytic")
    return J


def luminance(img: np.ndarray) -> np.ndarray:
    return np.tensordot(LUMA, img, axes=(0, 0))


def gradient_map(I_u: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude of the luminance, scaled to [0, 1]."""
    y = np.pad(luminance(I_u), 1, mode="edge")
    gx = (y[:-2, 2:] + 2 * y[1:-1, 2:] + y[2:, 2:]) - (y[:-2, :-2] + 2 * y[1:-1, :-2] + y[2:, :-2])
    gy = (y[2:, :-2] + 2 * y[2:, 1:-1] + y[2:, 2:]) - (y[:-2, :-2] + 2 * y[:-2, 1:-1] + y[:-2, 2:])
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0:
        return np.zeros_like(mag)
    return mag / peak


def box_blur(img: np.ndarray, size: int = 5) -> np.ndarray:
    r = size // 2
    p = np.pad(img, r, mode="edge")
    c = np.cumsum(np.cumsum(p, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    h, w = img.shape
    s = c[size:size + h, size:size + w] - c[:h, size:size + w] - c[size:size + h, :w] + c[:h, :w]
    return s / (size * size)


def depth_map(I_u: np.ndarray) -> np.ndarray:
    """Red-deficit depth proxy: blur(1 - minmax(red)). A constant red channel
    has no usable contrast and maps to all ones."""
    red = I_u[0]
    lo, hi = red.min(), red.max()
    if hi - lo <= 0:
        deficit = np.ones_like(red)
    else:
        deficit = 1.0 - (red - lo) / (hi - lo)
    return np.clip(box_blur(deficit, 5), 0.0, 1.0)


def prior_maps(I_u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(I_g, I_d) for a 3 x H x W image, each 1 x H x W."""
    return gradient_map(I_u)[None], depth_map(I_u)[None]


class HpeNet(Module):
    """Shared conv trunk over (I_d, I_g, I_u) plus one 1x1 head per flow step.

    Each head emits ``2 * c_i`` channels split into raw ambient light and raw
    reciprocal transmission; ``B = sigmoid(rawB)``, ``T = clamp(1 +
    softplus(rawT), 1, T_MAX)``. Head weights start at zero, so the injector
    starts close to the identity. Raw outputs are ``gain * head(features)``.

    With ``colours`` set, each head predicts one (B, T) field per colour and
    expands it smoothly onto that colour's contiguous block of squeezed
    sub-pixel channels: ambient light and transmission belong to a colour at a
    location, so neighbouring sub-pixels of one colour get nearly equal values
    and the injector cannot paint period-2 patterns.
    """

    def __init__(self, step_channels: list[int], step_pools: list[int], rng: Xoshiro256,
                 dtype=np.float32, trunk: tuple[int, ...] = (16, 32, 32), t_max: float = T_MAX,
                 gain: float = HPE_HEAD_GAIN, t_bias: float = HPE_T_BIAS,
                 colours: int | None = 3):
        if len(step_channels) != len(step_pools):
            raise ValueError("one pooling depth per flow step is required")
        if colours is not None and any(c != colours * 4 ** p for c, p in zip(step_channels, step_pools)):
            raise ValueError("step channels must be the colour count times 4 per pooling level")
        self.colours = colours
        self.step_channels = list(step_channels)
        self.step_pools = list(step_pools)
        self.t_max = t_max
        self.gain = gain
        self.trunk = ConvStack([5, *trunk], rng, dtype=dtype, relu_last=True, pad_mode="edge")
        self.heads = []
        for c in step_channels:
            k = colours or c
            head = Conv2d(trunk[-1], 2 * k, k=1, zero=True, dtype=dtype)
            bias = np.zeros(2 * k)
            bias[k:] = t_bias / gain
            head.bias.data = bias.astype(dtype)
            self.heads.append(head)

    def __call__(self, hpe_input: G.Tensor) -> list[tuple[G.Tensor, G.Tensor]]:
        feats = self.trunk(hpe_input)
        pooled = {0: feats}
        out = []
        for head, c, levels in zip(self.heads, self.step_channels, self.step_pools):
            for lv in range(1, levels + 1):
                if lv not in pooled:
                    pooled[lv] = G.avgpool2x(pooled[lv - 1])
            raw = head(pooled[levels]) * self.gain
            k = self.colours or c
            raw_b, raw_t = G.split(raw, [k, k], axis=1)
            if k != c:
                raw_b, raw_t = expand_subpixels(raw_b, levels), expand_subpixels(raw_t, levels)
            B = G.sigmoid(raw_b)
            T = G.clamp(1.0 + G.softplus(raw_t), 1.0, self.t_max)
            out.append((B, T))
        return out


def hpe_input(I_u: np.ndarray, I_g: np.ndarray, I_d: np.ndarray,
              use: tuple[str, ...] = ("depth", "gradient", "color")) -> np.ndarray:
    """Stack (I_d, I_g, I_u) into N x 5 x H x W; inputs not in ``use`` are zeroed
    (HPE input ablation)."""
    parts = [
        I_d if "depth" in use else np.zeros_like(I_d),
        I_g if "gradient" in use else np.zeros_like(I_g),
        I_u if "color" in use else np.zeros_like(I_u),
    ]
    return np.concatenate(parts, axis=-3)


def hpe_estimate(I_u: np.ndarray, I_g: np.ndarray, I_d: np.ndarray, net: HpeNet,
                 n_steps: int, use=("depth", "gradient", "color")) -> list[tuple[G.Tensor, G.Tensor]]:
    """Per-step (B_i, T_i) at the in-flow resolution of each step."""
    if I_u.shape[-2:] != I_g.shape[-2:] or I_u.shape[-2:] != I_d.shape[-2:]:
        raise PhysicsError("prior maps are not aligned with the image")
    if n_steps != len(net.heads):
        raise PhysicsError(f"encoder has {len(net.heads)} heads, flow has {n_steps} steps")
    x = hpe_input(I_u, I_g, I_d, use)
    if x.ndim == 3:
        x = x[None]
    dtype = net.heads[0].weight.dtype
    return net(G.Tensor(x.astype(dtype)))
