"""Minimal parameter containers built on ``ndgrad``."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ndgrad as G
from .prng import Xoshiro256


class Module:
    """Parameters are Tensor attributes; submodules are Module attributes
    or lists of Modules. Names follow attribute paths (``a.b.weight``)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, G.Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, G.Tensor) and val.name == "param":
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[G.Tensor]:
        """Trainable parameters only (frozen ones are skipped)."""
        return [p for _, p in self.named_parameters() if p.requires_grad]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        unknown = sorted(set(state) - set(own))
        if unknown:
            raise KeyError(f"unknown parameter names: {', '.join(unknown)}")
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameter names: {', '.join(missing)}")
        for k, arr in state.items():
            if own[k].shape != tuple(arr.shape):
                raise ValueError(f"shape mismatch for {k}: {own[k].shape} vs {arr.shape}")
            own[k].data = np.array(arr, dtype=own[k].dtype)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def set_trainable(self, flag: bool) -> None:
        for _, p in self.named_parameters():
            p.requires_grad = flag


def param(arr: np.ndarray, dtype) -> G.Tensor:
    return G.Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, name="param")


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1,
                 rng: Xoshiro256 | None = None, zero: bool = False, dtype=np.float32,
                 padding: int | None = None, pad_mode: str = "zero"):
        self.stride = stride
        self.pad_mode = pad_mode
        self.padding = (k - 1) // 2 if padding is None else padding
        shape = (c_out, c_in, k, k)
        if zero or rng is None:
            w = np.zeros(shape)
        else:
            # He-normal
            w = rng.normal_array(shape) * math.sqrt(2.0 / (c_in * k * k))
        self.weight = param(w, dtype)
        self.bias = param(np.zeros(c_out), dtype)

    def __call__(self, x: G.Tensor) -> G.Tensor:
        return G.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                        pad_mode=self.pad_mode)


class ConvStack(Module):
    """conv -> relu -> ... -> conv (no activation after the last layer)."""

    def __init__(self, channels: list[int], rng: Xoshiro256, dtype=np.float32,
                 zero_last: bool = False, last_kernel: int = 3, relu_last: bool = False,
                 pad_mode: str = "zero"):
        self.layers = []
        for i, (a, b) in enumerate(zip(channels[:-1], channels[1:])):
            last = i == len(channels) - 2
            k = last_kernel if last else 3
            self.layers.append(Conv2d(a, b, k, rng=rng, zero=last and zero_last, dtype=dtype,
                                      pad_mode=pad_mode))
        self.relu_last = relu_last

    def __call__(self, x: G.Tensor) -> G.Tensor:
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1 or self.relu_last:
                x = G.relu(x)
        return x


# bilinear x2 taps: output row 2r reads rows (r-1, r) with weights (1/4, 3/4),
# output row 2r+1 reads rows (r, r+1) with weights (3/4, 1/4)
_BILINEAR_TAPS = np.array([[0.25, 0.75, 0.0], [0.0, 0.75, 0.25]])
_UPSAMPLE_CACHE: dict = {}


def _upsample_weight(channels: int, dtype) -> G.Tensor:
    key = (channels, np.dtype(dtype).str)
    if key not in _UPSAMPLE_CACHE:
        w = np.zeros((4 * channels, channels, 3, 3))
        for c in range(channels):
            for i in range(2):
                for j in range(2):
                    w[4 * c + 2 * i + j, c] = np.outer(_BILINEAR_TAPS[i], _BILINEAR_TAPS[j])
        _UPSAMPLE_CACHE[key] = G.Tensor(w.astype(dtype))
    return _UPSAMPLE_CACHE[key]


def expand_subpixels(field: G.Tensor, levels: int) -> G.Tensor:
    """Per-colour fields at the in-flow resolution -> every colour's squeezed
    sub-pixel channels, by bilinear upsampling to image resolution followed by
    ``levels`` squeezes. The result varies smoothly across neighbouring pixels
    instead of independently per sub-pixel channel."""
    x = field
    for _ in range(levels):
        x = G.unsqueeze2x(G.conv2d(x, _upsample_weight(x.shape[1], x.dtype), None,
                                   padding=1, pad_mode="edge"))
    for _ in range(levels):
        x = G.squeeze2x(x)
    return x
