"""The enhancement network: prior-guided encoder feeding a flow stack."""

from __future__ import annotations

import numpy as np

from . import ndgrad as G
from .config import RunConfig
from .detect import DetHead
from .flow import FlowContext, FlowStack
from .nn import Module
from .physics import HpeNet, hpe_input, prior_maps
from .prng import Xoshiro256, derive_seed

META_KEYS = ("n_blocks", "squeeze_per_block", "hidden", "colour_fields", "hpe_gain")


def condition_image(I_u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(coupling condition, encoder input) for a batch N x 3 x H x W; the
    condition is (I_u, I_g, I_d) stacked, the encoder input (I_d, I_g, I_u)."""
    gs, ds = zip(*(prior_maps(img) for img in I_u))
    I_g = np.stack(gs)
    I_d = np.stack(ds)
    cond = np.concatenate([I_u, I_g, I_d], axis=1)
    return cond, (I_g, I_d)


class WaterFlow(Module):
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        dtype = cfg.dtype
        self.flow = FlowStack(cfg.n_blocks, 3, 5, cfg.hidden, cfg.squeeze_per_block,
                              seed=derive_seed(cfg.seed, 1), dtype=dtype, orthogonal=cfg.inv1x1_orthogonal,
                              data_init=cfg.actnorm_data_init, colour_fields=cfg.colour_fields)
        self.hpe = HpeNet(self.flow.block_channels, list(self.flow.levels),
                          Xoshiro256(derive_seed(cfg.seed, 2)), dtype=dtype, t_max=cfg.t_max,
                          gain=cfg.hpe_gain, t_bias=cfg.hpe_t_bias,
                          colours=3 if cfg.colour_fields else None)

    def named_parameters(self, prefix: str = ""):
        yield from self.flow.named_parameters(prefix + "flow.")
        yield from self.hpe.named_parameters(prefix + "hpe.")

    def context(self, I_u: np.ndarray) -> FlowContext:
        """Side information from a batch of underwater images (numpy)."""
        dtype = self.cfg.dtype
        cond, (I_g, I_d) = condition_image(I_u)
        enc_in = hpe_input(I_u, I_g, I_d, self.cfg.hpe_inputs)
        priors = self.hpe(G.Tensor(enc_in.astype(dtype)))
        return self.flow.context(G.Tensor(cond.astype(dtype)), priors)

    def enhance(self, I_u: np.ndarray, ctx: FlowContext | None = None):
        ctx = ctx or self.context(I_u)
        return self.flow.forward(G.Tensor(I_u.astype(self.cfg.dtype)), ctx)

    def degrade(self, I_r: np.ndarray, I_u: np.ndarray, ctx: FlowContext | None = None):
        """Inverse direction; the condition always comes from the underwater image."""
        ctx = ctx or self.context(I_u)
        return self.flow.inverse(G.Tensor(I_r.astype(self.cfg.dtype)), ctx)

    def meta(self) -> dict[str, np.ndarray]:
        return {
            "meta.n_blocks": np.array([self.cfg.n_blocks], dtype=np.float32),
            "meta.squeeze_per_block": np.array([float(self.cfg.squeeze_per_block)], dtype=np.float32),
            "meta.hidden": np.array([self.cfg.hidden], dtype=np.float32),
            "meta.colour_fields": np.array([float(self.cfg.colour_fields)], dtype=np.float32),
            "meta.hpe_gain": np.array([self.cfg.hpe_gain], dtype=np.float32),
        }


def new_detector(cfg: RunConfig) -> DetHead:
    return DetHead(seed=derive_seed(cfg.seed, 3), dtype=cfg.dtype)


def config_from_meta(states: dict[str, np.ndarray], base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    if "meta.n_blocks" in states:
        cfg.n_blocks = int(states["meta.n_blocks"][0])
        cfg.squeeze_per_block = bool(states["meta.squeeze_per_block"][0])
        cfg.hidden = int(states["meta.hidden"][0])
    if "meta.colour_fields" in states:
        cfg.colour_fields = bool(states["meta.colour_fields"][0])
    if "meta.hpe_gain" in states:
        cfg.hpe_gain = float(states["meta.hpe_gain"][0])
    cfg.validate()
    return cfg
