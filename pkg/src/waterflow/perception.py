"""Fixed feature extractor and the enhancement losses.

The extractor is a frozen 5-stage conv net (conv3x3 -> relu -> avgpool2x2)
with He-normal weights drawn from xoshiro256** seeded with 0x5EED. It plays
the role of a perceptual network; gradients flow through it to the image.

First-stage filters are random colour mixtures with a fixed binomial spatial
profile. Pretrained perceptual nets start with smooth filters; unconstrained
random 3x3 filters instead reward one-pixel-period stripes, which the squeezed
flow layout can produce cheaply.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as G
from .prng import Xoshiro256

EXTRACTOR_SEED = 0x5EED
STAGES = (8, 16, 32, 32, 32)
_BINOMIAL = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0])
STEM_PROFILE = _BINOMIAL * (3.0 / np.linalg.norm(_BINOMIAL))  # same energy as 9 unit taps
DENOM_EPS = 1e-7


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    contrastive: float = 1.0
    style: float = 100.0
    detection: float = 0.1
    l1: float = 1.0
    rho: tuple = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)

    def __post_init__(self):
        for name in ("contrastive", "style", "detection", "l1"):
            if getattr(self, name) < 0:
                raise LossError(f"loss weight {name} must be non-negative")


class FeatureExtractor:
    def __init__(self, dtype=np.float32, seed: int = EXTRACTOR_SEED, stages=STAGES,
                 smooth_stem: bool = True):
        rng = Xoshiro256(seed)
        self.weights = []
        c_in = 3
        for k, c_out in enumerate(stages):
            w = rng.normal_array((c_out, c_in, 3, 3)) * math.sqrt(2.0 / (c_in * 9))
            if k == 0 and smooth_stem:
                w = w[:, :, 1:2, 1:2] * STEM_PROFILE
            # frozen: plain tensors, never registered as parameters
            self.weights.append(G.Tensor(w.astype(dtype)))
            c_in = c_out

    def __call__(self, x: G.Tensor) -> list[G.Tensor]:
        feats = []
        for w in self.weights:
            x = G.relu(G.conv2d(x, w, None, padding=1, pad_mode="edge"))
            # small inputs: pooling stops once the map can no longer be halved
            if x.shape[-1] % 2 == 0 and x.shape[-2] % 2 == 0:
                x = G.avgpool2x(x)
            feats.append(x)
        return feats

    def digest(self) -> str:
        h = hashlib.sha256()
        for w in self.weights:
            h.update(np.ascontiguousarray(w.data, dtype="<f8").tobytes())
        return h.hexdigest()


def _mean_abs(x: G.Tensor) -> G.Tensor:
    return G.mean(G.abs(x))


def contrastive_loss(enh_feats, ref_feats, neg_feats, rho) -> G.Tensor:
    """Sum over stages of rho_i * |V(ref) - V(enh)| / (|V(neg) - V(enh)| + eps),
    both norms mean-reduced."""
    if len(rho) != len(enh_feats):
        raise LossError("one contrastive weight per feature stage is required")
    total = None
    for r, fe, fr, fn in zip(rho, enh_feats, ref_feats, neg_feats):
        num = _mean_abs(fr - fe)
        den = _mean_abs(fn - fe) + DENOM_EPS
        term = (num / den) * float(r)
        total = term if total is None else total + term
    return total


def _channel_stats(f: G.Tensor) -> tuple[G.Tensor, G.Tensor]:
    return G.mean(f, axis=(2, 3)), G.variance(f, axis=(2, 3))


def _rms(x: G.Tensor) -> G.Tensor:
    # per-sample L2 norm over channels, scaled by 1/sqrt(C); averaged over the batch
    c = x.shape[1]
    return G.mean(G.norm2(x, axis=1)) * (1.0 / math.sqrt(c))


def style_loss(enh_feats, ref_feats) -> G.Tensor:
    """Mean over stages of ||mu(enh) - mu(ref)|| + ||var(enh) - var(ref)||."""
    total = None
    for fe, fr in zip(enh_feats, ref_feats):
        me, ve = _channel_stats(fe)
        mr, vr = _channel_stats(fr)
        term = _rms(me - mr) + _rms(ve - vr)
        total = term if total is None else total + term
    return total * (1.0 / len(enh_feats))


def bilateral_l1(enhanced: G.Tensor, reference, degraded_estimate: G.Tensor, underwater) -> G.Tensor:
    return _mean_abs(enhanced - reference) + _mean_abs(degraded_estimate - underwater)


def total_loss(parts: dict, weights: LossWeights) -> G.Tensor:
    """lambda-weighted sum of the ``contrastive``, ``style``, ``detection`` and
    ``l1`` parts. Missing parts count as zero."""
    total = None
    for name in ("contrastive", "style", "detection", "l1"):
        part = parts.get(name)
        if part is None:
            continue
        val = part.item() if isinstance(part, G.Tensor) else float(part)
        if not math.isfinite(val):
            raise LossError(f"loss part '{name}' is not finite")
        lam = getattr(weights, name)
        term = part * lam if isinstance(part, G.Tensor) else G.Tensor(val * lam)
        total = term if total is None else total + term
    return total if total is not None else G.Tensor(0.0)


@dataclass
class EnhanceLosses:
    """Bundle used by the trainer: extractor plus cached target features."""

    extractor: FeatureExtractor
    weights: LossWeights = field(default_factory=LossWeights)

    def features(self, img) -> list[G.Tensor]:
        x = img if isinstance(img, G.Tensor) else G.Tensor(img)
        return self.extractor(x)

    def parts(self, enhanced: G.Tensor, reference: G.Tensor, underwater: G.Tensor,
              degraded_estimate: G.Tensor | None = None, ref_feats=None, neg_feats=None) -> dict:
        w = self.weights
        out = {}
        need_feats = w.contrastive > 0 or w.style > 0
        if need_feats:
            enh_feats = self.features(enhanced)
            with G.no_grad():
                ref_feats = ref_feats if ref_feats is not None else self.features(reference)
            if w.contrastive > 0:
                with G.no_grad():
                    neg_feats = neg_feats if neg_feats is not None else self.features(underwater)
                out["contrastive"] = contrastive_loss(enh_feats, ref_feats, neg_feats, w.rho)
            if w.style > 0:
                out["style"] = style_loss(enh_feats, ref_feats)
        if w.l1 > 0:
            if degraded_estimate is None:
                out["l1"] = _mean_abs(enhanced - reference)
            else:
                out["l1"] = bilateral_l1(enhanced, reference, degraded_estimate, underwater)
        return out
