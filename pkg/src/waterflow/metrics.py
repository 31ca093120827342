"""Full-reference quality metrics and per-channel distribution statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .data import quantize
from .physics import luminance

PSNR_CAP = 99.0
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WIN, SSIM_SIGMA = 11, 1.5


class MetricError(ValueError):
    pass


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    """PSNR in dB; identical inputs give ``inf``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def psnr_capped(x, y, peak: float = 1.0) -> float:
    return min(psnr(x, y, peak), PSNR_CAP)


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma * sigma))
    g /= g.sum()
    return g


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    """Mean SSIM over all valid 11x11 Gaussian windows of the luminance.
    Accepts 3 x H x W colour or H x W grey images."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 3:
        x, y = luminance(x), luminance(y)
    if min(x.shape) < SSIM_WIN:
        raise MetricError(f"SSIM needs at least {SSIM_WIN}x{SSIM_WIN} pixels, got {x.shape}")
    g = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class ChannelStats:
    """Per-channel (r, g, b) 256-bin histograms and box-plot summaries.

    ``summary`` rows are (min, q1, median, q3, max) on [0, 1] values with
    linear-interpolation quartiles; ``fences`` rows are the 1.5 IQR limits.
    """

    hist: np.ndarray      # 3 x 256 counts
    summary: np.ndarray   # 3 x 5
    fences: np.ndarray    # 3 x 2


def channel_stats(image: np.ndarray) -> ChannelStats:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    codes = quantize(img)
    hist = np.stack([np.bincount(codes[c].ravel(), minlength=256) for c in range(3)])
    summ, fences = [], []
    for c in range(3):
        v = img[c].ravel()
        q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75], method="linear")
        summ.append([v.min(), q1, med, q3, v.max()])
        iqr = q3 - q1
        fences.append([q1 - 1.5 * iqr, q3 + 1.5 * iqr])
    return ChannelStats(hist, np.array(summ), np.array(fences))


STATS_HEADER = (["channel", "min", "q1", "median", "q3", "max", "lower_fence", "upper_fence"]
                + [f"bin_{i:03d}" for i in range(256)])


def emit_csv(stats: ChannelStats, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(STATS_HEADER)
        for c, name in enumerate("rgb"):
            wr.writerow([name] + [f"{v:.6f}" for v in (*stats.summary[c], *stats.fences[c])]
                        + [int(n) for n in stats.hist[c]])


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 0 else float("nan")
