"""Held-out evaluation: image quality, detection AP and encoder diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad as G
from .data import Dataset, generate_scene
from .detect import Box, DetHead, average_precision, decode_and_nms, write_boxes_csv
from .metrics import PSNR_CAP, channel_stats, emit_csv, pearson, psnr_capped, ssim
from .model import WaterFlow

EVAL_BATCH = 8
# AP ranks every candidate, so evaluation keeps nearly all of them
AP_SCORE_THRESH = 0.001
PER_IMAGE_COLUMNS = ["image_id", "psnr_degraded", "psnr_enhanced", "ssim_degraded", "ssim_enhanced"]


@dataclass
class EvalResult:
    per_image: list = field(default_factory=list)  # rows matching PER_IMAGE_COLUMNS
    summary: dict = field(default_factory=dict)
    detections: list = field(default_factory=list)  # per image list of Box


def enhance_batch(model: WaterFlow, I_u: np.ndarray):
    """Enhanced images (clipped to [0, 1], float64) and the first step's T estimate."""
    with G.no_grad():
        ctx = model.context(I_u)
        out, _ = model.flow.forward(G.Tensor(I_u.astype(model.cfg.dtype)), ctx)
    T1 = ctx.priors[0][1].data if ctx.priors[0] is not None else None
    return np.clip(out.data.astype(np.float64), 0.0, 1.0), T1


def detect_batch(det: DetHead, images: np.ndarray, dtype) -> list[list[Box]]:
    with G.no_grad():
        head = det(G.Tensor(images.astype(dtype)))
    return decode_and_nms(head.data, score_thresh=AP_SCORE_THRESH)


def squeezed_inverse_transmission(seed: int, height: int, width: int) -> np.ndarray:
    """Ground-truth 1/t of a scene in the flow's squeezed layout (12 x H/2 x W/2)."""
    T = generate_scene(seed, height, width).params.T
    return G.squeeze2x(G.Tensor(T[None])).data[0]


def evaluate(model: WaterFlow | None, det: DetHead | None, data: Dataset, out_dir=None,
             dtype=np.float32) -> EvalResult:
    """Score ``data`` and, with ``out_dir``, write ``summary.csv``,
    ``per_image.csv``, ``stats/<id>_{degraded,enhanced}.csv`` and, with a
    detector, ``detections.csv``. Without an enhancer the enhanced column
    repeats the degraded input and the detector sees raw images."""
    res = EvalResult()
    t_hat, t_true = [], []
    enhanced_all = []
    for s in range(0, len(data), EVAL_BATCH):
        I_u = data.degraded[s:s + EVAL_BATCH]
        if model is not None:
            E, T1 = enhance_batch(model, I_u)
            for k, seed in enumerate(data.seeds[s:s + EVAL_BATCH]):
                if T1 is not None:
                    t_hat.append(T1[k])
                    t_true.append(squeezed_inverse_transmission(seed, data.height, data.width))
        else:
            E = I_u
        enhanced_all.append(E)
        if det is not None:
            res.detections.extend(detect_batch(det, E, dtype))
    E_all = np.concatenate(enhanced_all) if enhanced_all else np.zeros((0, 3, 1, 1))

    for i, iid in enumerate(data.ids):
        ref, deg, enh = data.clean[i], data.degraded[i], E_all[i]
        res.per_image.append([iid, psnr_capped(deg, ref), psnr_capped(enh, ref), ssim(deg, ref), ssim(enh, ref)])

    rows = np.array([r[1:] for r in res.per_image], dtype=np.float64).reshape(-1, 4)
    med = np.median(rows, axis=0) if len(rows) else np.full(4, np.nan)
    summary = {
        "images": len(data),
        "psnr_degraded_median": med[0],
        "psnr_enhanced_median": med[1],
        "psnr_gain_db": med[1] - med[0],
        "ssim_degraded_median": med[2],
        "ssim_enhanced_median": med[3],
        "enhancer": int(model is not None),
        "detector": int(det is not None),
    }
    if det is not None:
        per_class, m = average_precision(res.detections, data.boxes)
        summary["map50"] = m
        for c in range(3):
            summary[f"ap50_class{c}"] = per_class.get(c, float("nan"))
    if t_hat:
        summary["pearson_T1_inv_t"] = pearson(np.stack(t_hat), np.stack(t_true))
    res.summary = summary

    if out_dir is not None:
        write_eval(res, data, E_all, Path(out_dir))
    return res


def write_eval(res: EvalResult, data: Dataset, enhanced: np.ndarray, out: Path) -> None:
    (out / "stats").mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["metric", "value"])
        for k, v in res.summary.items():
            wr.writerow([k, v if isinstance(v, int) else f"{v:.6f}"])
    with open(out / "per_image.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(PER_IMAGE_COLUMNS)
        for r in res.per_image:
            wr.writerow([r[0]] + [f"{min(v, PSNR_CAP):.6f}" for v in r[1:]])
    for i, iid in enumerate(data.ids):
        emit_csv(channel_stats(data.degraded[i]), out / "stats" / f"{iid}_degraded.csv")
        emit_csv(channel_stats(enhanced[i]), out / "stats" / f"{iid}_enhanced.csv")
    if res.detections or res.summary.get("detector"):
        rows = [(iid, b) for iid, boxes in zip(data.ids, res.detections) for b in boxes]
        write_boxes_csv(out / "detections.csv", rows, with_score=True)
