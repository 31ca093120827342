"""Grid detection head, detection losses, decoding and average precision.

Boxes are ``(cx, cy, w, h)`` in image-normalised coordinates. The head
predicts, for each cell of a G x G grid, one objectness logit, C class
logits and four box parameters: sigmoid centre offsets inside the cell and
exponential width/height in cell units.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import ndgrad as G
from .nn import Conv2d, Module
from .prng import Xoshiro256

logger = logging.getLogger(__name__)

NUM_CLASSES = 3
GRID = 8
P_CLAMP = 1e-7
LOG_WH_RANGE = (-4.0, 4.0)


class BoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0
    score: float | None = None

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise BoxError(f"degenerate box {self}")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


# --- geometry ---------------------------------------------------------------------

def iou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


def giou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    encl = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter / union - (encl - union) / encl


def giou_loss_box(pred: Box, gt: Box) -> float:
    return 1.0 - giou(pred, gt)


def giou_loss(pred: tuple[G.Tensor, ...], gt: np.ndarray) -> G.Tensor:
    """Mean ``1 - GIoU`` between predicted boxes (tuple of cx, cy, w, h
    tensors, each shape (M,)) and ground truth (M x 4 array)."""
    cx, cy, w, h = pred
    if np.any(w.data <= 0) or np.any(h.data <= 0) or np.any(gt[:, 2:] <= 0):
        raise BoxError("degenerate box in GIoU loss")
    dtype = cx.dtype
    gx1, gy1, gx2, gy2 = (G.Tensor(v.astype(dtype)) for v in (
        gt[:, 0] - gt[:, 2] / 2, gt[:, 1] - gt[:, 3] / 2, gt[:, 0] + gt[:, 2] / 2, gt[:, 1] + gt[:, 3] / 2))
    g_area = G.Tensor((gt[:, 2] * gt[:, 3]).astype(dtype))
    px1, px2 = cx - w * 0.5, cx + w * 0.5
    py1, py2 = cy - h * 0.5, cy + h * 0.5
    iw = G.relu(G.minimum(px2, gx2) - G.maximum(px1, gx1))
    ih = G.relu(G.minimum(py2, gy2) - G.maximum(py1, gy1))
    inter = iw * ih
    union = w * h + g_area - inter
    encl = (G.maximum(px2, gx2) - G.minimum(px1, gx1)) * (G.maximum(py2, gy2) - G.minimum(py1, gy1))
    g = inter / union - (encl - union) / encl
    return G.mean(1.0 - g)


# --- classification loss ------------------------------------------------------------

def focal_loss(logits: G.Tensor, targets: np.ndarray, alpha: float = 0.25,
               gamma: float = 2.0) -> G.Tensor:
    """Sigmoid focal loss, mean over all elements.

    ``-alpha_t (1 - p_t)^gamma log p_t`` with ``p_t`` clamped to
    [1e-7, 1 - 1e-7]; ``alpha_t`` is ``alpha`` for positives and
    ``1 - alpha`` for negatives. With gamma = 0 and alpha = 0.5 this is half
    the binary cross-entropy.
    """
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise G.GradError(f"focal_loss: targets {t.shape} vs logits {logits.shape}")
    p = G.sigmoid(logits)
    pt = p * t + (1.0 - p) * G.Tensor(1.0 - t)
    pt = G.clamp(pt, P_CLAMP, 1.0 - P_CLAMP)
    alpha_t = G.Tensor(np.where(t > 0.5, alpha, 1.0 - alpha).astype(logits.dtype))
    mod = G.power(1.0 - pt, gamma) if gamma != 0 else None
    ce = G.log(pt)
    per = alpha_t * ce if mod is None else alpha_t * mod * ce
    return -G.mean(per)


# --- head -------------------------------------------------------------------------------

class DetHead(Module):
    """Three stride-2 stages, each a strided 3x3 conv followed by a 3x3 conv,
    so every grid cell sees about 43 pixels (the largest objects), then a
    1x1 prediction layer."""

    def __init__(self, num_classes: int = NUM_CLASSES, channels=(24, 48, 48), seed: int = 7,
                 dtype=np.float32):
        rng = Xoshiro256(seed)
        self.num_classes = num_classes
        self.convs = []
        c = 3
        for c_out in channels:
            self.convs.append(Conv2d(c, c_out, 3, stride=2, rng=rng, dtype=dtype))
            self.convs.append(Conv2d(c_out, c_out, 3, rng=rng, dtype=dtype))
            c = c_out
        self.out = Conv2d(c, 5 + num_classes, 1, rng=rng, dtype=dtype)
        # start with a low objectness prior so early loss is dominated by positives
        self.out.weight.data *= 0.1
        b = np.zeros(5 + num_classes)
        b[0] = -math.log(99.0)
        b[1:1 + num_classes] = -math.log(99.0)
        self.out.bias.data = b.astype(dtype)

    def __call__(self, x: G.Tensor) -> G.Tensor:
        for conv in self.convs:
            x = G.relu(conv(x))
        return self.out(x)


def cell_of(cx: float, cy: float, grid: int = GRID) -> tuple[int, int]:
    """Cell (row, col) containing a centre; a centre on a boundary goes to the
    lower-index cell."""
    col = min(max(math.ceil(cx * grid) - 1, 0), grid - 1)
    row = min(max(math.ceil(cy * grid) - 1, 0), grid - 1)
    return row, col


def build_targets(gt_boxes: list[list[Box]], grid: int, num_classes: int):
    """Objectness/class target maps plus the list of matched cells."""
    n = len(gt_boxes)
    obj = np.zeros((n, 1, grid, grid))
    cls = np.zeros((n, num_classes, grid, grid))
    matches = []  # (n, row, col, box)
    for i, boxes in enumerate(gt_boxes):
        taken = set()
        for b in boxes:
            rc = cell_of(b.cx, b.cy, grid)
            if rc in taken:
                logger.warning("image %d: second ground-truth box in cell %s dropped", i, rc)
                continue
            taken.add(rc)
            obj[i, 0, rc[0], rc[1]] = 1.0
            cls[i, b.class_id, rc[0], rc[1]] = 1.0
            matches.append((i, rc[0], rc[1], b))
    return obj, cls, matches


def decode_cells(head_out: G.Tensor, cells, num_classes: int) -> tuple[G.Tensor, ...]:
    """Differentiable box decoding at the given (n, row, col) cells."""
    grid = head_out.shape[-1]
    n_idx = np.array([c[0] for c in cells])
    rows = np.array([c[1] for c in cells])
    cols = np.array([c[2] for c in cells])
    base = 1 + num_classes
    tx = G.index(head_out, (n_idx, np.full_like(n_idx, base), rows, cols))
    ty = G.index(head_out, (n_idx, np.full_like(n_idx, base + 1), rows, cols))
    tw = G.index(head_out, (n_idx, np.full_like(n_idx, base + 2), rows, cols))
    th = G.index(head_out, (n_idx, np.full_like(n_idx, base + 3), rows, cols))
    dtype = head_out.dtype
    cx = (G.sigmoid(tx) + G.Tensor(cols.astype(dtype))) * (1.0 / grid)
    cy = (G.sigmoid(ty) + G.Tensor(rows.astype(dtype))) * (1.0 / grid)
    w = G.exp(G.clamp(tw, *LOG_WH_RANGE)) * (1.0 / grid)
    h = G.exp(G.clamp(th, *LOG_WH_RANGE)) * (1.0 / grid)
    return cx, cy, w, h


def det_loss(head_out: G.Tensor, gt_boxes: list[list[Box]], alpha: float = 0.25,
             gamma: float = 2.0) -> tuple[G.Tensor, dict]:
    """Focal classification (objectness + classes, all cells) plus GIoU
    localisation on matched cells.

    The focal terms are normalised by the number of matched cells rather
    than the number of cells, as in the original focal loss: with a per-cell
    mean the classification term is ~20x smaller than the GIoU term and the
    shared trunk barely learns objectness. Each term is computed with
    ``focal_loss`` (a per-element mean) and rescaled.
    """
    n, ch, grid, _ = head_out.shape
    num_classes = ch - 5
    obj_t, cls_t, matches = build_targets(gt_boxes, grid, num_classes)
    obj_logits, cls_logits, _ = G.split(head_out, [1, num_classes, 4], axis=1)
    per_positive = n * grid * grid / max(len(matches), 1)
    l_cla = (focal_loss(obj_logits, obj_t, alpha, gamma) + focal_loss(cls_logits, cls_t, alpha, gamma)) * per_positive
    if matches:
        pred = decode_cells(head_out, [(m[0], m[1], m[2]) for m in matches], num_classes)
        gt = np.array([[m[3].cx, m[3].cy, m[3].w, m[3].h] for m in matches])
        l_loc = giou_loss(pred, gt)
        total = l_cla + l_loc
        loc_val = l_loc.item()
    else:
        total = l_cla
        loc_val = 0.0
    return total, {"cla": l_cla.item(), "loc": loc_val}


# --- decoding ---------------------------------------------------------------------------------

def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def nms(boxes: list[Box], iou_thresh: float = 0.5) -> list[Box]:
    """Greedy per-class NMS; output sorted by descending score."""
    order = sorted(boxes, key=lambda b: -b.score)
    keep: list[Box] = []
    for b in order:
        if all(k.class_id != b.class_id or iou(k, b) <= iou_thresh for k in keep):
            keep.append(b)
    return keep


def decode_and_nms(head_out: np.ndarray, score_thresh: float = 0.05,
                   iou_thresh: float = 0.5) -> list[list[Box]]:
    """Per image: one candidate per cell (best class, score = p_obj * p_cls)."""
    if isinstance(head_out, G.Tensor):
        head_out = head_out.data
    head_out = np.asarray(head_out, dtype=np.float64)
    if head_out.ndim == 3:
        head_out = head_out[None]
    n, ch, grid, _ = head_out.shape
    num_classes = ch - 5
    results = []
    for i in range(n):
        o = head_out[i]
        p_obj = _sig(o[0])
        p_cls = _sig(o[1:1 + num_classes])
        best = p_cls.argmax(axis=0)
        score = p_obj * np.take_along_axis(p_cls, best[None], axis=0)[0]
        tx, ty, tw, th = o[1 + num_classes:5 + num_classes]
        cands = []
        for r, c in zip(*np.nonzero(score > score_thresh)):
            cands.append(Box(
                cx=(c + _sig(tx[r, c])) / grid,
                cy=(r + _sig(ty[r, c])) / grid,
                w=math.exp(np.clip(tw[r, c], *LOG_WH_RANGE)) / grid,
                h=math.exp(np.clip(th[r, c], *LOG_WH_RANGE)) / grid,
                class_id=int(best[r, c]),
                score=float(score[r, c]),
            ))
        results.append(nms(cands, iou_thresh))
    return results


# --- evaluation ---------------------------------------------------------------------------------

def pr_curve(preds: list[list[Box]], gts: list[list[Box]], class_id: int,
             iou_thresh: float = 0.5) -> tuple[np.ndarray, np.ndarray, int]:
    """Recall and precision after each prediction (descending score)."""
    n_gt = sum(1 for g in gts for b in g if b.class_id == class_id)
    dets = [(b.score, img, k) for img, ps in enumerate(preds)
            for k, b in enumerate(ps) if b.class_id == class_id]
    dets.sort(key=lambda d: (-d[0], d[1], d[2]))
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(dets))
    for j, (_, img, k) in enumerate(dets):
        b = preds[img][k]
        best, best_iou = -1, iou_thresh
        for gi, g in enumerate(gts[img]):
            if g.class_id != class_id or used[img][gi]:
                continue
            v = iou(b, g)
            if v >= best_iou:
                best, best_iou = gi, v
        if best >= 0:
            used[img][best] = True
            tp[j] = 1
    ctp = np.cumsum(tp)
    recall = ctp / n_gt if n_gt else np.zeros_like(ctp)
    precision = ctp / np.arange(1, len(dets) + 1)
    return recall, precision, n_gt


def ap_from_pr(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under a monotone-smoothed PR curve."""
    r = np.concatenate([[0.0], recall, [recall[-1] if len(recall) else 0.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    idx = np.nonzero(r[1:] != r[:-1])[0]
    return float(np.sum((r[idx + 1] - r[idx]) * p[idx + 1]))


def average_precision(preds: list[list[Box]], gts: list[list[Box]], num_classes: int = NUM_CLASSES,
                      iou_thresh: float = 0.5) -> tuple[dict[int, float], float]:
    """Per-class AP and mAP. Classes without ground truth are left out of
    mAP; mAP is NaN when no class has ground truth."""
    if len(preds) != len(gts):
        raise ValueError("predictions and ground truth cover different image counts")
    per_class = {}
    for c in range(num_classes):
        recall, precision, n_gt = pr_curve(preds, gts, c, iou_thresh)
        if n_gt == 0:
            continue
        per_class[c] = ap_from_pr(recall, precision) if len(recall) else 0.0
    m = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, m


# --- CSV -----------------------------------------------------------------------------------------

def write_boxes_csv(path, rows: list[tuple[str, Box]], with_score: bool) -> None:
    header = ["image_id", "class_id", "cx", "cy", "w", "h"] + (["score"] if with_score else [])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for image_id, b in rows:
            row = [image_id, b.class_id] + [f"{v:.6f}" for v in (b.cx, b.cy, b.w, b.h)]
            if with_score:
                row.append(f"{(b.score or 0.0):.6f}")
            wr.writerow(row)


def read_boxes_csv(path) -> dict[str, list[Box]]:
    out: dict[str, list[Box]] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            score = float(rec["score"]) if rec.get("score") not in (None, "") else None
            b = Box(float(rec["cx"]), float(rec["cy"]), float(rec["w"]), float(rec["h"]),
                    int(rec["class_id"]), score)
            out.setdefault(rec["image_id"], []).append(b)
    return out


def draw_boxes(image: np.ndarray, boxes: list[Box]) -> np.ndarray:
    """Rasterise 1-pixel box outlines; colour encodes the class."""
    palette = np.array([[1.0, 0.1, 0.1], [0.1, 1.0, 0.1], [1.0, 1.0, 0.1]])
    out = image.copy()
    _, h, w = out.shape
    for b in boxes:
        x1, y1, x2, y2 = b.corners()
        c1, c2 = int(np.clip(round(x1 * w), 0, w - 1)), int(np.clip(round(x2 * w) - 1, 0, w - 1))
        r1, r2 = int(np.clip(round(y1 * h), 0, h - 1)), int(np.clip(round(y2 * h) - 1, 0, h - 1))
        col = palette[b.class_id % len(palette)][:, None]
        out[:, r1, c1:c2 + 1] = col
        out[:, r2, c1:c2 + 1] = col
        out[:, r1:r2 + 1, c1] = col
        out[:, r1:r2 + 1, c2] = col
    return out
