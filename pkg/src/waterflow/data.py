"""Synthetic scenes, PPM image IO, checkpoints and dataset manifests."""

from __future__ import annotations

import csv
import hashlib
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detect import GRID, Box, cell_of, iou
from .physics import ImagingParams, degrade
from .prng import Xoshiro256

logger = logging.getLogger(__name__)

# synthesizer conventions for attenuation and ambient light, (lo, hi) per channel
BETA_RANGES = ((0.6, 1.2), (0.15, 0.4), (0.2, 0.5))
AMBIENT_RANGES = ((0.0, 0.2), (0.3, 0.7), (0.4, 0.8))
DEPTH_NEAR = (0.4, 0.9)
DEPTH_FAR = (1.6, 2.4)
OBJECT_DEPTH_OFFSET = (0.1, 0.4)
CLASS_NAMES = ("ellipse", "rounded_rect", "ring")


class DataError(ValueError):
    pass


@dataclass
class ScenePair:
    clean: np.ndarray
    degraded: np.ndarray
    params: ImagingParams
    boxes: list[Box] = field(default_factory=list)
    seed: int = 0


# --- scene synthesis ------------------------------------------------------------------------

def _shape_mask(cls: int, xx, yy, cx, cy, rx, ry) -> np.ndarray:
    dx, dy = (xx - cx) / rx, (yy - cy) / ry
    if cls == 0:
        return dx * dx + dy * dy <= 1.0
    if cls == 1:
        r = 0.4 * min(rx, ry)
        qx = np.maximum(np.abs(xx - cx) - (rx - r), 0.0)
        qy = np.maximum(np.abs(yy - cy) - (ry - r), 0.0)
        inside = (np.abs(xx - cx) <= rx) & (np.abs(yy - cy) <= ry)
        return inside & (qx * qx + qy * qy <= r * r)
    outer = dx * dx + dy * dy <= 1.0
    inner = dx * dx + dy * dy <= 0.55 ** 2
    return outer & ~inner


def _box_from_mask(mask: np.ndarray, cls: int) -> Box | None:
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    if rows.size == 0:
        return None
    h, w = mask.shape
    x1, x2 = cols[0], cols[-1] + 1
    y1, y2 = rows[0], rows[-1] + 1
    return Box((x1 + x2) / 2 / w, (y1 + y2) / 2 / h, (x2 - x1) / w, (y2 - y1) / h, cls)


def generate_scene(seed: int, height: int = 64, width: int = 64,
                   n_objects: int | None = None) -> ScenePair:
    """Deterministic scene from a seed: vertical gradient background, 1-4
    shapes (3 classes), depth ramp with closer objects, and the degraded view."""
    if height % 4 or width % 4:
        raise DataError("scene size must be divisible by 4")
    rng = Xoshiro256(seed)
    yy, xx = np.mgrid[0:height, 0:width] + 0.5

    top = np.array([rng.uniform(0.3, 0.9) for _ in range(3)])
    bottom = np.array([rng.uniform(0.1, 0.7) for _ in range(3)])
    ramp = (yy / height)[None]
    clean = top[:, None, None] * (1 - ramp) + bottom[:, None, None] * ramp

    d_near = rng.uniform(*DEPTH_NEAR)
    d_far = rng.uniform(*DEPTH_FAR)
    depth = d_near + (d_far - d_near) * (yy - 0.5) / max(height - 1, 1)

    if n_objects is None:
        n_objects = rng.integers(1, 5)
    boxes: list[Box] = []
    taken: set = set()
    scale = min(height, width) / 64.0
    for _ in range(n_objects):
        cls = rng.integers(0, 3)
        rx = rng.uniform(5.0, 11.0) * scale
        ry = rng.uniform(5.0, 11.0) * scale
        color = np.array([rng.uniform(0.0, 1.0) for _ in range(3)])
        offset = rng.uniform(*OBJECT_DEPTH_OFFSET)
        placed = None
        for _attempt in range(20):
            cx = rng.uniform(rx + 1, width - rx - 1)
            cy = rng.uniform(ry + 1, height - ry - 1)
            mask = _shape_mask(cls, xx, yy, cx, cy, rx, ry)
            box = _box_from_mask(mask, cls)
            if box is None:
                continue
            cell = cell_of(box.cx, box.cy, GRID)
            if cell in taken:
                continue
            if any(iou(box, b) > 0.2 for b in boxes):
                continue
            placed = (mask, box, cell)
            break
        if placed is None:
            logger.warning("seed %d: object dropped, no free grid cell", seed)
            continue
        mask, box, cell = placed
        bg = clean[:, mask].mean(axis=1)
        if np.abs(color - bg).mean() < 0.25:
            color = 1.0 - bg
        clean[:, mask] = color[:, None]
        depth = np.where(mask, depth - offset, depth)
        taken.add(cell)
        boxes.append(box)
    depth = np.maximum(depth, 0.0)

    beta = np.array([rng.uniform(*r) for r in BETA_RANGES])
    B = np.array([rng.uniform(*r) for r in AMBIENT_RANGES])
    params = ImagingParams(beta=beta, B=B, depth=depth)
    clean = np.clip(clean, 0.0, 1.0)
    degraded = degrade(clean, params.t, params.B)
    return ScenePair(clean=clean, degraded=degraded, params=params, boxes=boxes, seed=seed)


# --- PPM ------------------------------------------------------------------------------------

def quantize(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit codes, rounding half up."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def ppm_bytes(image: np.ndarray) -> bytes:
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"expected a 3 x H x W image, got {image.shape}")
    _, h, w = image.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + quantize(image).transpose(1, 2, 0).tobytes()


def ppm_write(image: np.ndarray, path) -> None:
    Path(path).write_bytes(ppm_bytes(image))


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise DataError(f"malformed PPM header: unexpected end at byte {pos}")
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the payload
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise DataError(f"malformed PPM header at byte {pos}")
    return tokens, pos + 1


def ppm_decode(buf: bytes) -> np.ndarray:
    tokens, offset = _ppm_tokens(buf, 4)
    if tokens[0] != b"P6":
        raise DataError(f"not a binary PPM (magic {tokens[0]!r} at byte 0)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError("malformed PPM header: non-integer field") from None
    if maxval != 255:
        raise DataError(f"unsupported PPM maxval {maxval} (only 255 is supported)")
    if w <= 0 or h <= 0:
        raise DataError("malformed PPM header: non-positive size")
    need = w * h * 3
    have = len(buf) - offset
    if have < need:
        raise DataError(f"truncated PPM payload: expected {need} bytes from byte {offset}, "
                        f"file ends at byte {len(buf)}")
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=offset)
    return arr.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def ppm_read(path) -> np.ndarray:
    return ppm_decode(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- checkpoints ------------------------------------------------------------------------------

CKPT_MAGIC = b"WFLO"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(states: dict[str, np.ndarray]) -> bytes:
    """Layout (little-endian): magic "WFLO", u32 version, u32 entry count,
    then per entry u32 name length, UTF-8 name, u32 rank, rank x u32 dims,
    float32 payload; finally u32 CRC32 of everything before it."""
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(states))]
    for name, arr in states.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def checkpoint_save(states: dict[str, np.ndarray], path) -> None:
    if len(set(states)) != len(states):
        raise CheckpointError("duplicate tensor names")
    data = checkpoint_bytes(states)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def checkpoint_parse(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 16:
        raise CheckpointError("checkpoint too short (CRC cannot be validated)")
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint CRC mismatch: file is corrupt or truncated")
    if body[:4] != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, count = struct.unpack_from("<II", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", body, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(dims).copy()
        pos += 4 * n
    if pos != len(body):
        raise CheckpointError("trailing bytes after last checkpoint entry")
    return out


def checkpoint_load(path) -> dict[str, np.ndarray]:
    return checkpoint_parse(Path(path).read_bytes())


# --- manifests and dataset folders --------------------------------------------------------------

def write_manifest(path, entries: list[tuple[int, str]]) -> None:
    with open(path, "w") as fh:
        for seed, split in entries:
            fh.write(f"{seed},{split}\n")


def read_manifest(path) -> list[tuple[int, str]]:
    out = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            seed, split = line.split(",")
            out.append((int(seed), split.strip()))
        except ValueError:
            raise DataError(f"{path}:{ln}: expected 'seed,split'") from None
    return out


def image_id(seed: int) -> str:
    return f"scene_{seed:08d}"


PARAM_FIELDS = ["image_id", "seed", "split", "height", "width",
                "beta_r", "beta_g", "beta_b", "B_r", "B_g", "B_b"]


def write_dataset(out_dir, entries: list[tuple[int, str]], height: int, width: int) -> list[ScenePair]:
    """Render every (seed, split) entry to ``out_dir``: clean/ and degraded/
    PPMs, params.csv, boxes.csv and manifest.txt."""
    out = Path(out_dir)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    (out / "degraded").mkdir(parents=True, exist_ok=True)
    scenes = []
    with open(out / "params.csv", "w", newline="") as pf, open(out / "boxes.csv", "w", newline="") as bf:
        pw = csv.writer(pf, lineterminator="\n")
        bw = csv.writer(bf, lineterminator="\n")
        pw.writerow(PARAM_FIELDS)
        bw.writerow(["image_id", "class_id", "cx", "cy", "w", "h"])
        for seed, split in entries:
            sc = generate_scene(seed, height, width)
            iid = image_id(seed)
            ppm_write(sc.clean, out / "clean" / f"{iid}.ppm")
            ppm_write(sc.degraded, out / "degraded" / f"{iid}.ppm")
            pw.writerow([iid, seed, split, height, width]
                        + [f"{v:.6f}" for v in (*sc.params.beta, *sc.params.B)])
            for b in sc.boxes:
                bw.writerow([iid, b.class_id] + [f"{v:.6f}" for v in (b.cx, b.cy, b.w, b.h)])
            scenes.append(sc)
    write_manifest(out / "manifest.txt", entries)
    return scenes


@dataclass
class Dataset:
    """A dataset folder loaded into memory (float64 images in [0, 1])."""

    ids: list[str]
    seeds: list[int]
    clean: np.ndarray
    degraded: np.ndarray
    boxes: list[list[Box]]
    height: int
    width: int

    def __len__(self) -> int:
        return len(self.ids)


def load_dataset(path) -> Dataset:
    root = Path(path)
    if not (root / "params.csv").exists():
        raise DataError(f"{root} is not a dataset folder (params.csv missing)")
    ids, seeds = [], []
    hw = None
    with open(root / "params.csv", newline="") as fh:
        for rec in csv.DictReader(fh):
            ids.append(rec["image_id"])
            seeds.append(int(rec["seed"]))
            hw = (int(rec["height"]), int(rec["width"]))
    boxes: dict[str, list[Box]] = {i: [] for i in ids}
    with open(root / "boxes.csv", newline="") as fh:
        for rec in csv.DictReader(fh):
            boxes[rec["image_id"]].append(Box(float(rec["cx"]), float(rec["cy"]), float(rec["w"]),
                                              float(rec["h"]), int(rec["class_id"])))
    clean = np.stack([ppm_read(root / "clean" / f"{i}.ppm") for i in ids]) if ids else np.zeros((0, 3, 1, 1))
    degraded = np.stack([ppm_read(root / "degraded" / f"{i}.ppm") for i in ids]) if ids else np.zeros((0, 3, 1, 1))
    h, w = hw if hw else (0, 0)
    return Dataset(ids, seeds, clean, degraded, [boxes[i] for i in ids], h, w)


def dataset_digests(path) -> dict[str, str]:
    """sha256 of every file in a dataset folder, keyed by relative path."""
    root = Path(path)
    return {str(p.relative_to(root)): file_digest(p) for p in sorted(root.rglob("*")) if p.is_file()}


def crop_box_safe(size: int, crop: int, rng: Xoshiro256) -> int:
    """Random crop origin aligned to 4 pixels."""
    span = (size - crop) // 4
    return 4 * rng.integers(0, span + 1)
