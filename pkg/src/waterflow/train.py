"""Training phases: ``enhance`` (flow + encoder alone), ``detect`` (head on
frozen flow outputs) and ``joint`` (everything with the full weighted loss).

Batches are drawn from a generator re-seeded from (seed, phase, iteration),
so a resumed run sees exactly the batches an uninterrupted run would.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad as G
from .config import ConfigError, RunConfig
from .data import Dataset, checkpoint_load, checkpoint_save
from .detect import DetHead, det_loss
from .flow import FlowError
from .model import WaterFlow, config_from_meta, new_detector
from .perception import EnhanceLosses, FeatureExtractor, LossError, LossWeights, total_loss
from .prng import Xoshiro256, derive_seed

logger = logging.getLogger(__name__)

PHASES = ("enhance", "detect", "joint")
PHASE_IDS = {"enhance": 11, "detect": 12, "joint": 13}
LOSS_COLUMNS = ["iteration", "contrastive", "style", "detection", "l1", "total"]
CKPT_NAME = "checkpoint.wflo"


class TrainingAborted(RuntimeError):
    pass


def loss_weights(cfg: RunConfig, with_detection: bool) -> LossWeights:
    return LossWeights(cfg.lambda1, cfg.lambda2, cfg.lambda3 if with_detection else 0.0,
                       cfg.lambda4, tuple(cfg.rho))


def batch_indices(cfg: RunConfig, phase: str, it: int, n: int) -> list[int]:
    rng = Xoshiro256(derive_seed(cfg.seed, PHASE_IDS[phase], it))
    return [rng.integers(0, n) for _ in range(cfg.batch_size)]


def crop_batch(cfg: RunConfig, phase: str, it: int, *arrays):
    """Random aligned crop to ``image_size`` when the data is larger."""
    h, w = arrays[0].shape[-2:]
    s = cfg.image_size
    if s >= h and s >= w:
        return arrays
    rng = Xoshiro256(derive_seed(cfg.seed, PHASE_IDS[phase], it, 99))
    y = 4 * rng.integers(0, (h - s) // 4 + 1)
    x = 4 * rng.integers(0, (w - s) // 4 + 1)
    return tuple(a[..., y:y + s, x:x + s] for a in arrays)


# --- checkpoint assembly ---------------------------------------------------------------------

def model_states(model: WaterFlow | None, det: DetHead | None) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    if model is not None:
        out.update(model.meta())
        out.update({k: v.data for k, v in model.named_parameters()})
    if det is not None:
        out.update({f"det.{k}": v.data for k, v in det.named_parameters()})
    return out


def load_models(path, cfg: RunConfig | None = None, need_detector: bool = False):
    """Rebuild (model-or-None, detector-or-None, raw states) from a checkpoint."""
    states = checkpoint_load(path)
    cfg = config_from_meta(states, cfg)
    model = WaterFlow(cfg)
    own = {k for k, _ in model.named_parameters()}
    det = None
    det_keys = {k[4:]: v for k, v in states.items() if k.startswith("det.")}
    if det_keys:
        det = new_detector(cfg)
        det.load_state_dict(det_keys)
    elif need_detector:
        raise ConfigError(f"{path} holds no detector parameters")
    model_keys = {k: v for k, v in states.items() if k in own}
    stray = sorted(k for k in states if k not in own and not k.startswith(("det.", "meta.", "adam.", "train.")))
    if stray:
        raise KeyError(f"unknown parameter names in checkpoint: {', '.join(stray)}")
    if model_keys:
        model.load_state_dict(model_keys)
    else:
        model = None  # a detector trained on raw degraded images
    return model, det, states


# --- trainer -----------------------------------------------------------------------------------

@dataclass
class Trainer:
    cfg: RunConfig
    data: Dataset
    phase: str
    out_dir: Path
    model: WaterFlow | None = None
    det: DetHead | None = None
    iteration: int = 0
    adam_state: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")
        self.out_dir = Path(self.out_dir)
        if self.phase != "enhance" and self.cfg.image_size != self.data.height:
            raise ConfigError("detection phases need image_size equal to the data size")
        self.extractor = FeatureExtractor(self.cfg.dtype)
        self.losses = EnhanceLosses(self.extractor, loss_weights(self.cfg, self.phase == "joint"))

    # parameters updated in this phase, as (checkpoint name, tensor)
    def trainable(self) -> list[tuple[str, G.Tensor]]:
        out = []
        train_enh = self.phase == "enhance" or (self.phase == "joint" and not self.cfg.freeze_enhancer)
        train_det = self.phase == "detect" or (self.phase == "joint" and not self.cfg.freeze_detector)
        if self.model is not None:
            self.model.set_trainable(train_enh)
            if train_enh:
                out += list(self.model.named_parameters())
        if self.det is not None:
            self.det.set_trainable(train_det)
            if train_det:
                out += [(f"det.{k}", v) for k, v in self.det.named_parameters()]
        return out

    def total_iters(self) -> int:
        return {"enhance": self.cfg.iters_enhance, "detect": self.cfg.iters_detect,
                "joint": self.cfg.iters_joint}[self.phase]

    # --- persistence -----------------------------------------------------------------------
    def states(self) -> dict[str, np.ndarray]:
        out = model_states(self.model, self.det)
        names = [k for k, _ in self.trainable()]
        if self.adam_state:
            for k, m, v in zip(names, self.adam_state["m"], self.adam_state["v"]):
                out[f"adam.m.{k}"] = m
                out[f"adam.v.{k}"] = v
            out["adam.t"] = np.array([self.adam_state["t"]], dtype=np.float32)
        out["train.iteration"] = np.array([self.iteration], dtype=np.float32)
        out["train.phase"] = np.array([PHASE_IDS[self.phase]], dtype=np.float32)
        return out

    def save(self, path=None) -> Path:
        path = Path(path or self.out_dir / CKPT_NAME)
        checkpoint_save(self.states(), path)
        return path

    def restore_optimizer(self, states: dict[str, np.ndarray]) -> None:
        if "train.iteration" not in states:
            return
        if int(states["train.phase"][0]) != PHASE_IDS[self.phase]:
            raise ConfigError("checkpoint was written by a different phase")
        self.iteration = int(states["train.iteration"][0])
        if "adam.t" in states:
            names = [k for k, _ in self.trainable()]
            self.adam_state = {
                "m": [states[f"adam.m.{k}"].astype(self.cfg.dtype) for k in names],
                "v": [states[f"adam.v.{k}"].astype(self.cfg.dtype) for k in names],
                "t": int(states["adam.t"][0]),
            }

    def learning_rate(self, it: int, base: float | None = None, before: int = 0) -> float:
        """``base`` (default ``lr``) throughout, or with ``lr_schedule =
        cosine`` annealed towards zero. ``before`` iterations of an earlier
        phase count as part of the same schedule, so a module that is
        fine-tuned in the joint phase continues its annealing rather than
        restarting at the full rate."""
        base = self.cfg.lr if base is None else base
        if self.cfg.lr_schedule == "constant":
            return base
        frac = min((before + it) / max(before + self.total_iters(), 1), 1.0)
        return base * 0.5 * (1.0 + math.cos(math.pi * frac))

    def rates(self, it: int, names: list[str]) -> list[float]:
        joint = self.phase == "joint"
        lr = self.learning_rate(it, self.cfg.lr, self.cfg.iters_enhance if joint else 0)
        det_lr = self.learning_rate(it, self.cfg.det_lr, self.cfg.iters_detect if joint else 0)
        return [det_lr if k.startswith("det.") else lr for k in names]

    # --- one step ----------------------------------------------------------------------------
    def step(self, it: int) -> dict[str, float]:
        cfg = self.cfg
        idx = batch_indices(cfg, self.phase, it, len(self.data))
        I_u = self.data.degraded[idx]
        I_r = self.data.clean[idx]
        boxes = [self.data.boxes[i] for i in idx]
        if self.phase == "enhance":
            I_u, I_r = crop_batch(cfg, self.phase, it, I_u, I_r)
        params = self.trainable()
        for _, p in params:
            p.grad = None

        parts: dict = {}
        if self.phase in ("enhance", "joint"):
            ctx = self.model.context(I_u)
            enhanced, _ = self.model.flow.forward(G.Tensor(I_u.astype(cfg.dtype)), ctx)
            degraded_est, _ = self.model.flow.inverse(G.Tensor(I_r.astype(cfg.dtype)), ctx)
            parts = self.losses.parts(enhanced, G.Tensor(I_r.astype(cfg.dtype)),
                                      G.Tensor(I_u.astype(cfg.dtype)), degraded_est)
            if self.phase == "joint":
                parts["detection"], _ = det_loss(self.det(enhanced), boxes, cfg.focal_alpha, cfg.focal_gamma)
            loss = total_loss(parts, self.losses.weights)
        else:
            if cfg.detect_input == "enhanced":
                with G.no_grad():
                    enhanced, _ = self.model.enhance(I_u)
                x = G.Tensor(enhanced.data)
            else:
                x = G.Tensor(I_u.astype(cfg.dtype))
            loss, _ = det_loss(self.det(x), boxes, cfg.focal_alpha, cfg.focal_gamma)
            parts["detection"] = loss

        if not math.isfinite(loss.item()):
            raise G.NonFiniteError("total loss")
        G.backward(loss)
        tensors = [p for _, p in params]
        if cfg.grad_clip > 0:
            G.clip_grad_norm(tensors, cfg.grad_clip)
        G.adam_step(tensors, [p.grad for p in tensors], self.adam_state, self.rates(it, [k for k, _ in params]))
        for _, p in params:
            p.grad = None
        out = {k: v.item() for k, v in parts.items()}
        out["total"] = loss.item()
        return out

    # --- loop ---------------------------------------------------------------------------------
    def run(self, iters: int | None = None, stop_at: int | None = None) -> Path:
        """Train until ``iters`` total iterations (or ``stop_at``, for tests of
        resumption). Writes ``loss.csv`` and the checkpoint into ``out_dir``."""
        iters = self.total_iters() if iters is None else iters
        end = iters if stop_at is None else min(stop_at, iters)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = self.out_dir / "loss.csv"
        if self.iteration == 0 or not csv_path.exists():
            with open(csv_path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(LOSS_COLUMNS)
        acc: dict[str, list] = {}
        t0 = time.perf_counter()
        for it in range(self.iteration, end):
            try:
                vals = self.step(it)
            except (G.NonFiniteError, LossError, FlowError) as exc:
                raise TrainingAborted(f"iteration {it}: {exc}; last good checkpoint kept") from exc
            self.iteration = it + 1
            for k, v in vals.items():
                acc.setdefault(k, []).append(v)
            if self.iteration == 1 or self.iteration % self.cfg.log_interval == 0 or self.iteration == end:
                self._log(csv_path, acc)
                acc = {}
                self.save()
                logger.info("%s it %d/%d %.1fs", self.phase, self.iteration, iters, time.perf_counter() - t0)
        self.save()
        return self.out_dir / CKPT_NAME

    def _log(self, path: Path, acc: dict) -> None:
        row = [self.iteration]
        for col in LOSS_COLUMNS[1:]:
            row.append(f"{np.mean(acc[col]):.6f}" if col in acc else "")
        self.rows.append(row)
        with open(path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(row)


def _load_enhancer(path, cfg: RunConfig) -> WaterFlow:
    model, _, _ = load_models(path, cfg)
    if model is None:
        raise ConfigError(f"{path} holds no enhancer parameters")
    return model


def build_trainer(cfg: RunConfig, data: Dataset, phase: str, out_dir, resume=None,
                  from_scratch: bool = False) -> Trainer:
    """Assemble models for a phase, honouring pretrained checkpoints named in
    the config (``enhance_ckpt`` for detect/joint, ``detect_ckpt`` for joint)."""
    model = det = None
    if phase == "enhance":
        model = WaterFlow(cfg)
    elif phase == "detect":
        if cfg.detect_input == "enhanced":
            if cfg.enhance_ckpt:
                model = _load_enhancer(cfg.enhance_ckpt, cfg)
            elif from_scratch:
                model = WaterFlow(cfg)
            else:
                raise ConfigError("detect phase on enhanced inputs needs enhance_ckpt (or --from-scratch)")
        det = new_detector(cfg)
    else:
        if cfg.enhance_ckpt and cfg.detect_ckpt:
            model = _load_enhancer(cfg.enhance_ckpt, cfg)
            _, det, _ = load_models(cfg.detect_ckpt, cfg, need_detector=True)
        elif from_scratch:
            model, det = WaterFlow(cfg), new_detector(cfg)
        else:
            raise ConfigError("joint phase needs enhance_ckpt and detect_ckpt (or --from-scratch)")
    tr = Trainer(cfg, data, phase, Path(out_dir), model, det)
    if resume:
        rmodel, rdet, states = load_models(resume, cfg)
        if tr.model is not None:
            tr.model.load_state_dict({k: v for k, v in states.items() if k.startswith(("flow.", "hpe."))})
        if tr.det is not None and rdet is not None:
            tr.det = rdet
        tr.restore_optimizer(states)
    return tr
