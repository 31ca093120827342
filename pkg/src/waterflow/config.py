"""Run configuration: a ``key = value`` text file with typed, documented keys.

Unknown keys are rejected. Where the original training setup differs from
the desk defaults, the original value is noted next to the key.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _floats(v: str) -> tuple:
    return tuple(float(x) for x in v.split(",") if x.strip())


def _names(v: str) -> tuple:
    return tuple(x.strip() for x in v.split(",") if x.strip())


@dataclass
class RunConfig:
    precision: str = "float32"          # float32 for training, float64 for verification
    image_size: int = 64                # original crops: 384
    n_blocks: int = 3
    squeeze_per_block: bool = False
    hidden: int = 16
    actnorm_data_init: bool = False
    inv1x1_orthogonal: bool = False     # identity start keeps colour groups aligned with the coupling split
    colour_fields: bool = True          # coupling and encoder emit one smooth field per colour
    t_max: float = 20.0
    hpe_gain: float = 20.0              # encoder head output scale
    hpe_t_bias: float = -5.0            # initial raw transmission, so T starts near 1
    hpe_inputs: tuple = ("depth", "gradient", "color")

    lambda1: float = 1.0                # contrastive
    lambda2: float = 100.0              # style
    lambda3: float = 0.1                # detection
    lambda4: float = 1.0                # bilateral L1
    rho: tuple = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    lr: float = 1e-4                    # original: 1e-6
    det_lr: float = 1e-3                # detection head; it starts from scratch
    lr_schedule: str = "cosine"         # "constant" keeps lr fixed
    batch_size: int = 2
    grad_clip: float = 1.0
    iters_enhance: int = 2000           # original: 5e5
    iters_detect: int = 1000            # original: 5e5
    iters_joint: int = 1000             # original: 3e5
    log_interval: int = 50

    seed: int = 1
    train_seed_base: int = 0
    val_seed_base: int = 1_000_000

    detect_input: str = "enhanced"      # "raw" trains the detector on degraded images
    freeze_detector: bool = False
    freeze_enhancer: bool = False
    enhance_ckpt: str = ""
    detect_ckpt: str = ""

    _parsers: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule must be constant or cosine")
        if not 1 <= self.n_blocks <= 5:
            raise ConfigError("n_blocks must be within 1..5")
        if self.image_size % (2 ** (self.n_blocks if self.squeeze_per_block else 1)):
            raise ConfigError("image_size is not divisible by the squeeze factor")
        if self.detect_input not in ("enhanced", "raw"):
            raise ConfigError("detect_input must be 'enhanced' or 'raw'")
        if len(self.rho) != 5:
            raise ConfigError("rho needs five comma-separated weights")
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        bad = set(self.hpe_inputs) - {"depth", "gradient", "color"}
        if bad:
            raise ConfigError(f"unknown hpe_inputs: {sorted(bad)}")
        if self.lr <= 0 or self.det_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.t_max <= 1:
            raise ConfigError("t_max must exceed 1")

    @property
    def dtype(self):
        import numpy as np
        return np.float32 if self.precision == "float32" else np.float64

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls) if not f.name.startswith("_")]

    def set(self, key: str, raw: str) -> None:
        known = {f.name: f for f in fields(self) if not f.name.startswith("_")}
        if key not in known:
            raise ConfigError(f"unknown config key: {key!r}")
        current = getattr(self, key)
        try:
            if isinstance(current, bool):
                val = _bool(raw)
            elif isinstance(current, int):
                val = int(float(raw)) if "e" in raw.lower() else int(raw)
            elif isinstance(current, float):
                val = float(raw)
            elif key == "rho":
                val = _floats(raw)
            elif isinstance(current, tuple):
                val = _names(raw)
            else:
                val = raw.strip()
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
        setattr(self, key, val)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{ln}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            try:
                cfg.set(key, val)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{ln}: {exc}") from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        return cls.from_text(Path(path).read_text(), str(path))

    def to_text(self) -> str:
        lines = []
        for key in self.keys():
            v = getattr(self, key)
            if isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, tuple):
                s = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            else:
                s = str(v)
            lines.append(f"{key} = {s}")
        return "\n".join(lines) + "\n"
