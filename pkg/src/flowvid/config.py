"""Run configuration: model dims, loss weights, optimizer settings.

Configs live in flat ``key=value`` text files so every run is reproducible
from a single small artifact. Unknown keys are an error, not a warning.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

SEMANTIC_MODES = ("none", "concat", "split")
VARIANTS = ("full", "no_flow")


@dataclass(frozen=True)
class RunConfig:
    # sequence / frame geometry
    t: int = 8
    height: int = 128
    width: int = 128
    num_classes: int = 2
    fg_classes: tuple[int, ...] = (1,)
    # latent dims: z = z_content || z_motion, motion split 896/128 in split mode
    z_content_dim: int = 128
    z_motion_dim: int = 1024
    z_fg_dim: int = 896
    z_bg_dim: int = 128
    semantic_mode: str = "none"
    variant: str = "full"
    # loss weights
    lambda_r: float = 1.0
    lambda_fs: float = 1.0
    lambda_fc: float = 1.0
    lambda_l1: float = 1.0
    lambda_p: float = 0.1
    beta: float = 0.1
    # model width dial (channel counts scale with this)
    base_channels: int = 16
    # optimizer / schedule
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 8
    steps: int = 2000
    kl_warmup_steps: int = 0  # linear ramp of the KL weight from 0 to beta
    checkpoint_every: int = 500
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):
        if self.t < 1:
            raise ValueError(f"t must be >= 1, got {self.t}")
        for name, s in (("height", self.height), ("width", self.width)):
            if s < 16 or (s & (s - 1)) != 0:
                raise ValueError(f"{name} must be a power of two >= 16, got {s}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        for c in self.fg_classes:
            if not 0 <= c < self.num_classes:
                raise ValueError(f"fg class {c} outside [0, {self.num_classes})")
        if self.semantic_mode not in SEMANTIC_MODES:
            raise ValueError(f"semantic_mode must be one of {SEMANTIC_MODES}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.semantic_mode == "split" and self.z_fg_dim + self.z_bg_dim != self.z_motion_dim:
            raise ValueError(
                f"split mode requires z_fg_dim + z_bg_dim == z_motion_dim, "
                f"got {self.z_fg_dim} + {self.z_bg_dim} != {self.z_motion_dim}"
            )
        for name in ("lambda_r", "lambda_fs", "lambda_fc", "lambda_l1", "lambda_p", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("batch_size must be >= 1 and lr > 0")

    @property
    def fg_mask_channels(self) -> tuple[int, ...]:
        return tuple(sorted(self.fg_classes))

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "fg_classes":
                v = ",".join(str(c) for c in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _parse_value(name: str, raw: str, typ):
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ is str:
        return raw
    # fg_classes: comma-separated ints, empty string means empty set
    return tuple(int(x) for x in raw.split(",") if x.strip() != "")


def config_from_text(text: str) -> RunConfig:
    """Parse a flat key=value config. Unknown keys raise ValueError."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    types = {"fg_classes": tuple}
    kw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in fields:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        typ = types.get(key, fields[key].type)
        if isinstance(typ, str):  # from __future__ annotations
            typ = {"int": int, "float": float, "str": str}.get(typ, tuple)
        kw[key] = _parse_value(key, raw, typ)
    return RunConfig(**kw)


def load_config(path: str | Path) -> RunConfig:
    return config_from_text(Path(path).read_text())


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(config.to_text())
