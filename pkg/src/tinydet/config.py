"""Run configuration: scaling presets, flat key=value config files."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .adapter import VARIANTS
from .neck import FUSION_MODES


class ConfigError(ValueError):
    """Anything wrong with a config file or CLI argument combination."""


@dataclass(frozen=True)
class Preset:
    base_channels: int  # adapter base channel C
    d_back: int
    d_neck: int
    d_dec: int
    n_back_blocks: int
    n_dec_layers: int
    n_queries: int
    n_heads_back: int
    n_heads_dec: int
    default_extent: int


PRESETS = {
    "toy": Preset(16, 64, 64, 64, 4, 2, 10, 4, 4, 64),
    "s": Preset(16, 192, 192, 192, 12, 4, 300, 3, 8, 640),
    "m": Preset(16, 256, 256, 256, 12, 4, 300, 4, 8, 640),
    "l": Preset(32, 384, 256, 256, 12, 4, 300, 6, 8, 640),
    "x": Preset(64, 384, 256, 256, 12, 6, 300, 6, 8, 640),
    "xl": Preset(128, 768, 384, 256, 12, 6, 300, 12, 8, 640),
}


@dataclass
class RunConfig:
    preset: str = "toy"
    neck_mode: str = "pbm"
    ssa_variant: str = "proposed"  # adapter VARIANTS or "none"
    n_bifusion: int = 2
    fusion_mode: str = "add_deep_concat_shallow"
    emit_f2_tokens: bool = False
    seed: int = 0
    lr: float = 2e-3
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 32
    train_dir: str = ""
    eval_dir: str = ""
    num_classes: int = 3
    image_extent: int = 64
    # dataset generation
    n_images: int = 100
    objects_min: int = 1
    objects_max: int = 3
    mix_small: float = 0.7
    mix_medium: float = 0.2
    mix_large: float = 0.1
    # ablation grid
    n_seeds: int = 3

    def validate(self) -> "RunConfig":
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.neck_mode not in ("baseline3", "pbm"):
            raise ConfigError(f"unknown neck_mode {self.neck_mode!r}")
        if self.ssa_variant not in VARIANTS + ("none",):
            raise ConfigError(f"unknown ssa_variant {self.ssa_variant!r}")
        if self.n_bifusion not in (0, 1, 2):
            raise ConfigError("n_bifusion must be 0, 1 or 2")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}")
        three_scale = self.neck_mode == "baseline3" or self.n_bifusion == 0
        if three_scale and self.ssa_variant not in ("f3_only", "none"):
            raise ConfigError(
                f"ssa_variant {self.ssa_variant!r} emits a 1/4-scale level the 3-scale neck cannot consume; "
                "use f3_only or none"
            )
        if not three_scale and self.ssa_variant == "f3_only":
            raise ConfigError("bi-fusion at level 3 needs a 1/4-scale input; f3_only does not emit one")
        if self.emit_f2_tokens and three_scale:
            raise ConfigError("emit_f2_tokens requires the pbm neck with n_bifusion >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        for name in ("lr", "weight_decay", "mix_small", "mix_medium", "mix_large"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.lr == 0:
            raise ConfigError("lr must be positive")
        for name in ("batch_size", "num_classes", "n_seeds"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        for name in ("epochs", "n_images", "objects_min", "objects_max"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.objects_min > self.objects_max:
            raise ConfigError("objects_min exceeds objects_max")
        if self.image_extent % 32:
            raise ConfigError("image_extent must be divisible by 32")
        if abs(self.mix_small + self.mix_medium + self.mix_large - 1.0) > 1e-6:
            raise ConfigError("mixture weights must sum to 1")
        return self


_BOOL = {"0": False, "1": True, "false": False, "true": True}


def _parse_value(name: str, raw: str, py_type):
    try:
        if py_type is bool:
            return _BOOL[raw.lower()]
        return py_type(raw)
    except (ValueError, KeyError) as e:
        raise ConfigError(f"bad value for {name!r}: {raw!r}") from e


def parse_config_text(text: str) -> RunConfig:
    """Flat ``key = value`` lines; '#' comments; unknown keys are rejected."""
    known = {f.name: f.type for f in fields(RunConfig)}
    types = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, types[key])
    return replace(RunConfig(), **values).validate()


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text())


def config_to_text(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {int(v) if isinstance(v := getattr(cfg, f.name), bool) else v}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"
