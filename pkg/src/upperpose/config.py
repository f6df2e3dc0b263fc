"""Run configuration: a flat key-value text format with fail-fast parsing.

Every field has a default; a fully defaulted config trains. Unknown keys in
a config file are errors."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError


@dataclass
class RunConfig:
    seed: int = 0
    steps: int = 3000
    batch_size: int = 4
    learning_rate: float = 1e-4           # Adam
    interaction: str = "full"             # full | variant1 | none
    pfe: str = "on"                       # on | off (variant2)
    feature_dim: int = 64
    prior_tokens: int = 12
    strip_len: int = 7
    heads: int = 4
    roi_grid: int = 4
    dataset_size: int = 16
    occlusion_prob: float = 0.0
    image_size: int = 64
    checkpoint_every: int = 1000
    out_dir: str = "runs/default"
    # evaluation / ablation defaults
    eval_count: int = 200
    eval_occlusion: float = 0.5
    ablation_seeds: int = 3

    def validate(self) -> "RunConfig":
        if self.interaction not in ("full", "variant1", "none"):
            raise ConfigError(f"interaction must be full|variant1|none, got {self.interaction!r}")
        if self.pfe not in ("on", "off"):
            raise ConfigError(f"pfe must be on|off, got {self.pfe!r}")
        if self.prior_tokens % 3 != 0:
            raise ConfigError(f"prior_tokens must be a multiple of 3, got {self.prior_tokens}")
        if self.strip_len % 2 == 0:
            raise ConfigError(f"strip_len must be odd, got {self.strip_len}")
        if self.feature_dim % self.heads != 0:
            raise ConfigError(f"feature_dim {self.feature_dim} not divisible by heads {self.heads}")
        if self.image_size % 4 != 0:
            raise ConfigError(f"image_size must be divisible by 4, got {self.image_size}")
        if self.image_size // 4 < self.prior_tokens:
            raise ConfigError(
                f"feature map height {self.image_size // 4} cannot be pooled "
                f"into {self.prior_tokens} prior tokens; raise image_size or "
                f"lower prior_tokens")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ConfigError(f"occlusion_prob must be in [0, 1], got {self.occlusion_prob}")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    ftype = _FIELDS[name].type
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_config_text(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = _coerce(key, raw)
    return RunConfig(**values).validate()


def load_config(path) -> RunConfig:
    with open(path, "r") as fh:
        return parse_config_text(fh.read())


def dump_config(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(RunConfig)]
    return "\n".join(lines) + "\n"
