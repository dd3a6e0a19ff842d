"""key=value config file grammar and the pipeline's tunable settings.

One `key = value` pair per line, '#' starts a comment.  Keys use dotted
section prefixes; values are coerced by the type of the dataclass default.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(value: str, like):
    if isinstance(like, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        parts = [p for p in value.replace(",", " ").split() if p]
        return tuple(type(like[0])(p) for p in parts)
    return value


@dataclass
class ModelConfig:
    feature_dim: int = 16            # F channels of the 3D feature volume
    spade_channels: tuple = (64, 32, 16)
    spade_hidden: int = 32           # modulation stack width
    density_width: int = 32
    color_width: int = 64
    color_layers: int = 6
    bg_width: int = 64
    sky_hidden: int = 32
    pe_levels: int = 6
    app_dim: int = 8
    n_ref_views: int = 3             # K retrieved reference views
    use_3d_features: bool = True     # False: 2D-feature-only ablation


@dataclass
class SamplingConfig:
    n_uniform: int = 32
    n_importance: int = 32           # split across importance_iters rounds
    importance_iters: int = 2
    n_background: int = 32
    near: float = 0.05
    far: float = 1000.0
    last_delta: float = 10.0         # spacing assigned to the final sample


@dataclass
class FusionConfig:
    sigma: float = 0.2               # consistency threshold, meters
    voxel_size: float = 0.4          # desk-scale default; paper scale is 0.2


@dataclass
class LossConfig:
    lambda_lidar: float = 0.1
    lambda_sky: float = 1.0
    lambda_entropy: float = 0.002
    eps_start: float = 0.5
    eps_min: float = 0.1


@dataclass
class TrainConfig:
    steps: int = 20000
    rays_per_batch: int = 4096
    lr: float = 5e-3
    seed: int = 1
    lidar: bool = True
    lidar_rays: int = 256
    masking: bool = True
    mask_ratio: float = 0.1
    mask_block: int = 4
    mask_prob: float = 0.5
    eps_decay_fraction: float = 0.5  # horizon of the lidar bound decay
    cosine_lr: bool = False
    finetune_steps: int = 1000
    finetune_lr_volume: float = 5e-3
    finetune_lr_heads: float = 5e-4
    finetune_rays: int = 2048
    finetune_volume_only: bool = False
    log_every: int = 50


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def apply(self, pairs: dict[str, str]) -> "Config":
        for key, value in pairs.items():
            if "." not in key:
                raise ValueError(f"unknown config key {key!r} (missing section)")
            section, name = key.split(".", 1)
            if not hasattr(self, section):
                raise ValueError(f"unknown config section {section!r}")
            sub = getattr(self, section)
            if not any(f.name == name for f in fields(sub)):
                raise ValueError(f"unknown config key {key!r}")
            setattr(sub, name, _coerce(value, getattr(sub, name)))
        return self


def load_config(path=None, overrides: dict[str, str] | None = None) -> Config:
    cfg = Config()
    if path is not None:
        cfg.apply(parse_config_text(Path(path).read_text()))
    if overrides:
        cfg.apply(overrides)
    return cfg
