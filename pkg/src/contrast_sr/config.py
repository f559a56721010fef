"""Model and training configuration, named presets, and TOML config files."""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError


@dataclass
class ModelConfig:
    scale: int = 4
    embed_dim: int = 210
    num_groups: int = 6           # residual groups in the deep stage
    blocks_per_group: int = 6     # state-space blocks preceding each attention block
    window_size: int = 32
    overlap_ratio: float = 0.5
    num_heads: int = 6
    mlp_ratio: float = 2.0
    state_dim: int = 1
    ssm_ratio: float = 1.0
    dt_rank: int | None = None    # None = ceil(inner_dim / 16)
    use_cab: bool = False
    ffn_kind: str = "sgfn"        # "sgfn" | "mlp"
    ssm_gate: bool = False        # parallel SiLU gate branch in the SS2D mixer
    recon_dim: int = 64           # width of the reconstruction head

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.scale not in (2, 3, 4):
            raise ConfigError(f"scale must be 2, 3 or 4, got {self.scale}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by "
                              f"num_heads {self.num_heads}")
        hidden = self.mlp_ratio * self.embed_dim
        if hidden != int(hidden) or int(hidden) % 2:
            raise ConfigError(f"mlp_ratio * embed_dim must be an even integer, got {hidden}")
        if self.ffn_kind not in ("sgfn", "mlp"):
            raise ConfigError(f"ffn_kind must be 'sgfn' or 'mlp', got {self.ffn_kind!r}")
        if not 0.0 <= self.overlap_ratio < 1.0:
            raise ConfigError(f"overlap_ratio must be in [0, 1), got {self.overlap_ratio}")
        inner = self.inner_dim
        if self.dt_rank is not None and self.dt_rank < 1:
            raise ConfigError("dt_rank must be positive")
        for name in ("embed_dim", "num_groups", "blocks_per_group", "window_size",
                     "num_heads", "state_dim", "recon_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if inner < 1:
            raise ConfigError("ssm_ratio * embed_dim must be >= 1")

    @property
    def inner_dim(self):
        return int(round(self.embed_dim * self.ssm_ratio))

    @property
    def ffn_hidden(self):
        return int(self.mlp_ratio * self.embed_dim)

    @property
    def effective_dt_rank(self):
        return self.dt_rank if self.dt_rank is not None else max(1, math.ceil(self.inner_dim / 16))


@dataclass
class TrainConfig:
    total_iters: int = 500_000
    batch_size: int = 32
    patch_size: int = 64          # LR-side patch edge
    base_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    milestones: tuple = (250_000, 400_000, 450_000, 475_000)
    lr_decay: float = 0.5
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 5000
    augment: bool = True

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        self.validate()

    def validate(self):
        if self.total_iters < 1:
            raise ConfigError("total_iters must be positive")
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ConfigError("milestones must be strictly increasing")
        if self.milestones and self.milestones[-1] >= self.total_iters:
            raise ConfigError("milestones must lie below total_iters")
        if self.batch_size < 1 or self.patch_size < 1:
            raise ConfigError("batch_size and patch_size must be positive")


MODEL_PRESETS = {
    "contrast": dict(scale=4, embed_dim=210, num_groups=6, blocks_per_group=6,
                     window_size=32, num_heads=6),
    "contrast-s": dict(scale=4, embed_dim=150, num_groups=6, blocks_per_group=6,
                       window_size=16, num_heads=6),
    "tiny": dict(scale=2, embed_dim=8, num_groups=1, blocks_per_group=2,
                 window_size=4, num_heads=2, recon_dim=16),
}

TRAIN_PRESETS = {
    "contrast": dict(),
    "contrast-s": dict(base_lr=2e-4),
    "tiny": dict(total_iters=500, batch_size=4, patch_size=16, base_lr=1e-3,
                 milestones=(), log_every=50, checkpoint_every=250),
}


def model_preset(name, **overrides):
    if name not in MODEL_PRESETS:
        raise ConfigError(f"unknown model preset {name!r}; "
                          f"choose from {sorted(MODEL_PRESETS)}")
    return ModelConfig(**{**MODEL_PRESETS[name], **overrides})


def train_preset(name, **overrides):
    if name not in TRAIN_PRESETS:
        raise ConfigError(f"unknown train preset {name!r}; "
                          f"choose from {sorted(TRAIN_PRESETS)}")
    return TrainConfig(**{**TRAIN_PRESETS[name], **overrides})


def _build_section(table, cls, presets, what):
    table = dict(table)
    preset = table.pop("preset", None)
    base = dict(presets[preset]) if preset is not None and preset in presets else None
    if preset is not None and base is None:
        raise ConfigError(f"unknown {what} preset {preset!r}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    merged = {**(base or {}), **table}
    try:
        return cls(**merged)
    except TypeError as exc:
        raise ConfigError(f"bad {what} config: {exc}") from None


DATA_KEYS = {"root", "manifest", "scale", "on_the_fly_lr"}


def load_config_file(path):
    """Parse a TOML config with [model], [train] and [data] tables.

    Returns (ModelConfig, TrainConfig, data_table).  Unknown keys anywhere
    are rejected.  CONTRAST_SEED in the environment overrides the seed.
    """
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None

    unknown = set(doc) - {"model", "train", "data"}
    if unknown:
        raise ConfigError(f"unknown top-level tables: {sorted(unknown)}")

    model = _build_section(doc.get("model", {}), ModelConfig, MODEL_PRESETS, "model")
    train = _build_section(doc.get("train", {}), TrainConfig, TRAIN_PRESETS, "train")
    data = dict(doc.get("data", {}))
    bad = set(data) - DATA_KEYS
    if bad:
        raise ConfigError(f"unknown data keys: {sorted(bad)}")

    env_seed = os.environ.get("CONTRAST_SEED")
    if env_seed is not None:
        try:
            train.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"CONTRAST_SEED must be an integer, got {env_seed!r}") from None
    return model, train, data
