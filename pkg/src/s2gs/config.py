"""Plain-text key=value configuration.

Every tunable documented in the module design notes is a key here so runs can
be reproduced from a single file.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError


@dataclass
class Config:
    # geometry stream
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    encoder_layers: int = 2
    encoder_heads: int = 4
    head_hidden: int = 64
    near_plane: float = 0.01
    huber_delta: float = 1.0
    # scene / renderer
    scene_budget: int = 120000
    pixel_stride: int = 2
    cov_dilation: float = 0.3
    alpha_clamp: float = 0.99
    tile_size: int = 16
    min_splat_alpha: float = 0.0039
    label_alpha_gate: float = 0.5
    oracle_opacity: float = 0.95
    oracle_footprint_px: float = 0.55
    # semantic stream
    queries: int = 16
    num_classes: int = 6
    feature_dim: int = 64
    decoder_rounds: int = 3
    identity_dim: int = 16
    temperature: float = 0.07
    feature_seed: int = 7771
    # instance memory
    ema_alpha: float = 0.2
    sim_threshold: float = 0.5
    conf_threshold: float = 0.5
    min_area: int = 16
    max_age: int = 10
    detection_overlap: float = 0.6
    # open vocabulary
    semantic_dim: int = 32
    teacher_noise: float = 0.05
    aggregate_prob: float = 0.5
    vocab_seed: int = 4242

    def validate(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.encoder_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by encoder_heads {self.encoder_heads}"
            )
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ConfigError(f"ema_alpha must lie in [0, 1], got {self.ema_alpha}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.pixel_stride < 1:
            raise ConfigError(f"pixel_stride must be >= 1, got {self.pixel_stride}")
        return self


def load_config(path=None, overrides=None):
    """Defaults, optionally updated from a key=value file and override pairs."""
    cfg = Config()
    known = {f.name: f.type for f in fields(Config)}
    items = []
    if path is not None:
        try:
            with open(path, "r", encoding="ascii") as fh:
                for ln, line in enumerate(fh, 1):
                    line = line.strip()
                    if not line or line.startswith("#"):
                        continue
                    if "=" not in line:
                        raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
                    key, val = line.split("=", 1)
                    items.append((key.strip(), val.strip()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if overrides:
        items.extend(overrides)
    for key, val in items:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(cfg, key)
        try:
            parsed = type(current)(val)
        except ValueError as exc:
            raise ConfigError(f"config key {key}: cannot parse {val!r}") from exc
        setattr(cfg, key, parsed)
    return cfg.validate()


def save_config(path, cfg):
    with open(path, "w", encoding="ascii") as fh:
        for f in fields(Config):
            fh.write(f"{f.name}={getattr(cfg, f.name)}\n")
