"""Run configuration: one flat typed key = value file drives every command.

Defaults reproduce the reference training recipe (pixel phase batch 1 /
200 epochs / lr 4e-4; diffusion phase batch 2 / 100 epochs / lr 1e-4;
50 sampling steps; K=3 refinement iterations).  `RunConfig.desk()` is the
small profile used by the test suite: 64x64 synthetic pairs and a short
schedule so the whole pipeline runs in minutes on one CPU core.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .codec import CodecConfig
from .datasets import CloudParams
from .diffusion import DiffusionConfig
from .errors import ConfigError
from .inr import INRConfig
from .pixel_cr import PixelCRConfig


@dataclass
class RunConfig:
    seed: int = 0
    data_root: str = "data"
    out_dir: str = "runs/out"

    # dataset synthesis
    n_pairs: int = 16
    image_size: int = 512
    cloud_opacity: float = 0.9
    cloud_coverage: float = 0.65
    cloud_octaves: int = 4
    mask_threshold: float = 0.1

    # pixel restoration network + phase
    px_channels: int = 96
    px_blocks: int = 3
    px_window: int = 16
    px_heads: int = 6
    px_mlp_ratio: float = 4.0
    pixel_epochs: int = 200
    pixel_batch: int = 1
    pixel_lr: float = 4e-4

    # latent codec + phase
    cd_latent_dim: int = 8
    cd_codebook: int = 256
    cd_downsample: int = 4
    cd_beta: float = 0.25
    cd_hidden: int = 32
    codec_epochs: int = 100
    codec_batch: int = 4
    codec_lr: float = 1e-3

    # diffusion net + schedule
    base_width: int = 32
    groups: int = 8
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 50

    # trunk pretraining phase
    trunk_epochs: int = 100
    trunk_batch: int = 2
    trunk_lr: float = 1e-4

    # control phase (refinement training)
    control_epochs: int = 100
    control_batch: int = 2
    control_lr: float = 1e-4
    inr_k: int = 3

    @classmethod
    def desk(cls):
        """Small single-core profile: minutes, not days."""
        return cls(
            image_size=64,
            n_pairs=16,
            px_channels=32,
            px_blocks=2,
            px_window=8,
            px_heads=4,
            px_mlp_ratio=2.0,
            pixel_epochs=14,
            cd_latent_dim=8,
            cd_codebook=128,
            cd_downsample=4,
            cd_hidden=16,
            codec_epochs=80,
            codec_lr=2e-3,
            base_width=32,
            T=64,
            beta_end=0.15,
            trunk_epochs=100,
            trunk_batch=4,
            trunk_lr=1e-3,
            control_epochs=25,
            control_lr=3e-4,
            sample_steps=50,
        )

    # -- derived sub-configs -------------------------------------------------

    def cloud_params(self):
        return CloudParams(
            opacity=self.cloud_opacity, coverage=self.cloud_coverage,
            octaves=self.cloud_octaves, seed=self.seed,
        )

    def pixel_config(self):
        return PixelCRConfig(
            channels=self.px_channels, num_blocks=self.px_blocks,
            window_size=self.px_window, heads=self.px_heads,
            image_size=self.image_size, mlp_ratio=self.px_mlp_ratio,
        )

    def codec_config(self):
        return CodecConfig(
            latent_dim=self.cd_latent_dim, codebook_size=self.cd_codebook,
            downsample=self.cd_downsample, beta_commit=self.cd_beta,
            hidden=self.cd_hidden,
        )

    def diffusion_config(self):
        return DiffusionConfig(
            latent_dim=self.cd_latent_dim, base=self.base_width,
            groups=self.groups, T=self.T, beta_start=self.beta_start,
            beta_end=self.beta_end, sample_steps=self.sample_steps,
        )

    def inr_config(self):
        return INRConfig(K=self.inr_k)

    def validate(self):
        if self.n_pairs < 0:
            raise ConfigError(f"n_pairs must be >= 0, got {self.n_pairs}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        for name in ("pixel_batch", "codec_batch", "trunk_batch", "control_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("pixel_epochs", "codec_epochs", "trunk_epochs", "control_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        self.cloud_params().validate()
        self.pixel_config().validate()
        self.codec_config().validate()
        self.diffusion_config().validate()
        self.inr_config().validate()
        if self.image_size % self.cd_downsample:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by codec "
                f"downsample {self.cd_downsample}"
            )

    def to_dict(self):
        return dataclasses.asdict(self)


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(name, text):
    kind = _FIELDS[name]
    text = text.strip()
    try:
        if kind == "int" or kind is int:
            return int(text)
        if kind == "float" or kind is float:
            return float(text)
        if kind == "bool" or kind is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc


def parse_config_text(text) -> dict:
    """key = value lines; '#' starts a comment; unknown keys rejected."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, val = stripped.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, val)
    return values


def load_run_config(path=None, overrides=None) -> RunConfig:
    """Config file (optional) -> RunConfig, with CLI overrides applied last."""
    values = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                values = parse_config_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if overrides:
        for key, val in overrides.items():
            if val is None:
                continue
            if key not in _FIELDS:
                raise ConfigError(f"unknown config override {key!r}")
            values[key] = val
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def write_config(cfg: RunConfig, path):
    """Dump every field as `key = value`, parseable by load_run_config."""
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(RunConfig)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
