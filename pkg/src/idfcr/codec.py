"""Tiny vector-quantized autoencoder: pixel space <-> discrete latent grid.

The encoder downsamples by a power-of-two factor with strided convs, a
codebook of B entries of dimension D quantizes each latent site to its
nearest entry (ties to the lowest index), and a transposed-conv decoder
maps latents back to pixels.  Training uses reconstruction L2 plus the
two-term stop-gradient VQ loss with a straight-through estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import backend
from .autodiff import Tensor
from .errors import ConfigError
from .nn import Conv2d, ConvTranspose2d, Module
from .optim import Adam


@dataclass(frozen=True)
class CodecConfig:
    latent_dim: int = 8  # D
    codebook_size: int = 256  # B
    downsample: int = 4  # f, power of two
    beta_commit: float = 0.25
    hidden: int = 32
    in_channels: int = 3

    def validate(self):
        if self.latent_dim < 1 or self.codebook_size < 2:
            raise ConfigError("latent_dim >= 1 and codebook_size >= 2 required")
        f = self.downsample
        if f < 1 or (f & (f - 1)) != 0:
            raise ConfigError(f"downsample must be a power of two, got {f}")
        if self.beta_commit <= 0:
            raise ConfigError("beta_commit must be positive")


@dataclass
class LatentGrid:
    z_c: np.ndarray  # [D,h,w] continuous
    z_d: np.ndarray  # [D,h,w] quantized
    indices: np.ndarray  # [h,w] in [0,B)


class Encoder(Module):
    def __init__(self, cfg: CodecConfig, rng, dtype=np.float32):
        stages = int(np.log2(cfg.downsample)) if cfg.downsample > 1 else 0
        self.convs = []
        c = cfg.in_channels
        width = cfg.hidden
        self.convs.append(Conv2d(c, width, 3, rng, dtype=dtype))
        for _ in range(stages):
            self.convs.append(Conv2d(width, width * 2, 3, rng, stride=2, pad=1, dtype=dtype))
            width *= 2
        self.head = Conv2d(width, cfg.latent_dim, 3, rng, dtype=dtype)
        self.downsample = cfg.downsample

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.data.shape
        if h % self.downsample or w % self.downsample:
            raise ConfigError(
                f"spatial dims {(h, w)} not divisible by downsample {self.downsample}"
            )
        y = x
        for conv in self.convs:
            y = ad.silu(conv(y))
        return self.head(y)


class Decoder(Module):
    def __init__(self, cfg: CodecConfig, rng, dtype=np.float32):
        stages = int(np.log2(cfg.downsample)) if cfg.downsample > 1 else 0
        width = cfg.hidden * (2**stages)
        self.stem = Conv2d(cfg.latent_dim, width, 3, rng, dtype=dtype)
        self.ups = []
        for _ in range(stages):
            self.ups.append(ConvTranspose2d(width, width // 2, 4, rng, stride=2, pad=1, dtype=dtype))
            width //= 2
        self.head = Conv2d(width, cfg.in_channels, 3, rng, dtype=dtype)

    def forward(self, z: Tensor) -> Tensor:
        y = ad.silu(self.stem(z))
        for up in self.ups:
            y = ad.silu(up(y))
        return self.head(y)


class Quantizer(Module):
    """Codebook [B,D] with nearest-entry lookup and straight-through output."""

    def __init__(self, cfg: CodecConfig, rng, dtype=np.float32):
        b, d = cfg.codebook_size, cfg.latent_dim
        from .autodiff import Parameter

        self.entries = Parameter(
            rng.uniform(-1.0 / b, 1.0 / b, size=(b, d)).astype(dtype)
        )

    def lookup(self, z_c_data: np.ndarray) -> np.ndarray:
        """Indices [N,h,w] of the nearest codebook entry per site (no graph)."""
        if self.entries.data.shape[0] == 0:
            raise ConfigError("empty codebook")
        n, d, h, w = z_c_data.shape
        sites = np.ascontiguousarray(z_c_data.transpose(0, 2, 3, 1)).reshape(-1, d)
        idx = backend.nearest_codebook(sites, self.entries.data)
        return idx.reshape(n, h, w)

    def forward(self, z_c: Tensor):
        """Returns (z_q_st, z_d, indices).

        z_q_st carries the quantized values but routes gradients straight
        through to z_c; z_d is differentiable w.r.t. the codebook entries.
        """
        n, d, h, w = z_c.data.shape
        idx = self.lookup(z_c.data)
        flat = ad.take_rows(self.entries, idx.reshape(-1))
        z_d = ad.transpose(ad.reshape(flat, (n, h, w, d)), (0, 3, 1, 2))
        z_q_st = ad.substitute(z_c, z_d.data)
        return z_q_st, z_d, idx


class VQCodec(Module):
    """Encoder + quantizer + decoder bundle."""

    def __init__(self, cfg: CodecConfig, seed=0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng([int(seed), 0xC0DE])
        self.encoder = Encoder(cfg, rng, dtype)
        self.decoder = Decoder(cfg, rng, dtype)
        self.quant = Quantizer(cfg, rng, dtype)

    def encode(self, x: Tensor) -> Tensor:
        return self.encoder(x)

    def decode(self, z: Tensor) -> Tensor:
        return self.decoder(z)

    def latent_grid(self, image: np.ndarray) -> LatentGrid:
        """Quantized latents for one [C,H,W] image, no graph kept."""
        with ad.no_grad():
            z_c = self.encoder(Tensor(np.asarray(image)[None]))
            _, z_d, idx = self.quant(z_c)
        return LatentGrid(z_c=z_c.data[0], z_d=z_d.data[0], indices=idx[0])

    def reconstruct(self, image_batch: np.ndarray) -> np.ndarray:
        """Round-trip [N,C,H,W] through the quantized bottleneck, clamped."""
        with ad.no_grad():
            z_c = self.encoder(Tensor(np.asarray(image_batch)))
            z_q, _, _ = self.quant(z_c)
            out = self.decoder(z_q)
        return np.clip(out.data, 0.0, 1.0)

    def decode_latents(self, z: np.ndarray) -> np.ndarray:
        """Decode [N,D,h,w] latents to clamped images, no graph kept."""
        with ad.no_grad():
            out = self.decoder(Tensor(np.asarray(z)))
        return np.clip(out.data, 0.0, 1.0)

    def export_codebook(self, path):
        """Flat little-endian float32 [B,D] dump for external inspection."""
        with open(path, "wb") as fh:
            fh.write(self.quant.entries.data.astype("<f4").tobytes())


def vq_losses(codec: VQCodec, batch: Tensor):
    """(total, recon, codebook, commitment) for one batch, graph attached."""
    z_c = codec.encode(batch)
    z_q_st, z_d, _ = codec.quant(z_c)
    recon = codec.decode(z_q_st)
    diff = recon - batch
    l_rec = ad.tmean(diff * diff)
    code_diff = z_c.detach() - z_d
    l_code = ad.tmean(code_diff * code_diff)
    commit_diff = z_c - z_d.detach()
    l_commit = ad.tmean(commit_diff * commit_diff)
    total = l_rec + l_code + l_commit * float(codec.cfg.beta_commit)
    return total, l_rec, l_code, l_commit


def vq_train_step(codec: VQCodec, opt: Adam, batch: np.ndarray):
    """One optimizer step; returns float losses (recon, codebook, commitment)."""
    opt.zero_grad()
    total, l_rec, l_code, l_commit = vq_losses(codec, Tensor(np.asarray(batch)))
    total.backward()
    opt.step()
    return float(l_rec.data), float(l_code.data), float(l_commit.data)
