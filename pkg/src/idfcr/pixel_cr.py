"""Pixel-space cloud removal network.

Shallow conv extraction, N cloud-removal blocks (each: two window-attention
layers, then a conv spatial-attention head whose [0,1] map gates the block
output through a residual), and a two-conv reconstruction head.  Trained
with an L1 image loss plus an L2 loss tying each attention map to the
binary cloud mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError
from .nn import Conv2d, LayerNorm, Linear, Module


@dataclass(frozen=True)
class PixelCRConfig:
    channels: int = 96
    num_blocks: int = 3
    window_size: int = 16
    heads: int = 6
    image_size: int = 64
    in_channels: int = 3
    mlp_ratio: float = 4.0

    def validate(self):
        if self.channels < 1 or self.num_blocks < 1 or self.window_size < 1:
            raise ConfigError("channels, num_blocks, window_size must be positive")
        if self.channels % self.heads:
            raise ConfigError(
                f"channels {self.channels} not divisible by heads {self.heads}"
            )
        if self.image_size % self.window_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by window {self.window_size}"
            )


def _window_partition(t: Tensor, n, h, w, c, ws) -> Tensor:
    """[N,H,W,C] tokens -> [N*nW, ws*ws, C] windows."""
    t = ad.reshape(t, (n, h // ws, ws, w // ws, ws, c))
    t = ad.transpose(t, (0, 1, 3, 2, 4, 5))
    return ad.reshape(t, (n * (h // ws) * (w // ws), ws * ws, c))


def _window_reverse(t: Tensor, n, h, w, c, ws) -> Tensor:
    t = ad.reshape(t, (n, h // ws, w // ws, ws, ws, c))
    t = ad.transpose(t, (0, 1, 3, 2, 4, 5))
    return ad.reshape(t, (n, h, w, c))


def _shift_attn_mask(h, w, ws, shift, dtype):
    """Additive mask hiding cross-region pairs in shifted windows, [nW,T,T]."""
    region = np.zeros((h, w), dtype=np.int64)
    cnt = 0
    for hs in (slice(0, h - ws), slice(h - ws, h - shift), slice(h - shift, h)):
        for vs in (slice(0, w - ws), slice(w - ws, w - shift), slice(w - shift, w)):
            region[hs, vs] = cnt
            cnt += 1
    r = region.reshape(h // ws, ws, w // ws, ws).transpose(0, 2, 1, 3)
    r = r.reshape((h // ws) * (w // ws), ws * ws)
    diff = r[:, None, :] != r[:, :, None]
    return np.where(diff, np.array(-1e9, dtype=dtype), np.array(0.0, dtype=dtype))


class SwinLayer(Module):
    """Pre-norm windowed multi-head self-attention + MLP, both residual."""

    def __init__(self, channels, window, heads, mlp_ratio, shift, rng, dtype=np.float32):
        self.window = window
        self.heads = heads
        self.shift = shift
        self.dtype = dtype
        self.norm1 = LayerNorm(channels, dtype)
        self.q = Linear(channels, channels, rng, dtype=dtype)
        self.k = Linear(channels, channels, rng, dtype=dtype)
        self.v = Linear(channels, channels, rng, dtype=dtype)
        self.proj = Linear(channels, channels, rng, dtype=dtype)
        self.norm2 = LayerNorm(channels, dtype)
        hidden = int(channels * mlp_ratio)
        self.fc1 = Linear(channels, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, channels, rng, dtype=dtype)
        self._mask_cache = {}

    def forward(self, x: Tensor, probs_out=None) -> Tensor:
        n, c, h, w = x.data.shape
        ws = self.window
        if h % ws or w % ws:
            raise ConfigError(f"spatial dims {(h, w)} not divisible by window {ws}")
        shift = ws // 2 if (self.shift and min(h, w) > ws) else 0
        nw = (h // ws) * (w // ws)
        T = ws * ws
        d = c // self.heads

        tokens = ad.transpose(x, (0, 2, 3, 1))
        t = self.norm1(tokens)
        if shift:
            t = ad.roll(t, (-shift, -shift), (1, 2))
        t = _window_partition(t, n, h, w, c, ws)

        def heads_of(z):
            z = ad.reshape(z, (n * nw, T, self.heads, d))
            return ad.transpose(z, (0, 2, 1, 3))

        qh = heads_of(self.q(t))
        kh = heads_of(self.k(t))
        vh = heads_of(self.v(t))
        att = ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))) * (1.0 / np.sqrt(d))
        if shift:
            key = (h, w, shift)
            if key not in self._mask_cache:
                self._mask_cache[key] = _shift_attn_mask(h, w, ws, shift, self.dtype)
            mask = self._mask_cache[key]
            att = ad.reshape(att, (n, nw, self.heads, T, T))
            att = att + Tensor(mask[None, :, None])
            att = ad.reshape(att, (n * nw, self.heads, T, T))
        p = ad.softmax(att, axis=-1)
        if probs_out is not None:
            probs_out.append(p.data.copy())
        o = ad.matmul(p, vh)
        o = ad.transpose(o, (0, 2, 1, 3))
        o = ad.reshape(o, (n * nw, T, c))
        o = self.proj(o)
        o = _window_reverse(o, n, h, w, c, ws)
        if shift:
            o = ad.roll(o, (shift, shift), (1, 2))
        h1 = tokens + o
        m = self.fc2(ad.gelu(self.fc1(self.norm2(h1))))
        h2 = h1 + m
        return ad.transpose(h2, (0, 3, 1, 2))


class CloudyAttention(Module):
    """Conv spatial-attention head: channels -> channels/4 -> 1 -> sigmoid."""

    def __init__(self, channels, rng, dtype=np.float32):
        mid = max(channels // 4, 1)
        self.reduce = Conv2d(channels, mid, 3, rng, dtype=dtype)
        # zero logits at init: maps start uniform at 0.5, so early
        # reconstruction gradients cannot saturate the sigmoid
        self.score = Conv2d(mid, 1, 3, rng, dtype=dtype, zero_init=True)

    def forward(self, x: Tensor) -> Tensor:
        return ad.sigmoid(self.score(ad.silu(self.reduce(x))))


class ShallowExtract(Module):
    """Single 3x3 conv lifting the input image to the working channel count."""

    def __init__(self, in_channels, channels, rng, dtype=np.float32):
        self.conv = Conv2d(in_channels, channels, 3, rng, dtype=dtype)
        self.in_channels = in_channels

    def forward(self, x: Tensor) -> Tensor:
        if x.data.shape[1] != self.in_channels:
            raise ConfigError(
                f"expected {self.in_channels} input channels, got {x.data.shape[1]}"
            )
        return self.conv(x)


class CRBlock(Module):
    """Two window-attention layers, then attention-gated residual fusion.

    Non-last blocks: out = a * s + s.  The last block routes s through one
    more conv before gating: out = a * conv(s) + s.
    """

    def __init__(self, cfg: PixelCRConfig, is_last, rng, dtype=np.float32):
        self.is_last = is_last
        self.layers = [
            SwinLayer(cfg.channels, cfg.window_size, cfg.heads, cfg.mlp_ratio,
                      shift=False, rng=rng, dtype=dtype),
            SwinLayer(cfg.channels, cfg.window_size, cfg.heads, cfg.mlp_ratio,
                      shift=True, rng=rng, dtype=dtype),
        ]
        self.fuse = Conv2d(cfg.channels, cfg.channels, 3, rng, dtype=dtype) if is_last else None

    def forward(self, x: Tensor, probs_out=None):
        s = x
        for layer in self.layers:
            s = layer(s, probs_out=probs_out)
        a = self.attn(s)
        gated = self.fuse(s) if self.is_last else s
        out = a * gated + s
        return out, a

    # attn assigned after construction so named_parameters order groups layers first
    def attach_attention(self, attn: CloudyAttention):
        self.attn = attn
        return self


class Reconstruct(Module):
    """Two 3x3 convs mapping the working channels back to image channels."""

    def __init__(self, channels, out_channels, rng, dtype=np.float32):
        self.conv1 = Conv2d(channels, channels, 3, rng, dtype=dtype)
        self.conv2 = Conv2d(channels, out_channels, 3, rng, dtype=dtype)
        # damp the output head so initial predictions sit near zero;
        # keeps the first optimizer steps from swamping the attention path
        self.conv2.weight.data *= np.asarray(0.05, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(ad.silu(self.conv1(x)))


class PixelCR(Module):
    """Full pixel restoration network; forward returns (image, attention maps)."""

    def __init__(self, cfg: PixelCRConfig, seed=0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng([int(seed), 0x9C])
        self.shallow = ShallowExtract(cfg.in_channels, cfg.channels, rng, dtype)
        self.blocks = [
            CRBlock(cfg, is_last=(i == cfg.num_blocks - 1), rng=rng, dtype=dtype)
            .attach_attention(CloudyAttention(cfg.channels, rng, dtype))
            for i in range(cfg.num_blocks)
        ]
        self.recon = Reconstruct(cfg.channels, cfg.in_channels, rng, dtype)

    def forward(self, x: Tensor, probs_out=None):
        feat = self.shallow(x)
        attentions = []
        for block in self.blocks:
            feat, a = block(feat, probs_out=probs_out)
            attentions.append(a)
        out = self.recon(feat)
        return out, attentions

    def infer(self, x: np.ndarray) -> np.ndarray:
        """Clamped [0,1] restoration of a [N,C,H,W] array, no graph kept."""
        with ad.no_grad():
            out, _ = self.forward(Tensor(np.asarray(x)))
        return np.clip(out.data, 0.0, 1.0)


def loss_pixel(decloudy_lq: Tensor, label: Tensor, attentions, mask: np.ndarray):
    """(total, l_cr, l_attn): mean-L1 image loss + mean-over-blocks mask MSE."""
    if decloudy_lq.data.shape != label.data.shape:
        raise DataError(
            f"image/label shape mismatch: {decloudy_lq.data.shape} vs {label.data.shape}"
        )
    mask = np.asarray(mask)
    if mask.ndim == 3:
        mask = mask[None]
    l_cr = ad.tmean(ad.tabs(decloudy_lq - label))
    mask_t = Tensor(mask.astype(decloudy_lq.data.dtype, copy=False))
    per_block = []
    for a in attentions:
        if a.data.shape[-2:] != mask.shape[-2:]:
            raise DataError(
                f"attention/mask shape mismatch: {a.data.shape} vs {mask.shape}"
            )
        diff = a - mask_t
        per_block.append(ad.tmean(diff * diff))
    l_attn = per_block[0]
    for term in per_block[1:]:
        l_attn = l_attn + term
    l_attn = l_attn * (1.0 / len(per_block))
    total = l_cr + l_attn
    return total, l_cr, l_attn
