"""Synthetic cloudy/clear pair generation, cloud masks, and paired loading.

Directory layout mirrors paired optical-restoration sets:

    root/<split>/cloud/<name>.png
    root/<split>/label/<name>.png

Pairs match by filename.  All synthesis is seeded and reproducible.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataError, ListingError, ParameterError

# alpha ramp width between "no cloud" and "full cloud" in field units
_SOFTNESS = 0.15


@dataclass(frozen=True)
class CloudParams:
    """Controls for the synthetic cloud layer."""

    opacity: float = 0.85
    coverage: float = 0.6
    octaves: int = 4
    seed: int = 0

    def validate(self):
        if not (0.0 <= self.opacity <= 1.0):
            raise ParameterError(f"opacity must be in [0,1], got {self.opacity}")
        if not (0.0 <= self.coverage <= 1.0):
            raise ParameterError(f"coverage must be in [0,1], got {self.coverage}")
        if self.octaves < 1:
            raise ParameterError(f"octaves must be >= 1, got {self.octaves}")


@dataclass
class ImagePair:
    cloudy: np.ndarray  # [C,H,W] in [0,1]
    clear: np.ndarray  # [C,H,W] in [0,1]
    id: str


@dataclass
class CloudMask:
    mask: np.ndarray  # [1,H,W], entries exactly 0 or 1
    threshold_used: float


def _value_noise(h, w, cells, rng):
    """One octave of bilinear value noise with smoothstep easing, in [0,1]."""
    grid = rng.random((cells + 1, cells + 1))
    ys = np.linspace(0.0, cells, h, endpoint=False)
    xs = np.linspace(0.0, cells, w, endpoint=False)
    yi = np.minimum(ys.astype(np.int64), cells - 1)
    xi = np.minimum(xs.astype(np.int64), cells - 1)
    ty = ys - yi
    tx = xs - xi
    ty = ty * ty * (3.0 - 2.0 * ty)
    tx = tx * tx * (3.0 - 2.0 * tx)
    g00 = grid[yi][:, xi]
    g01 = grid[yi][:, xi + 1]
    g10 = grid[yi + 1][:, xi]
    g11 = grid[yi + 1][:, xi + 1]
    top = g00 + (g01 - g00) * tx[None, :]
    bot = g10 + (g11 - g10) * tx[None, :]
    return top + (bot - top) * ty[:, None]


def _octave_noise(h, w, octaves, rng, base_cells=4):
    """Sum of octaves with halving amplitude, normalized to [0,1]."""
    total = np.zeros((h, w))
    amp = 1.0
    norm = 0.0
    cells = base_cells
    for _ in range(octaves):
        total += amp * _value_noise(h, w, cells, rng)
        norm += amp
        amp *= 0.5
        cells = min(cells * 2, max(h, w))
    total /= norm
    lo, hi = total.min(), total.max()
    if hi > lo:
        total = (total - lo) / (hi - lo)
    return total


def cloud_alpha_layer(h, w, params: CloudParams):
    """Per-pixel blend weight alpha [H,W] and the pure cloud layer [H,W].

    alpha = opacity * (1 - clip((thresh - field)/softness, 0, 1)) where
    thresh is the (1-coverage) quantile of the field, so `coverage` is the
    approximate fraction of pixels with alpha near opacity.  coverage=1
    makes alpha == opacity everywhere; opacity=0 makes alpha == 0.
    """
    params.validate()
    rng = np.random.default_rng([int(params.seed), 0xC10D])
    field = _octave_noise(h, w, params.octaves, rng)
    texture = _octave_noise(h, w, max(params.octaves - 1, 1), rng)
    thresh = float(np.quantile(field, 1.0 - params.coverage))
    alpha = params.opacity * (1.0 - np.clip((thresh - field) / _SOFTNESS, 0.0, 1.0))
    layer = 0.75 + 0.25 * texture
    return alpha, layer


def synthesize_pair(clear: np.ndarray, params: CloudParams, pair_id="pair") -> ImagePair:
    """Alpha-composite a seeded cloud layer over a clear image."""
    clear = np.asarray(clear)
    if clear.ndim != 3:
        raise ParameterError(f"clear image must be [C,H,W], got shape {clear.shape}")
    if clear.min() < 0.0 or clear.max() > 1.0:
        raise ParameterError("clear image values must lie in [0,1]")
    c, h, w = clear.shape
    alpha, layer = cloud_alpha_layer(h, w, params)
    cloudy = (1.0 - alpha)[None] * clear + alpha[None] * layer[None]
    cloudy = np.clip(cloudy, 0.0, 1.0).astype(clear.dtype, copy=False)
    return ImagePair(cloudy=cloudy, clear=clear, id=pair_id)


def compute_mask(pair: ImagePair, threshold=0.1) -> CloudMask:
    """Binary cloud mask: 1 where channel-mean |cloudy - clear| exceeds threshold."""
    if pair.cloudy.shape != pair.clear.shape:
        raise DataError(
            f"pair shape mismatch: {pair.cloudy.shape} vs {pair.clear.shape}"
        )
    if not (0.0 < threshold < 1.0):
        raise ParameterError(f"threshold must be in (0,1), got {threshold}")
    disparity = np.abs(
        pair.cloudy.astype(np.float64) - pair.clear.astype(np.float64)
    ).mean(axis=0)
    mask = (disparity > threshold).astype(np.float32)[None]
    return CloudMask(mask=mask, threshold_used=float(threshold))


def make_clear_image(h, w, seed, channels=3) -> np.ndarray:
    """Terrain-like procedural texture: smoothed noise plus gradient fields."""
    rng = np.random.default_rng([int(seed), 0x7E44])
    base = _octave_noise(h, w, 5, rng)
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = (
        rng.random() * yy / max(h - 1, 1)
        + rng.random() * xx / max(w - 1, 1)
    )
    ramp /= max(ramp.max(), 1e-9)
    img = np.zeros((channels, h, w))
    for ch in range(channels):
        tint = _octave_noise(h, w, 3, rng)
        img[ch] = 0.15 + 0.7 * (0.5 * base + 0.3 * tint + 0.2 * ramp)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def save_image(path, img: np.ndarray):
    """Write a [C,H,W] float image in [0,1] as 8-bit PNG."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    if u8.shape[0] == 1:
        pil = Image.fromarray(u8[0], mode="L")
    else:
        pil = Image.fromarray(u8.transpose(1, 2, 0))
    pil.save(path)


def load_image(path) -> np.ndarray:
    """Read a PNG into [C,H,W] float32 scaled by 1/255."""
    try:
        with Image.open(path) as pil:
            arr = np.asarray(pil)
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return (arr.astype(np.float32)) / 255.0


def generate_dataset(root, split, count, size, seed, params: CloudParams):
    """Write `count` synthetic pairs under root/<split>/{cloud,label}."""
    params.validate()
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    if size < 16:
        raise ParameterError(f"size must be >= 16, got {size}")
    cloud_dir = os.path.join(root, split, "cloud")
    label_dir = os.path.join(root, split, "label")
    os.makedirs(cloud_dir, exist_ok=True)
    os.makedirs(label_dir, exist_ok=True)
    names = []
    for i in range(count):
        clear = make_clear_image(size, size, seed=seed * 100003 + i)
        per = CloudParams(
            opacity=params.opacity,
            coverage=params.coverage,
            octaves=params.octaves,
            seed=params.seed * 100003 + i,
        )
        pair = synthesize_pair(clear, per, pair_id=f"{i:04d}")
        name = f"{i:04d}.png"
        save_image(os.path.join(cloud_dir, name), pair.cloudy)
        save_image(os.path.join(label_dir, name), pair.clear)
        names.append(name)
    return names


def load_pairs(root, split="train"):
    """Load filename-matched pairs from root/<split>/{cloud,label}, sorted."""
    base = os.path.join(root, split)
    cloud_dir = os.path.join(base, "cloud")
    label_dir = os.path.join(base, "label")
    for d in (cloud_dir, label_dir):
        if not os.path.isdir(d):
            raise ListingError(f"missing directory: {d}")
    cloud_names = sorted(f for f in os.listdir(cloud_dir) if not f.startswith("."))
    label_names = sorted(f for f in os.listdir(label_dir) if not f.startswith("."))
    orphans = set(cloud_names) ^ set(label_names)
    if orphans:
        name = sorted(orphans)[0]
        side = "cloud" if name in cloud_names else "label"
        raise ListingError(f"unmatched file {name!r} present only in {side}/")
    pairs = []
    for name in cloud_names:
        cloudy = load_image(os.path.join(cloud_dir, name))
        clear = load_image(os.path.join(label_dir, name))
        if cloudy.shape != clear.shape:
            raise DataError(
                f"pair {name!r} shape mismatch: {cloudy.shape} vs {clear.shape}"
            )
        pairs.append(ImagePair(cloudy=cloudy, clear=clear, id=os.path.splitext(name)[0]))
    return pairs
