"""Reference image-quality metrics: PSNR, SSIM, RMSE.

Images are float arrays in [0, 1], shaped [C, H, W] or [H, W].  All three
functions are pure and symmetric in their two image arguments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

PSNR_CAP_DB = 99.0


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"image shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b) -> float:
    """Root mean squared error over all channels and pixels."""
    a, b = _check_pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(a, b, peak=1.0) -> float:
    """10*log10(peak^2 / mse) in dB, capped at 99 dB for identical images."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB))


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    half = (window - 1) / 2.0
    coords = np.arange(window, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _to_gray(a: np.ndarray) -> np.ndarray:
    if a.ndim == 3:
        return a.mean(axis=0)
    if a.ndim == 2:
        return a
    raise DataError(f"expected [C,H,W] or [H,W] image, got shape {a.shape}")


def _window_means(img: np.ndarray, kern: np.ndarray) -> np.ndarray:
    """Valid-mode 2-D correlation with a small separable-size kernel."""
    kh, kw = kern.shape
    h, w = img.shape
    oh, ow = h - kh + 1, w - kw + 1
    # gather all kh*kw shifted views; memory is fine at desk scale
    s0, s1 = img.strides
    views = np.lib.stride_tricks.as_strided(
        img, shape=(oh, ow, kh, kw), strides=(s0, s1, s0, s1), writeable=False
    )
    return np.einsum("ijkl,kl->ij", views, kern)


def ssim(a, b, window=11, sigma=1.5, peak=1.0) -> float:
    """Single-scale SSIM on channel-mean grayscale, Gaussian window, valid mode."""
    a, b = _check_pair(a, b)
    ga, gb = _to_gray(a), _to_gray(b)
    if ga.shape[0] < window or ga.shape[1] < window:
        raise DataError(f"image {ga.shape} smaller than SSIM window {window}")
    kern = _gaussian_kernel(window, sigma)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = _window_means(ga, kern)
    mu_b = _window_means(gb, kern)
    mu_aa = _window_means(ga * ga, kern)
    mu_bb = _window_means(gb * gb, kern)
    mu_ab = _window_means(ga * gb, kern)
    var_a = mu_aa - mu_a**2
    var_b = mu_bb - mu_b**2
    cov = mu_ab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Aggregate plus per-image PSNR/SSIM/RMSE triples."""

    psnr: float = 0.0
    ssim: float = 0.0
    rmse: float = 0.0
    per_image: list = field(default_factory=list)

    @classmethod
    def from_pairs(cls, pairs, ids=None):
        """pairs: iterable of (pred, label) arrays; ids: optional labels."""
        rows = []
        for i, (pred, label) in enumerate(pairs):
            name = ids[i] if ids is not None else str(i)
            rows.append(
                {
                    "id": name,
                    "psnr": psnr(pred, label),
                    "ssim": ssim(pred, label),
                    "rmse": rmse(pred, label),
                }
            )
        if not rows:
            raise DataError("no image pairs to evaluate")
        return cls(
            psnr=float(np.mean([r["psnr"] for r in rows])),
            ssim=float(np.mean([r["ssim"] for r in rows])),
            rmse=float(np.mean([r["rmse"] for r in rows])),
            per_image=rows,
        )

    def to_json_dict(self):
        return {
            "per_image": self.per_image,
            "mean": {"psnr": self.psnr, "ssim": self.ssim, "rmse": self.rmse},
        }
