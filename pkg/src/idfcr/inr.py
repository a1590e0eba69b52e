"""Iterative noise refinement: re-pair the model's own detached prediction.

Per batch, draw (t, eps) once, then K times: corrupt z_0 with the current
target noise, take one optimizer step on the noise-matching loss, and
replace the target with the prediction just computed (detached, under the
pre-update weights).  z_0, the condition, and t stay fixed across the K
inner steps; weights carry over between batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import Denoiser, NoiseSchedule, forward_diffuse
from .errors import ConfigError
from .optim import Adam


@dataclass(frozen=True)
class INRConfig:
    K: int = 3
    detach_predictions: bool = True

    def validate(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if not self.detach_predictions:
            raise ConfigError(
                "detach_predictions=False is unsupported: each re-paired "
                "target is a fixed training datum, so it never carries a graph"
            )


def inr_train_batch(denoiser: Denoiser, opt: Adam, z_0, cond,
                    schedule: NoiseSchedule, cfg: INRConfig, rng, trace=None):
    """K refinement steps on one batch; returns the K loss values.

    Draw order matches diffusion.train_step exactly, so K=1 under a shared
    RNG reproduces it bit for bit.  `trace`, if given, receives one dict
    per inner step: {k, t, target, pred}.
    """
    cfg.validate()
    z_0 = np.asarray(z_0)
    n = z_0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(z_0.shape).astype(z_0.dtype)
    losses = []
    for k in range(cfg.K):
        opt.zero_grad()
        z_t = forward_diffuse(z_0, t, eps, schedule)
        eps_pred = denoiser.predict(z_t, t, cond)
        diff = eps_pred - Tensor(eps)
        loss = ad.tmean(diff * diff)
        pred_data = eps_pred.data.copy()
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
        if trace is not None:
            trace.append({"k": k, "t": t.copy(), "target": eps.copy(),
                          "pred": pred_data.copy()})
        eps = pred_data
    return losses


def prepare_latents(pairs, codec, pixel_net, latent_scale=1.0):
    """(z_0, cond) latent batches from image pairs through frozen upstream.

    cond is the quantized latent of the pixel-stage restoration of the
    cloudy input; z_0 is the quantized latent of the clean label.  Both are
    multiplied by latent_scale so diffusion sees roughly unit-variance data.
    """
    z0s, conds = [], []
    for pair in pairs:
        lq = pixel_net.infer(pair.cloudy[None].astype(np.float32))[0]
        conds.append(codec.latent_grid(lq).z_d * latent_scale)
        z0s.append(codec.latent_grid(pair.clear.astype(np.float32)).z_d * latent_scale)
    return (np.stack(z0s).astype(np.float32),
            np.stack(conds).astype(np.float32))


def inr_epoch_latents(z0_all, cond_all, denoiser, opt, schedule, cfg, rng,
                      batch=2, log=None, epoch=0):
    """One pass over precomputed latents in fixed order; returns stats."""
    cfg.validate()
    n = z0_all.shape[0]
    if n == 0:
        raise ConfigError("no latents to train on")
    per_batch = []
    for b, start in enumerate(range(0, n, batch)):
        sl = slice(start, min(start + batch, n))
        losses = inr_train_batch(denoiser, opt, z0_all[sl], cond_all[sl],
                                 schedule, cfg, rng)
        per_batch.append(losses)
        if log is not None:
            for k, lv in enumerate(losses):
                log.append({"epoch": epoch, "batch": b, "k": k, "loss": lv})
    first_losses = [row[0] for row in per_batch]
    return {
        "batches": len(per_batch),
        "steps": len(per_batch) * cfg.K,
        "losses": per_batch,
        "mean_first_inner_loss": float(np.mean(first_losses)),
    }


def inr_epoch(pairs, codec, pixel_net, denoiser, opt, schedule, cfg, rng,
              batch=2, latent_scale=1.0, log=None, epoch=0):
    """Latent preparation plus one training pass (upstream stays frozen)."""
    z0_all, cond_all = prepare_latents(pairs, codec, pixel_net, latent_scale)
    return inr_epoch_latents(z0_all, cond_all, denoiser, opt, schedule, cfg,
                             rng, batch=batch, log=log, epoch=epoch)
