"""End-to-end orchestration: dataset creation, the four training phases
(pixel -> codec -> trunk -> control), inference, and evaluation.

Phase outputs are checkpoints under out_dir plus line-delimited JSON loss
logs under out_dir/logs.  Every random draw comes from a generator seeded
by (run seed, phase tag), so a full rerun with the same config is
bit-identical.
"""

from __future__ import annotations

import json
import math
import os
import sys

import numpy as np

from . import datasets
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .codec import VQCodec, vq_train_step
from .config import RunConfig
from .datasets import compute_mask, load_image, load_pairs, save_image
from .diffusion import Denoiser, ddpm_sample, make_schedule, pretrain_trunk
from .errors import DataError, DependencyError, ListingError, ParameterError
from .inr import inr_epoch_latents, prepare_latents
from .metrics import MetricReport
from .optim import Adam
from .pixel_cr import PixelCR, loss_pixel
from .autodiff import Tensor

PHASES = ("pixel", "codec", "trunk", "control")

# architecture fields that must match between a checkpoint and the config
_ARCH_KEYS = (
    "image_size", "px_channels", "px_blocks", "px_window", "px_heads",
    "px_mlp_ratio", "cd_latent_dim", "cd_codebook", "cd_downsample",
    "cd_hidden", "base_width", "groups", "T", "beta_start", "beta_end",
)

_PHASE_SALT = {"pixel": 1, "codec": 2, "trunk": 3, "control": 4, "infer": 5}


def ckpt_path(cfg: RunConfig, phase):
    return os.path.join(cfg.out_dir, f"{phase}.ckpt")


def _require_ckpt(cfg, phase):
    path = ckpt_path(cfg, phase)
    if not os.path.exists(path):
        raise DependencyError(
            f"phase {phase!r} checkpoint missing at {path}; "
            f"run `idfcr train --phase {phase}` first"
        )
    ck = load_checkpoint(path)
    mismatched = [
        k for k in _ARCH_KEYS
        if k in ck.config and ck.config[k] != getattr(cfg, k)
    ]
    if mismatched:
        detail = ", ".join(
            f"{k}: checkpoint {ck.config[k]} vs config {getattr(cfg, k)}"
            for k in mismatched
        )
        raise DependencyError(f"checkpoint {path} config mismatch: {detail}")
    return ck


def _phase_rng(cfg, phase):
    return np.random.default_rng([cfg.seed, _PHASE_SALT[phase]])


def _write_log(cfg, phase, records):
    log_dir = os.path.join(cfg.out_dir, "logs")
    os.makedirs(log_dir, exist_ok=True)
    path = os.path.join(log_dir, f"{phase}.jsonl")
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def _save_phase(cfg, phase, state, step, extra=None):
    os.makedirs(cfg.out_dir, exist_ok=True)
    config = cfg.to_dict()
    if extra:
        config.update(extra)
    path = ckpt_path(cfg, phase)
    save_checkpoint(path, phase, state, config=config, step=step)
    return load_checkpoint(path)


# -- commands -----------------------------------------------------------------


def cmd_make_data(cfg: RunConfig):
    """Write the synthetic paired training set; deterministic per seed."""
    cfg.validate()
    if cfg.n_pairs == 0:
        for sub in ("cloud", "label"):
            os.makedirs(os.path.join(cfg.data_root, "train", sub), exist_ok=True)
        print("warning: n_pairs = 0, wrote empty dataset directories",
              file=sys.stderr)
        return []
    return datasets.generate_dataset(
        cfg.data_root, "train", cfg.n_pairs, cfg.image_size,
        seed=cfg.seed, params=cfg.cloud_params(),
    )


def _load_train_pairs(cfg):
    pairs = load_pairs(cfg.data_root, "train")
    if not pairs:
        raise DataError(f"no training pairs under {cfg.data_root}/train")
    return pairs


def _train_pixel(cfg: RunConfig) -> Checkpoint:
    pairs = _load_train_pairs(cfg)
    net = PixelCR(cfg.pixel_config(), seed=cfg.seed)
    opt = Adam(net.parameters(), lr=cfg.pixel_lr)
    masks = [compute_mask(p, cfg.mask_threshold).mask for p in pairs]
    records = []
    step = 0
    for epoch in range(cfg.pixel_epochs):
        for pair, mask in zip(pairs, masks):
            opt.zero_grad()
            out, attns = net(Tensor(pair.cloudy[None]))
            total, l_cr, l_attn = loss_pixel(out, Tensor(pair.clear[None]), attns, mask[None])
            total.backward()
            opt.step()
            records.append({
                "step": step, "epoch": epoch, "pair": pair.id,
                "loss": float(total.data), "l_cr": float(l_cr.data),
                "l_attn": float(l_attn.data),
            })
            step += 1
    _write_log(cfg, "pixel", records)
    return _save_phase(cfg, "pixel", net.state_dict(), step)


def _train_codec(cfg: RunConfig) -> Checkpoint:
    pairs = _load_train_pairs(cfg)
    # the codec must represent clean labels and restored images alike, so
    # train it on both sides of every pair
    images = np.stack([p.clear for p in pairs] + [p.cloudy for p in pairs])
    codec = VQCodec(cfg.codec_config(), seed=cfg.seed)
    opt = Adam(codec.parameters(), lr=cfg.codec_lr)
    rng = _phase_rng(cfg, "codec")
    n = images.shape[0]
    steps_per_epoch = max(1, math.ceil(n / cfg.codec_batch))
    records = []
    step = 0
    for epoch in range(cfg.codec_epochs):
        for _ in range(steps_per_epoch):
            idx = rng.integers(0, n, size=min(cfg.codec_batch, n))
            rec, code, commit = vq_train_step(codec, opt, images[idx])
            records.append({
                "step": step, "epoch": epoch, "loss": rec,
                "l_code": code, "l_commit": commit,
            })
            step += 1
    _write_log(cfg, "codec", records)
    return _save_phase(cfg, "codec", codec.state_dict(), step)


def _build_codec(cfg, ck) -> VQCodec:
    codec = VQCodec(cfg.codec_config(), seed=cfg.seed)
    codec.load_state_dict(ck.state)
    return codec


def _build_pixel(cfg, ck) -> PixelCR:
    net = PixelCR(cfg.pixel_config(), seed=cfg.seed)
    net.load_state_dict(ck.state)
    return net


def _label_latents(cfg, codec, pairs):
    grids = [codec.latent_grid(p.clear) for p in pairs]
    return np.stack([g.z_d for g in grids]).astype(np.float32)


def _train_trunk(cfg: RunConfig) -> Checkpoint:
    pairs = _load_train_pairs(cfg)
    codec = _build_codec(cfg, _require_ckpt(cfg, "codec"))
    raw = _label_latents(cfg, codec, pairs)
    std = float(raw.std())
    latent_scale = 1.0 / std if std > 1e-8 else 1.0
    latents = raw * np.float32(latent_scale)

    denoiser = Denoiser(cfg.diffusion_config(), seed=cfg.seed)
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    steps = cfg.trunk_epochs * max(1, math.ceil(len(pairs) / cfg.trunk_batch))
    losses = pretrain_trunk(
        denoiser, latents, schedule, steps=steps, lr=cfg.trunk_lr,
        rng=_phase_rng(cfg, "trunk"), batch=cfg.trunk_batch,
    )
    records = [{"step": i, "loss": v} for i, v in enumerate(losses)]
    _write_log(cfg, "trunk", records)
    return _save_phase(
        cfg, "trunk", denoiser.trunk.state_dict(), len(losses),
        extra={"latent_scale": latent_scale},
    )


def _train_control(cfg: RunConfig) -> Checkpoint:
    pairs = _load_train_pairs(cfg)
    pixel = _build_pixel(cfg, _require_ckpt(cfg, "pixel"))
    pixel.freeze()
    codec = _build_codec(cfg, _require_ckpt(cfg, "codec"))
    codec.freeze()
    trunk_ck = _require_ckpt(cfg, "trunk")
    latent_scale = float(trunk_ck.config["latent_scale"])

    denoiser = Denoiser(cfg.diffusion_config(), seed=cfg.seed)
    denoiser.trunk.load_state_dict(trunk_ck.state)
    denoiser.attach_control()

    z0_all, cond_all = prepare_latents(pairs, codec, pixel, latent_scale)
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    opt = Adam(denoiser.trainable_parameters(), lr=cfg.control_lr)
    rng = _phase_rng(cfg, "control")
    inner = []
    for epoch in range(cfg.control_epochs):
        inr_epoch_latents(
            z0_all, cond_all, denoiser, opt, schedule, cfg.inr_config(),
            rng, batch=cfg.control_batch, log=inner, epoch=epoch,
        )
    records = [
        {"step": i, "epoch": r["epoch"], "batch": r["batch"], "k": r["k"],
         "loss": r["loss"]}
        for i, r in enumerate(inner)
    ]
    _write_log(cfg, "control", records)
    state = {}
    for name, arr in denoiser.trunk.state_dict().items():
        state[f"trunk.{name}"] = arr
    for name, arr in denoiser.control.state_dict().items():
        state[f"control.{name}"] = arr
    return _save_phase(
        cfg, "control", state, len(records),
        extra={"latent_scale": latent_scale},
    )


_TRAINERS = {
    "pixel": _train_pixel,
    "codec": _train_codec,
    "trunk": _train_trunk,
    "control": _train_control,
}


def cmd_train(cfg: RunConfig, phase) -> Checkpoint:
    cfg.validate()
    if phase not in PHASES:
        raise ParameterError(f"unknown phase {phase!r}; expected one of {PHASES}")
    return _TRAINERS[phase](cfg)


def _load_inference_stack(cfg):
    pixel = _build_pixel(cfg, _require_ckpt(cfg, "pixel"))
    codec = _build_codec(cfg, _require_ckpt(cfg, "codec"))
    ctrl_ck = _require_ckpt(cfg, "control")
    denoiser = Denoiser(cfg.diffusion_config(), seed=cfg.seed)
    denoiser.attach_control()
    trunk_state = {k[len("trunk."):]: v for k, v in ctrl_ck.state.items()
                   if k.startswith("trunk.")}
    control_state = {k[len("control."):]: v for k, v in ctrl_ck.state.items()
                     if k.startswith("control.")}
    denoiser.trunk.load_state_dict(trunk_state)
    denoiser.control.load_state_dict(control_state)
    denoiser.trunk.freeze()
    latent_scale = float(ctrl_ck.config["latent_scale"])
    return pixel, codec, denoiser, latent_scale


def cmd_infer(cfg: RunConfig, input_path, out_dir=None, seed=None, steps=None):
    """Cloudy PNG(s) -> restored LQ and HQ PNGs under out_dir/{lq,hq}."""
    cfg.validate()
    out_dir = out_dir or os.path.join(cfg.out_dir, "infer")
    seed = cfg.seed if seed is None else int(seed)
    steps = cfg.sample_steps if steps is None else int(steps)
    if os.path.isdir(input_path):
        names = sorted(f for f in os.listdir(input_path) if f.endswith(".png"))
        if not names:
            raise DataError(f"no .png files in {input_path}")
        paths = [os.path.join(input_path, n) for n in names]
    elif os.path.isfile(input_path):
        names = [os.path.basename(input_path)]
        paths = [input_path]
    else:
        raise DataError(f"input {input_path} does not exist")

    pixel, codec, denoiser, latent_scale = _load_inference_stack(cfg)
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)

    cloudy = np.stack([load_image(p) for p in paths])
    lq = pixel.infer(cloudy)
    conds = np.stack([codec.latent_grid(img).z_d for img in lq])
    conds = (conds * np.float32(latent_scale)).astype(np.float32)

    rng = np.random.default_rng([seed, _PHASE_SALT["infer"]])
    z0_hat = ddpm_sample(denoiser, schedule, conds.shape, rng,
                         cond=conds, steps=steps)
    hq = codec.decode_latents(z0_hat / np.float32(latent_scale))

    lq_dir = os.path.join(out_dir, "lq")
    hq_dir = os.path.join(out_dir, "hq")
    os.makedirs(lq_dir, exist_ok=True)
    os.makedirs(hq_dir, exist_ok=True)
    written = []
    for i, name in enumerate(names):
        save_image(os.path.join(lq_dir, name), lq[i])
        save_image(os.path.join(hq_dir, name), hq[i])
        written.append(name)
    return written


def cmd_eval(pred_dir, label_dir, out_path=None) -> MetricReport:
    """Per-image and mean PSNR/SSIM/RMSE over filename-matched PNG dirs."""
    for d in (pred_dir, label_dir):
        if not os.path.isdir(d):
            raise ListingError(f"missing directory: {d}")
    preds = sorted(f for f in os.listdir(pred_dir) if f.endswith(".png"))
    labels = sorted(f for f in os.listdir(label_dir) if f.endswith(".png"))
    orphans = set(preds) ^ set(labels)
    if orphans:
        name = sorted(orphans)[0]
        side = pred_dir if name in preds else label_dir
        raise ListingError(f"unmatched file {name!r} present only in {side}")
    if not preds:
        raise DataError("no image pairs to evaluate")
    pair_iter = (
        (load_image(os.path.join(pred_dir, n)), load_image(os.path.join(label_dir, n)))
        for n in preds
    )
    report = MetricReport.from_pairs(pair_iter, ids=[os.path.splitext(n)[0] for n in preds])
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
    return report


def run_full_pipeline(cfg: RunConfig):
    """make-data, all four phases, inference over the training cloudy set."""
    cmd_make_data(cfg)
    for phase in PHASES:
        cmd_train(cfg, phase)
    cloud_dir = os.path.join(cfg.data_root, "train", "cloud")
    return cmd_infer(cfg, cloud_dir)
