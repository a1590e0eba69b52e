"""Latent-space DDPM with a frozen trunk and a trainable control branch.

Pieces: linear-beta noise schedule, closed-form forward corruption
z_t = sqrt(a_bar_t) z_0 + sqrt(1 - a_bar_t) eps, Gaussian posterior
parameters (with a_bar_0 := 1 so the final step is deterministic), a small
two-resolution UNet noise predictor, a control branch cloned from the
trunk's encoder + middle whose features enter the trunk decoder through
zero-initialized 1x1 fusion convs, ancestral sampling over an evenly
strided timestep subset, and the training steps for both phases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ParameterError
from .nn import Conv2d, ConvTranspose2d, GroupNorm, Linear, Module
from .optim import Adam


# -- schedule ----------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step retention a_t = 1 - beta_t and cumulative products a_bar_t.

    Arrays are float64, index 0 holds t=1.  a_bar_0 is defined as 1.
    """

    T: int
    a: np.ndarray
    a_bar: np.ndarray

    def at(self, t):
        """(a_t, a_bar_t, a_bar_{t-1}) for integer t in [1, T]."""
        t = int(t)
        if not (1 <= t <= self.T):
            raise ParameterError(f"t must be in [1,{self.T}], got {t}")
        prev = self.a_bar[t - 2] if t >= 2 else 1.0
        return float(self.a[t - 1]), float(self.a_bar[t - 1]), float(prev)

    def a_bar_at(self, t):
        """a_bar_t with a_bar_0 := 1."""
        t = int(t)
        if not (0 <= t <= self.T):
            raise ParameterError(f"t must be in [0,{self.T}], got {t}")
        return 1.0 if t == 0 else float(self.a_bar[t - 1])


def make_schedule(T, beta_start=1e-4, beta_end=0.02) -> NoiseSchedule:
    """Linear beta ramp from beta_start to beta_end over T steps."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    a = 1.0 - beta
    return NoiseSchedule(T=int(T), a=a, a_bar=np.cumprod(a))


def forward_diffuse(z_0, t, eps, schedule: NoiseSchedule):
    """z_t = sqrt(a_bar_t) z_0 + sqrt(1 - a_bar_t) eps; t scalar or [N]."""
    z_0 = np.asarray(z_0)
    eps = np.asarray(eps)
    if z_0.shape != eps.shape:
        raise ParameterError(f"eps shape {eps.shape} != z_0 shape {z_0.shape}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise ParameterError(f"t must be in [1,{schedule.T}], got {t}")
    ab = schedule.a_bar[t_arr - 1]
    if t_arr.size == 1:
        s, n = float(np.sqrt(ab[0])), float(np.sqrt(1.0 - ab[0]))
        return s * z_0 + n * eps
    shape = (len(t_arr),) + (1,) * (z_0.ndim - 1)
    s = np.sqrt(ab).reshape(shape).astype(z_0.dtype)
    n = np.sqrt(1.0 - ab).reshape(shape).astype(z_0.dtype)
    return s * z_0 + n * eps


def invert_diffuse(z_t, t, eps, schedule: NoiseSchedule):
    """Recover z_0 = (z_t - sqrt(1 - a_bar_t) eps) / sqrt(a_bar_t)."""
    _, ab, _ = schedule.at(t)
    return (np.asarray(z_t) - np.sqrt(1.0 - ab) * np.asarray(eps)) / np.sqrt(ab)


def posterior_params(z_t, eps_pred, t, schedule: NoiseSchedule, t_prev=None):
    """Mean and variance of the reverse-step Gaussian at time t.

    mu = (1/sqrt(a)) (z_t - ((1-a)/sqrt(1-a_bar_t)) eps_pred)
    sigma2 = ((1-a_bar_prev)/(1-a_bar_t)) (1-a)

    where a = a_bar_t / a_bar_prev.  With the default t_prev = t-1 this is
    the single-step posterior (a = a_t); a strided sampler passes the
    previous retained timestep instead.  a_bar_0 := 1, so sigma2 == 0 at
    the final step.
    """
    t = int(t)
    if t < 1:
        raise ParameterError(f"t must be >= 1, got {t}")
    if t_prev is None:
        t_prev = t - 1
    t_prev = int(t_prev)
    if not (0 <= t_prev < t):
        raise ParameterError(f"t_prev must be in [0,{t - 1}], got {t_prev}")
    ab_t = schedule.a_bar_at(t)
    ab_prev = schedule.a_bar_at(t_prev)
    a = ab_t / ab_prev
    coef = (1.0 - a) / np.sqrt(1.0 - ab_t)
    mu = (np.asarray(z_t) - coef * np.asarray(eps_pred)) / np.sqrt(a)
    sigma2 = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - a)
    if t_prev == 0:
        sigma2 = 0.0
    return mu, float(sigma2)


def sample_timesteps(T, steps):
    """Evenly strided increasing subset of [1..T] with both endpoints."""
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    if steps > T:
        raise ParameterError(f"steps {steps} exceeds schedule length T={T}")
    if steps == 1:
        return np.array([T], dtype=np.int64)
    return np.round(np.linspace(1, T, steps)).astype(np.int64)


# -- noise-prediction network -------------------------------------------------


@dataclass(frozen=True)
class DiffusionConfig:
    latent_dim: int = 8
    base: int = 32
    groups: int = 8
    T: int = 64
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 50

    @property
    def emb_dim(self):
        return self.base * 4

    def validate(self):
        if self.base % self.groups:
            raise ConfigError(f"base {self.base} not divisible by groups {self.groups}")
        if self.sample_steps > self.T:
            raise ConfigError(
                f"sample_steps {self.sample_steps} exceeds T {self.T}"
            )


def sinusoidal_embedding(t_arr, dim, dtype=np.float32):
    """Classic transformer timestep embedding, [N, dim]."""
    t_arr = np.atleast_1d(np.asarray(t_arr, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = t_arr[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t_arr), 1))], axis=1)
    return emb.astype(dtype)


class ResBlock(Module):
    """GroupNorm -> SiLU -> conv, time-embedding injection, residual skip."""

    def __init__(self, cin, cout, emb_dim, groups, rng, dtype=np.float32):
        self.norm1 = GroupNorm(min(groups, cin), cin, dtype)
        self.conv1 = Conv2d(cin, cout, 3, rng, dtype=dtype)
        self.emb_proj = Linear(emb_dim, cout, rng, dtype=dtype)
        self.norm2 = GroupNorm(min(groups, cout), cout, dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, dtype=dtype)
        self.skip = Conv2d(cin, cout, 1, rng, pad=0, dtype=dtype) if cin != cout else None

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(ad.silu(self.norm1(x)))
        n, c = h.data.shape[0], h.data.shape[1]
        e = ad.reshape(self.emb_proj(emb), (n, c, 1, 1))
        h = h + e
        h = self.conv2(ad.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class SelfAttention2d(Module):
    """Single-head full self-attention over the spatial grid, residual."""

    def __init__(self, channels, groups, rng, dtype=np.float32):
        self.norm = GroupNorm(min(groups, channels), channels, dtype)
        self.q = Linear(channels, channels, rng, dtype=dtype)
        self.k = Linear(channels, channels, rng, dtype=dtype)
        self.v = Linear(channels, channels, rng, dtype=dtype)
        self.proj = Linear(channels, channels, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.data.shape
        t = ad.reshape(ad.transpose(self.norm(x), (0, 2, 3, 1)), (n, h * w, c))
        att = ad.matmul(self.q(t), ad.transpose(self.k(t), (0, 2, 1))) * (
            1.0 / np.sqrt(c)
        )
        o = self.proj(ad.matmul(ad.softmax(att, axis=-1), self.v(t)))
        o = ad.transpose(ad.reshape(o, (n, h, w, c)), (0, 3, 1, 2))
        return x + o


class UNetTrunk(Module):
    """Two-resolution UNet noise predictor with a learned null-prompt token."""

    def __init__(self, cfg: DiffusionConfig, rng, dtype=np.float32):
        w, e, g = cfg.base, cfg.emb_dim, cfg.groups
        self.cfg = cfg
        self.t1 = Linear(cfg.base, e, rng, dtype=dtype)
        self.t2 = Linear(e, e, rng, dtype=dtype)
        self.null_emb = Parameter(np.zeros(e, dtype=dtype))
        self.stem = Conv2d(cfg.latent_dim, w, 3, rng, dtype=dtype)
        self.enc1 = ResBlock(w, w, e, g, rng, dtype)
        self.down = Conv2d(w, 2 * w, 3, rng, stride=2, pad=1, dtype=dtype)
        self.enc2 = ResBlock(2 * w, 2 * w, e, g, rng, dtype)
        self.mid1 = ResBlock(2 * w, 2 * w, e, g, rng, dtype)
        self.mid_attn = SelfAttention2d(2 * w, g, rng, dtype)
        self.mid2 = ResBlock(2 * w, 2 * w, e, g, rng, dtype)
        self.dec2 = ResBlock(4 * w, 2 * w, e, g, rng, dtype)
        self.up = ConvTranspose2d(2 * w, w, 4, rng, stride=2, pad=1, dtype=dtype)
        self.dec1 = ResBlock(2 * w, w, e, g, rng, dtype)
        self.out_norm = GroupNorm(min(g, w), w, dtype)
        self.out_conv = Conv2d(w, cfg.latent_dim, 3, rng, dtype=dtype)

    def embed(self, t_arr) -> Tensor:
        """Time embedding plus the learned empty-prompt token."""
        sin = Tensor(sinusoidal_embedding(t_arr, self.cfg.base,
                                          dtype=self.t1.weight.data.dtype))
        emb = self.t2(ad.silu(self.t1(sin)))
        return emb + self.null_emb

    def encode_features(self, z: Tensor, emb: Tensor):
        """(h1, h3, m): the two skip features and the middle output."""
        h0 = self.stem(z)
        h1 = self.enc1(h0, emb)
        h2 = self.down(h1)
        h3 = self.enc2(h2, emb)
        m = self.mid2(self.mid_attn(self.mid1(h3, emb)), emb)
        return h1, h3, m

    def decode_features(self, h1: Tensor, h3: Tensor, m: Tensor, emb: Tensor) -> Tensor:
        d2 = self.dec2(ad.concat([m, h3], axis=1), emb)
        u = self.up(d2)
        d1 = self.dec1(ad.concat([u, h1], axis=1), emb)
        return self.out_conv(ad.silu(self.out_norm(d1)))

    def forward(self, z: Tensor, t_arr) -> Tensor:
        emb = self.embed(t_arr)
        h1, h3, m = self.encode_features(z, emb)
        return self.decode_features(h1, h3, m, emb)


class ControlBranch(Module):
    """Trainable clone of the trunk encoder + middle with a condition head.

    Outputs pass through zero-initialized 1x1 convs, so a fresh branch
    contributes exactly nothing to the trunk prediction.
    """

    def __init__(self, trunk: UNetTrunk, rng, dtype=np.float32):
        cfg = trunk.cfg
        w, e, g = cfg.base, cfg.emb_dim, cfg.groups
        self.stem = Conv2d(cfg.latent_dim, w, 3, rng, dtype=dtype)
        self.enc1 = ResBlock(w, w, e, g, rng, dtype)
        self.down = Conv2d(w, 2 * w, 3, rng, stride=2, pad=1, dtype=dtype)
        self.enc2 = ResBlock(2 * w, 2 * w, e, g, rng, dtype)
        self.mid1 = ResBlock(2 * w, 2 * w, e, g, rng, dtype)
        self.mid_attn = SelfAttention2d(2 * w, g, rng, dtype)
        self.mid2 = ResBlock(2 * w, 2 * w, e, g, rng, dtype)
        self.hint = Conv2d(cfg.latent_dim, w, 3, rng, dtype=dtype)
        self.fuse1 = Conv2d(w, w, 1, rng, pad=0, dtype=dtype, zero_init=True)
        self.fuse3 = Conv2d(2 * w, 2 * w, 1, rng, pad=0, dtype=dtype, zero_init=True)
        self.fuse_m = Conv2d(2 * w, 2 * w, 1, rng, pad=0, dtype=dtype, zero_init=True)
        self.clone_from(trunk)

    _COPIED = ("stem", "enc1", "down", "enc2", "mid1", "mid_attn", "mid2")

    def clone_from(self, trunk: UNetTrunk):
        """Copy the trunk's encoder + middle weights into this branch."""
        for name in self._COPIED:
            src = getattr(trunk, name)
            dst = getattr(self, name)
            dst.load_state_dict(src.state_dict())

    def forward(self, z: Tensor, cond: Tensor, emb: Tensor):
        """Fused residuals (d1, d3, dm) to add onto the trunk's features."""
        h0 = self.stem(z) + self.hint(cond)
        h1 = self.enc1(h0, emb)
        h2 = self.down(h1)
        h3 = self.enc2(h2, emb)
        m = self.mid2(self.mid_attn(self.mid1(h3, emb)), emb)
        return self.fuse1(h1), self.fuse3(h3), self.fuse_m(m)


class Denoiser(Module):
    """Trunk plus optional control branch; the conditioned noise predictor."""

    def __init__(self, cfg: DiffusionConfig, seed=0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self._rng = np.random.default_rng([int(seed), 0xD1FF])
        self.trunk = UNetTrunk(cfg, self._rng, dtype)
        self.control = None

    def attach_control(self):
        """Freeze the trunk and clone encoder + middle into a control branch."""
        self.trunk.freeze()
        self.control = ControlBranch(self.trunk, self._rng, self.dtype)
        return self.control

    def predict(self, z_t, t_arr, cond=None) -> Tensor:
        """eps_pred for latents z_t [N,D,h,w] at integer times t_arr [N]."""
        z = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t))
        if cond is not None and self.control is None:
            raise ConfigError("conditioned prediction requires a control branch")
        emb = self.trunk.embed(t_arr)
        h1, h3, m = self.trunk.encode_features(z, emb)
        if cond is not None:
            c = cond if isinstance(cond, Tensor) else Tensor(np.asarray(cond))
            if c.data.shape != z.data.shape:
                raise ConfigError(
                    f"condition shape {c.data.shape} != latent shape {z.data.shape}"
                )
            d1, d3, dm = self.control(z, c, emb)
            h1, h3, m = h1 + d1, h3 + d3, m + dm
        return self.trunk.decode_features(h1, h3, m, emb)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def predict_noise(denoiser: Denoiser, z_t, t_arr, cond=None) -> np.ndarray:
    """Graph-free eps prediction."""
    with ad.no_grad():
        return denoiser.predict(z_t, t_arr, cond).data


# -- training and sampling -----------------------------------------------------


def diffusion_loss(denoiser: Denoiser, z_0, cond, schedule, rng):
    """Draw (t, eps), corrupt, and return the noise-matching MSE (graphed).

    Returns (loss, t, eps) so callers can reuse the draw.
    """
    z_0 = np.asarray(z_0)
    n = z_0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(z_0.shape).astype(z_0.dtype)
    z_t = forward_diffuse(z_0, t, eps, schedule)
    eps_pred = denoiser.predict(z_t, t, cond)
    diff = eps_pred - Tensor(eps)
    return ad.tmean(diff * diff), t, eps


def train_step(denoiser: Denoiser, opt: Adam, z_0, cond, schedule, rng):
    """Algorithm: sample t and eps, one optimizer step on the MSE. Returns loss."""
    opt.zero_grad()
    loss, _, _ = diffusion_loss(denoiser, z_0, cond, schedule, rng)
    loss.backward()
    opt.step()
    return float(loss.data)


def ddpm_sample(denoiser: Denoiser, schedule: NoiseSchedule, shape, rng,
                cond=None, steps=None):
    """Ancestral sampling from pure noise down an evenly strided time grid."""
    steps = schedule.T if steps is None else int(steps)
    ts = sample_timesteps(schedule.T, steps)
    z = rng.standard_normal(shape).astype(np.float32)
    for i in range(len(ts) - 1, -1, -1):
        t = int(ts[i])
        t_prev = int(ts[i - 1]) if i > 0 else 0
        t_arr = np.full(shape[0], t, dtype=np.int64)
        eps_pred = predict_noise(denoiser, z, t_arr, cond)
        mu, sigma2 = posterior_params(z, eps_pred, t, schedule, t_prev=t_prev)
        if t_prev > 0:
            z = (mu + np.sqrt(sigma2) * rng.standard_normal(shape)).astype(np.float32)
        else:
            z = mu.astype(np.float32)
    return z


def pretrain_trunk(denoiser: Denoiser, latents, schedule, steps, lr, rng, batch=2):
    """Unconditional trunk training on clean latents, then freeze and clone.

    Returns the per-step loss list; afterwards the trunk is frozen and the
    control branch initialized as its copy.
    """
    latents = np.asarray(latents)
    opt = Adam(denoiser.trunk.parameters(), lr=lr)
    losses = []
    n = latents.shape[0]
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch, n))
        losses.append(train_step(denoiser, opt, latents[idx], None, schedule, rng))
    denoiser.attach_control()
    return losses
