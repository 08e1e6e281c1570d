"""Linear-beta noise schedule, forward noising, the epsilon-prediction loss,
EMA weights, deterministic DDIM sampling, and the latent codec interface."""
from __future__ import annotations

import copy
import enum
import hashlib
import json
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Tables indexed by timestep ``t`` in ``[1, T]`` (entry ``t - 1``)."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, t) -> Tensor:
        """``alpha_bar_t`` as float64, with ``alpha_bar_0 = 1``."""
        t = torch.as_tensor(t, dtype=torch.long)
        table = torch.from_numpy(np.concatenate([[1.0], self.alpha_bar]))
        return table[t]

    def fingerprint(self) -> dict:
        return {"kind": "linear", "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.fingerprint(), sort_keys=True).encode()).hexdigest()[:16]


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start < 1 or not 0 < beta_end < 1 or (T > 1 and not beta_start < beta_end):
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(beta, alpha, alpha_bar, beta_start, beta_end)


def _check_t(schedule: NoiseSchedule, t: Tensor) -> None:
    if (t < 1).any() or (t > schedule.T).any():
        raise ValueError(f"timesteps must lie in [1, {schedule.T}], got {t.min().item()}..{t.max().item()}")


def _bcast(v: Tensor, like: Tensor) -> Tensor:
    return v.to(like.dtype).reshape(-1, *([1] * (like.dim() - 1)))


def forward_noising(schedule: NoiseSchedule, z0: Tensor, t, eps: Tensor) -> Tensor:
    """``sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps``."""
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    _check_t(schedule, t)
    ab = schedule.alpha_bar_at(t)
    return _bcast(ab.sqrt(), z0) * z0 + _bcast((1 - ab).sqrt(), z0) * eps


def sample_timesteps(schedule: NoiseSchedule, n: int, generator: torch.Generator) -> Tensor:
    return torch.randint(1, schedule.T + 1, (n,), generator=generator)


def diffusion_loss(model, schedule: NoiseSchedule, z0: Tensor, cond, generator: torch.Generator) -> Tensor:
    """Mean squared error between predicted and true noise at a uniform random ``t``.

    ``model(z_t, t, cond)`` must return a tensor shaped like ``z0``.
    """
    t = sample_timesteps(schedule, z0.shape[0], generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = forward_noising(schedule, z0, t, eps)
    return F.mse_loss(model(z_t, t, cond), eps)


# ---------------------------------------------------------------------------
# EMA


def ema_update(shadow: dict[str, Tensor], weights: dict[str, Tensor], decay: float) -> dict[str, Tensor]:
    """``decay * shadow + (1 - decay) * weights`` for every entry."""
    if shadow.keys() != weights.keys():
        raise ValueError("EMA shadow and weights have different entries")
    out = {}
    for k, s in shadow.items():
        w = weights[k]
        if s.shape != w.shape:
            raise ValueError(f"shape mismatch for {k}: {tuple(s.shape)} vs {tuple(w.shape)}")
        out[k] = decay * s + (1 - decay) * w
    return out


class EMA:
    """Shadow copy of a model's trainable parameters.

    With ``warmup`` the effective decay is ``min(decay, (1 + n) / (10 + n))``
    after ``n`` updates, which lets short runs move off the initial weights.
    """

    def __init__(self, model: nn.Module, decay: float = 0.9999, warmup: bool = False):
        self.decay = decay
        self.warmup = warmup
        self.num_updates = 0
        self.model = copy.deepcopy(model).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    def current_decay(self) -> float:
        if not self.warmup:
            return self.decay
        return min(self.decay, (1 + self.num_updates) / (10 + self.num_updates))

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        d = self.current_decay()
        src = dict(model.named_parameters())
        for name, p in self.model.named_parameters():
            p.mul_(d).add_(src[name].detach(), alpha=1 - d)
        self.num_updates += 1

    def state_dict(self) -> dict:
        return {"decay": self.decay, "warmup": self.warmup, "num_updates": self.num_updates,
                "weights": self.model.state_dict()}

    def load_state_dict(self, state: dict) -> None:
        self.decay, self.warmup = state["decay"], state["warmup"]
        self.num_updates = state["num_updates"]
        self.model.load_state_dict(state["weights"])


# ---------------------------------------------------------------------------
# sampling


def timestep_ladder(T: int, steps: int) -> list[int]:
    """Strictly decreasing timesteps from ``T``; the sampler ends at ``t = 0``."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if steps > T:
        raise ValueError(f"cannot take {steps} sampling steps with T={T}")
    return [int(round(v)) for v in np.linspace(T, 0, steps + 1)[:-1]]


def ddim_step(z_t: Tensor, eps: Tensor, ab_t: Tensor, ab_prev: Tensor, clip_x0: float | None = None) -> Tensor:
    x0 = (z_t - (1 - ab_t).sqrt() * eps) / ab_t.sqrt()
    if clip_x0 is not None:
        x0 = x0.clamp(-clip_x0, clip_x0)
    return ab_prev.sqrt() * x0 + (1 - ab_prev).sqrt() * eps


@torch.no_grad()
def ode_sample(
    model,
    schedule: NoiseSchedule,
    cond,
    shape: tuple[int, ...],
    steps: int = 50,
    seed: int = 0,
    clip_x0: float | None = None,
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """Deterministic (eta = 0) DDIM integration from pure noise at ``t = T`` to ``t = 0``."""
    ladder = timestep_ladder(schedule.T, steps)
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(shape, generator=g, dtype=dtype)
    for i, t in enumerate(ladder):
        t_prev = ladder[i + 1] if i + 1 < len(ladder) else 0
        tt = torch.full((shape[0],), t, dtype=torch.long)
        eps = model(z, tt, cond)
        ab_t = schedule.alpha_bar_at(t).to(dtype)
        ab_prev = schedule.alpha_bar_at(t_prev).to(dtype)
        z = ddim_step(z, eps, ab_t, ab_prev, clip_x0)
    return z


# ---------------------------------------------------------------------------
# latent codec


class Provenance(enum.Enum):
    ENCODED = "encoded"
    SYNTHETIC_DIRECT = "synthetic-direct"


class LatentCodec(Protocol):
    factor: int
    latent_channels: int

    def encode(self, image: Tensor) -> Tensor: ...

    def decode(self, latent: Tensor) -> Tensor: ...


@dataclass(frozen=True)
class PoolingCodec:
    """Stub autoencoder: ``factor x`` average pooling on encode, nearest-neighbour
    expansion on decode.

    Image channel ``c`` feeds latent channels ``k`` with ``k % C == c``; decode
    averages those channels back. Pixel values in ``[0, 1]`` map to latents in
    ``[-1, 1]``.
    """

    factor: int = 8
    latent_channels: int = 4
    image_channels: int = 3

    def _check(self, H: int, W: int) -> None:
        if H % self.factor or W % self.factor:
            raise ValueError(f"image {H}x{W} is not divisible by {self.factor}")

    def encode(self, image: Tensor) -> Tensor:
        if image.shape[1] != self.image_channels:
            raise ValueError(f"expected {self.image_channels} image channels, got {image.shape[1]}")
        self._check(*image.shape[-2:])
        pooled = F.avg_pool2d(image, self.factor)
        idx = [k % self.image_channels for k in range(self.latent_channels)]
        return pooled[:, idx] * 2 - 1

    def decode(self, latent: Tensor) -> Tensor:
        C = self.image_channels
        chans = [latent[:, [k for k in range(self.latent_channels) if k % C == c]].mean(1) for c in range(C)]
        img = (torch.stack(chans, 1) + 1) / 2
        return img.repeat_interleave(self.factor, -2).repeat_interleave(self.factor, -1)


def to_latent(x: Tensor, provenance: Provenance, codec: LatentCodec) -> Tensor:
    if provenance is Provenance.SYNTHETIC_DIRECT:
        return x
    return codec.encode(x)
