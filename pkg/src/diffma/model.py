"""Denoising network: patch tokens of the noisy target latent pass through a
stack of dual-branch spiral-scan Mamba blocks conditioned with adaLN and the
source soft mask."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from . import spiral
from .errors import ConfigError, NonFiniteError
from .ssm import discretize_zoh, recurrent_scan, selective_params

PRESET_LAYERS = {"S": 4, "B": 8, "L": 16, "XL": 28, "XXL": 56}

# (preset, patch size) -> (params, FLOPs) as published for the 512-wide models
REFERENCE_SIZES = {
    ("S", 7): (10.16e6, 0.05e9), ("S", 4): (9.95e6, 0.17e9), ("S", 2): (9.88e6, 0.43e9),
    ("B", 7): (18.57e6, 0.09e9), ("B", 4): (18.37e6, 0.28e9), ("B", 2): (18.29e6, 0.85e9),
    ("L", 7): (35.39e6, 0.17e9), ("L", 4): (35.19e6, 0.45e9), ("L", 2): (35.11e6, 1.70e9),
    ("XL", 7): (60.61e6, 0.29e9), ("XL", 4): (60.42e6, 0.78e9), ("XL", 2): (60.35e6, 2.96e9),
    ("XXL", 7): (119.50e6, 0.57e9), ("XXL", 4): (119.22e6, 1.55e9), ("XXL", 2): (119.30e6, 5.92e9),
}


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 8
    patch_size: int = 2
    dim: int = 512
    state_size: int = 16
    latent_shape: tuple[int, int, int] = (4, 28, 28)
    expand: int = 1
    dt_rank: int = 0  # 0 -> ceil(dim / 16)
    external_tokens: int = 196
    fuse_kernel: int = 7

    def __post_init__(self):
        C, H, W = self.latent_shape
        p = self.patch_size
        if p < 1 or H % p or W % p:
            raise ConfigError(f"latent {H}x{W} is not divisible by patch size {p}")
        if self.layers < 0 or self.dim < 1 or self.state_size < 1:
            raise ConfigError(f"invalid model size in {self}")

    @classmethod
    def preset(cls, name: str, patch_size: int = 2, **overrides) -> "ModelConfig":
        try:
            layers = PRESET_LAYERS[name]
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; choose from {list(PRESET_LAYERS)}") from None
        return cls(layers=layers, patch_size=patch_size, **overrides)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Desk-scale smoke model on a 16x16 latent."""
        base = dict(layers=4, patch_size=2, dim=128, latent_shape=(4, 16, 16))
        base.update(overrides)
        return cls(**base)

    @property
    def grid(self) -> tuple[int, int]:
        _, H, W = self.latent_shape
        return H // self.patch_size, W // self.patch_size

    @property
    def num_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def inner_dim(self) -> int:
        return self.expand * self.dim

    @property
    def rank(self) -> int:
        return self.dt_rank or math.ceil(self.dim / 16)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["latent_shape"] = list(self.latent_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["latent_shape"] = tuple(d["latent_shape"])
        return cls(**d)


# ---------------------------------------------------------------------------
# patches and embeddings


def patchify(z: Tensor, patch_size: int) -> Tensor:
    """``[B, C, H, W]`` -> ``[B, L, p*p*C]`` with tokens in row-major grid order."""
    B, C, H, W = z.shape
    p = patch_size
    if H % p or W % p:
        raise ValueError(f"latent {H}x{W} is not divisible by patch size {p}")
    x = z.reshape(B, C, H // p, p, W // p, p)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(B, (H // p) * (W // p), p * p * C)


def unpatchify(x: Tensor, patch_size: int, channels: int, H: int, W: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    B, L, _ = x.shape
    p = patch_size
    gh, gw = H // p, W // p
    if L != gh * gw:
        raise ValueError(f"{L} tokens cannot tile a {H}x{W} latent with patch {p}")
    x = x.reshape(B, gh, gw, p, p, channels)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(B, channels, H, W)


def sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(dim: int, grid: tuple[int, int]) -> np.ndarray:
    """Fixed 2D sine-cosine position table ``[gh*gw, dim]``, row-major."""
    if dim % 4:
        raise ConfigError(f"token width must be a multiple of 4 for 2D positions, got {dim}")
    gh, gw = grid
    rows, cols = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64), indexing="ij")
    return np.concatenate([sincos_1d(dim // 2, rows), sincos_1d(dim // 2, cols)], axis=1)


def timestep_frequencies(t: Tensor, dim: int = 256, max_period: float = 10000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64).reshape(-1, 1) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimestepEmbedder(nn.Module):
    def __init__(self, dim: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: Tensor) -> Tensor:
        w = self.mlp[0].weight
        return self.mlp(timestep_frequencies(t, self.freq_dim).to(w.dtype))


class HashedFeatureEncoder(nn.Module):
    """Deterministic, parameter-free stand-in for a frozen image encoder.

    Average-pools the source image to a ``k x k`` grid (``K = k*k`` tokens) and
    lifts each cell's channel means to ``dim`` features with a fixed random
    projection seeded from ``seed``.
    """

    def __init__(self, dim: int, tokens: int = 196, seed: int = 0x5EED, in_channels: int = 3):
        super().__init__()
        side = math.isqrt(tokens)
        if side * side != tokens:
            raise ValueError(f"token count must be a perfect square, got {tokens}")
        self.side = side
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("proj", torch.randn(in_channels + 2, dim, generator=g) / math.sqrt(in_channels + 2))

    def forward(self, image: Tensor) -> Tensor:
        B, C = image.shape[:2]
        if C + 2 != self.proj.shape[0]:
            raise ValueError(f"encoder was built for {self.proj.shape[0] - 2} channels, got {C}")
        k = self.side
        cells = F.adaptive_avg_pool2d(image, k).flatten(2).transpose(1, 2)  # [B, K, C]
        yy, xx = torch.meshgrid(torch.linspace(-1, 1, k), torch.linspace(-1, 1, k), indexing="ij")
        coords = torch.stack([yy, xx], -1).reshape(1, k * k, 2).to(image.dtype).expand(B, -1, -1)
        return torch.tanh(torch.cat([cells, coords], -1) @ self.proj.to(image.dtype))


# ---------------------------------------------------------------------------
# conditioning


@dataclass
class SourceCondition:
    """Everything derived from the source image, fixed for a batch."""

    e_ve: Tensor  # [B, L, D] embedder tokens
    mask: Tensor  # [B, L] soft mask
    e_ext: Tensor  # [B, K, D] external encoder tokens

    def index(self, idx) -> "SourceCondition":
        return SourceCondition(self.e_ve[idx], self.mask[idx], self.e_ext[idx])

    def to(self, dtype) -> "SourceCondition":
        return SourceCondition(self.e_ve.to(dtype), self.mask.to(dtype), self.e_ext.to(dtype))


@dataclass
class Condition:
    tokens: Tensor  # [B, L+1, D]
    pooled: Tensor  # [B, D]
    timestep_emb: Tensor  # [B, D]

    @property
    def vector(self) -> Tensor:
        return self.pooled + self.timestep_emb


def build_condition(e_ve: Tensor, mask: Tensor, e_ext: Tensor, timestep_emb: Tensor) -> Condition:
    """Mask-scaled embedder tokens with the mean external token appended."""
    if e_ve.shape[-1] != e_ext.shape[-1]:
        raise ValueError(f"embedder width {e_ve.shape[-1]} != external encoder width {e_ext.shape[-1]}")
    if mask.shape != e_ve.shape[:2]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match tokens {tuple(e_ve.shape[:2])}")
    tokens = torch.cat([e_ve * mask.unsqueeze(-1), e_ext.mean(dim=1, keepdim=True)], dim=1)
    return Condition(tokens=tokens, pooled=tokens.mean(dim=1), timestep_emb=timestep_emb)


# ---------------------------------------------------------------------------
# block


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def inverse_softplus(y: Tensor) -> Tensor:
    return y + torch.log(-torch.expm1(-y))


class SelectiveSSM(nn.Module):
    """One selective scan head with its own input-dependent projections."""

    def __init__(self, width: int, state_size: int, rank: int, dt_min=1e-3, dt_max=1e-1):
        super().__init__()
        self.rank = rank
        self.state_size = state_size
        self.x_proj = nn.Linear(width, rank + 2 * state_size, bias=False)
        self.dt_proj = nn.Linear(rank, width)
        dt = torch.exp(torch.rand(width) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        with torch.no_grad():
            self.dt_proj.bias.copy_(inverse_softplus(dt))
        self.A_log = nn.Parameter(torch.log(torch.arange(1, state_size + 1, dtype=torch.float32)).repeat(width, 1))
        self.skip = nn.Parameter(torch.ones(width))

    def params(self, u: Tensor):
        R, N = self.rank, self.state_size
        w = self.x_proj.weight
        A = -torch.exp(self.A_log)
        return selective_params(
            u, A, w[R : R + N], w[R + N :], (w[:R], self.dt_proj.weight), self.dt_proj.bias
        )

    def forward(self, u: Tensor) -> Tensor:
        d = discretize_zoh(self.params(u))
        return recurrent_scan(d, u) + u * self.skip


class SpatialAttentionFuse(nn.Module):
    """Per-token convex gate between two branch outputs, computed by a 2D
    convolution over channel-pooled (mean, max) maps of both branches."""

    def __init__(self, grid: tuple[int, int], kernel_size: int = 7, zero_init: bool = False):
        super().__init__()
        self.grid = grid
        self.conv = nn.Conv2d(4, 1, kernel_size, padding=kernel_size // 2)
        if zero_init:
            nn.init.zeros_(self.conv.weight)
            nn.init.zeros_(self.conv.bias)

    def gate(self, a: Tensor, b: Tensor) -> Tensor:
        B, L, _ = a.shape
        stats = torch.stack([a.mean(-1), a.amax(-1), b.mean(-1), b.amax(-1)], dim=1)
        logits = self.conv(stats.reshape(B, 4, *self.grid)).reshape(B, L)
        return torch.sigmoid(logits)

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ValueError(f"branch shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        g = self.gate(a, b).unsqueeze(-1)
        return g * a + (1 - g) * b


def spatial_attention_fuse(fuse: SpatialAttentionFuse, a: Tensor, b: Tensor) -> Tensor:
    return fuse(a, b)


class MambaBlock(nn.Module):
    """adaLN-modulated, soft-masked dual spiral-scan block with a gated residual.

    Branch 0 scans the block's scheme in forward mode, branch 1 in reverse
    mode; both share the input/output projections and own separate selective
    scan heads.
    """

    def __init__(self, cfg: ModelConfig, index: int, long_skip: bool = False):
        super().__init__()
        D, E = cfg.dim, cfg.inner_dim
        self.index = index
        self.grid = cfg.grid
        self.schemes = spiral.scheme_for_block(index)
        self.orders = [spiral.build_spiral(*cfg.grid, s) for s in self.schemes]
        self.skip_proj = nn.Linear(2 * D, D) if long_skip else None
        self.norm = nn.LayerNorm(D, elementwise_affine=False, eps=1e-6)
        self.adaLN = nn.Sequential(nn.SiLU(), nn.Linear(D, 6 * D))
        nn.init.zeros_(self.adaLN[1].weight)
        nn.init.zeros_(self.adaLN[1].bias)
        self.in_proj = nn.Linear(D, E)
        self.out_proj = nn.Linear(E, D)
        self.ssm = nn.ModuleList([SelectiveSSM(E, cfg.state_size, cfg.rank) for _ in range(2)])
        self.fuse = SpatialAttentionFuse(cfg.grid, cfg.fuse_kernel)

    @property
    def scheme_id(self) -> int:
        return self.schemes[0].scheme_id

    def mixer(self, x: Tensor, branch: int, order: spiral.Permutation) -> Tensor:
        u = F.silu(self.in_proj(spiral.apply_permutation(x, order)))
        return spiral.invert_permutation(self.out_proj(self.ssm[branch](u)), order)

    def forward(self, x: Tensor, c: Tensor, mask: Tensor, skip: Tensor | None = None, orders=None) -> Tensor:
        if mask.shape != x.shape[:2]:
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match {x.shape[1]} tokens")
        if skip is not None:
            x = self.skip_proj(torch.cat([x, skip], dim=-1))
        orders = self.orders if orders is None else orders
        shift_a, scale_a, gate_a, shift_b, scale_b, gate_b = self.adaLN(c).chunk(6, dim=-1)
        h = self.norm(x)
        weight = (1 + mask).unsqueeze(-1)
        a = self.mixer(modulate(h, shift_a, scale_a) * weight, 0, orders[0])
        b = self.mixer(modulate(h, shift_b, scale_b) * weight, 1, orders[1])
        return x + self.fuse(gate_a.unsqueeze(1) * a, gate_b.unsqueeze(1) * b)


class FinalLayer(nn.Module):
    def __init__(self, dim: int, out_features: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.adaLN = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))
        self.linear = nn.Linear(dim, out_features)
        for m in (self.adaLN[1], self.linear):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

    def forward(self, x: Tensor, c: Tensor) -> Tensor:
        shift, scale = self.adaLN(c).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


class DiffMa(nn.Module):
    """Noise predictor ``eps(z_t, t, source condition)``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        C, H, W = cfg.latent_shape
        p, D = cfg.patch_size, cfg.dim
        self.x_embed = nn.Linear(p * p * C, D)
        self.register_buffer("pos_embed", torch.from_numpy(sincos_2d(D, cfg.grid)).float().unsqueeze(0))
        self.t_embed = TimestepEmbedder(D)
        self.cond_proj = nn.Linear(D, D)
        n_skip = cfg.layers // 2
        # U pairing: block j feeds block layers-1-j
        self.blocks = nn.ModuleList(
            [MambaBlock(cfg, i, long_skip=i >= cfg.layers - n_skip) for i in range(cfg.layers)]
        )
        self.final = FinalLayer(D, p * p * C)

    def condition(self, src: SourceCondition, t: Tensor) -> Condition:
        return build_condition(src.e_ve, src.mask, src.e_ext, self.t_embed(t))

    def forward(self, z_t: Tensor, t: Tensor, src: SourceCondition, trace: list | None = None) -> Tensor:
        C, H, W = self.cfg.latent_shape
        if tuple(z_t.shape[1:]) != (C, H, W):
            raise ValueError(f"expected latents [B, {C}, {H}, {W}], got {tuple(z_t.shape)}")
        t = torch.as_tensor(t).reshape(-1).expand(z_t.shape[0])
        L = self.cfg.num_tokens
        cond = self.condition(src, t)
        c = cond.vector
        x = self.x_embed(patchify(z_t, self.cfg.patch_size)) + self.pos_embed.to(z_t.dtype)
        x = x + self.cond_proj(cond.tokens[:, :L])
        n = len(self.blocks)
        saved = []
        for i, block in enumerate(self.blocks):
            partner = n - 1 - i
            skip = saved[partner] if block.skip_proj is not None else None
            x = block(x, c, src.mask, skip=skip)
            if not torch.isfinite(x).all():
                raise NonFiniteError(i)
            if trace is not None:
                trace.append((i, block.scheme_id))
            if i < n // 2:
                saved.append(x)
        out = self.final(x, c)
        return unpatchify(out, self.cfg.patch_size, C, H, W)


def model_forward(model: DiffMa, z_t: Tensor, t, src: SourceCondition) -> Tensor:
    return model(z_t, torch.as_tensor(t), src)


def mamba_block(block: MambaBlock, x: Tensor, cond: Condition, mask: Tensor, skip=None) -> Tensor:
    return block(x, cond.vector, mask, skip=skip)


# ---------------------------------------------------------------------------
# size accounting


def spiral_scan_flops(L: int, D: int, N: int) -> int:
    return 2 * (3 * L * (2 * D) * N + L * (2 * D) * N * N)


def count_params(cfg: ModelConfig) -> tuple[int, int]:
    """Trainable parameters of the constructed model and the analytic FLOPs of its
    block stack."""
    with torch.device("meta"):
        model = DiffMa(cfg)
    params = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return params, cfg.layers * spiral_scan_flops(cfg.num_tokens, cfg.dim, cfg.state_size)


def preset_size_report() -> list[dict]:
    """Our parameter and FLOP counts next to the published ones for every preset."""
    rows = []
    for (name, p), (ref_params, ref_flops) in REFERENCE_SIZES.items():
        cfg = ModelConfig.preset(name, patch_size=p)
        params, flops = count_params(cfg)
        rows.append(
            dict(
                preset=name, patch_size=p, layers=cfg.layers, params=params, ref_params=ref_params,
                params_rel_dev=params / ref_params - 1, flops=flops, ref_flops=ref_flops,
                flops_rel_dev=flops / ref_flops - 1,
            )
        )
    return rows
