"""Vision embedder: patch tokens plus a per-token soft mask for the source
latent, pretrained with a cross-sequence InfoNCE objective and frozen
afterwards."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import FingerprintError

log = logging.getLogger(__name__)

TAU_INIT = 0.07
TAU_MIN, TAU_MAX = 1e-3, 10.0


@dataclass
class EmbedderOutput:
    tokens: Tensor  # [B, L, D], no positional information
    mask: Tensor  # [B, L], strictly inside (0, 1)


class VisionEmbedder(nn.Module):
    """Single strided convolution patchifier, layer norm, and a squeeze-excite
    style head that turns every token into one mask weight."""

    def __init__(
        self,
        in_channels: int = 4,
        patch_size: int = 2,
        dim: int = 512,
        latent_hw: tuple[int, int] = (28, 28),
        reduction: int = 4,
        tau_init: float = TAU_INIT,
    ):
        super().__init__()
        H, W = latent_hw
        if H % patch_size or W % patch_size:
            raise ValueError(f"latent {H}x{W} is not divisible by patch size {patch_size}")
        self.in_channels = in_channels
        self.patch_size = patch_size
        self.dim = dim
        self.latent_hw = (H, W)
        self.grid = (H // patch_size, W // patch_size)
        self.proj = nn.Conv2d(in_channels, dim, kernel_size=patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(dim)
        hidden = max(dim // reduction, 1)
        self.mask_head = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))
        self.log_tau = nn.Parameter(torch.tensor(math.log(tau_init)))

    @property
    def num_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def tau(self) -> Tensor:
        return self.log_tau.exp().clamp(TAU_MIN, TAU_MAX)

    def forward(self, z: Tensor) -> EmbedderOutput:
        if z.dim() != 4 or tuple(z.shape[1:]) != (self.in_channels, *self.latent_hw):
            H, W = z.shape[-2:]
            if H % self.patch_size or W % self.patch_size:
                raise ValueError(
                    f"latent {H}x{W} is not divisible by patch size {self.patch_size}"
                )
            raise ValueError(
                f"expected latents [B, {self.in_channels}, {self.latent_hw[0]}, "
                f"{self.latent_hw[1]}], got {tuple(z.shape)}"
            )
        tokens = self.norm(self.proj(z).flatten(2).transpose(1, 2))
        mask = torch.sigmoid(self.mask_head(tokens).squeeze(-1))
        return EmbedderOutput(tokens=tokens, mask=mask)

    def fingerprint(self) -> dict:
        return {
            "kind": "vision-embedder",
            "in_channels": self.in_channels,
            "patch_size": self.patch_size,
            "dim": self.dim,
            "latent_hw": list(self.latent_hw),
            "num_tokens": self.num_tokens,
            "tau": self.tau.item(),
        }

    def masked_tokens(self, out: EmbedderOutput) -> Tensor:
        return out.tokens * out.mask.unsqueeze(-1)


def embed_latent(embedder: VisionEmbedder, z_ct: Tensor) -> EmbedderOutput:
    return embedder(z_ct)


def similarity_matrix(tokens: Tensor, tau) -> Tensor:
    """Cosine similarity between flattened samples, divided by ``tau``."""
    if tokens.dim() < 2 or tokens.shape[0] < 1:
        raise ValueError(f"need a batch of token blocks, got shape {tuple(tokens.shape)}")
    t = float(tau.detach()) if isinstance(tau, Tensor) else float(tau)
    if t <= 0:
        raise ValueError(f"temperature must be positive, got {t}")
    flat = tokens.reshape(tokens.shape[0], -1)
    norms = flat.norm(dim=1, keepdim=True)
    if (norms == 0).any():
        bad = torch.nonzero(norms.squeeze(1) == 0).flatten().tolist()
        raise ValueError(f"zero-norm samples {bad}: cosine similarity undefined")
    unit = flat / norms
    return unit @ unit.T / tau


def infonce_loss(S: Tensor) -> Tensor:
    """Mean cross-entropy of picking each row's own sample out of the batch."""
    if S.dim() != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {tuple(S.shape)}")
    return -torch.diagonal(F.log_softmax(S, dim=1)).mean()


def contrastive_loss(embedder: VisionEmbedder, z: Tensor) -> Tensor:
    out = embedder(z)
    return infonce_loss(similarity_matrix(embedder.masked_tokens(out), embedder.tau))


def pretrain_embedder(
    embedder: VisionEmbedder,
    latents: Tensor,
    steps: int,
    batch_size: int = 16,
    lr: float = 1e-4,
    seed: int = 0,
    log_every: int = 0,
) -> list[float]:
    """Train ``embedder`` in place on source latents ``[n, C, H, W]``; returns the
    loss trajectory. The embedder is frozen (``requires_grad=False``, eval
    mode) on return."""
    if batch_size < 2:
        warnings.warn("InfoNCE with batch size < 2 is identically zero; nothing is learned")
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(embedder.parameters(), lr=lr, weight_decay=0.0)
    embedder.train()
    losses = []
    n = latents.shape[0]
    for step in range(steps):
        idx = torch.randperm(n, generator=g)[: min(batch_size, n)]
        loss = contrastive_loss(embedder, latents[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("embedder step %d loss %.4f tau %.4f", step, losses[-1], float(embedder.tau))
    freeze(embedder)
    return losses


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def save_embedder(embedder: VisionEmbedder, path) -> None:
    torch.save({"fingerprint": embedder.fingerprint(), "state_dict": embedder.state_dict()}, path)


def load_embedder(path, expect_patch_size: int | None = None, expect_grid=None, expect_dim=None):
    """Load a frozen embedder; refuse it if it was built for a different patch grid."""
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=True)
    fp = ckpt["fingerprint"]
    if fp.get("kind") != "vision-embedder":
        raise FingerprintError(f"{path} is not a vision-embedder checkpoint")
    H, W = fp["latent_hw"]
    p = fp["patch_size"]
    checks = {
        "patch_size": (expect_patch_size, p),
        "grid": (None if expect_grid is None else tuple(expect_grid), (H // p, W // p)),
        "dim": (expect_dim, fp["dim"]),
    }
    for name, (want, got) in checks.items():
        if want is not None and want != got:
            raise FingerprintError(f"embedder {name} is {got}, model expects {want}")
    emb = VisionEmbedder(fp["in_channels"], p, fp["dim"], (H, W))
    emb.load_state_dict(ckpt["state_dict"])
    return freeze(emb)
