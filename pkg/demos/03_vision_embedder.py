"""Vision embedder: tokens and soft masks for source latents, contrastive
pretraining, and the frozen checkpoint."""
import tempfile
from pathlib import Path

import torch

from diffma.diffusion import PoolingCodec
from diffma.embedder import VisionEmbedder, contrastive_loss, load_embedder, pretrain_embedder, save_embedder
from diffma.synthetic import synthesize

src, _ = synthesize(64, seed=0, resolution=64)
z = PoolingCodec(image_channels=1).encode(torch.from_numpy(src))  # [64, 4, 8, 8]

torch.manual_seed(0)
emb = VisionEmbedder(in_channels=4, patch_size=2, dim=64, latent_hw=(8, 8))
out = emb(z[:2])
print(f"tokens {tuple(out.tokens.shape)}, mask {tuple(out.mask.shape)} in ({out.mask.min():.3f}, {out.mask.max():.3f})")
with torch.no_grad():
    print(f"InfoNCE before pretraining {contrastive_loss(emb, z[:16]).item():.4f}")

losses = pretrain_embedder(emb, z, steps=100, batch_size=16, lr=1e-3, seed=0)
print(f"InfoNCE after 100 steps {sum(losses[-10:]) / 10:.4f}; tau = {emb.tau.item():.4f}")

with tempfile.TemporaryDirectory() as d:
    save_embedder(emb, Path(d) / "embedder.pt")
    back = load_embedder(Path(d) / "embedder.pt", expect_patch_size=2, expect_grid=(4, 4), expect_dim=64)
    print("reloaded fingerprint:", back.fingerprint())
