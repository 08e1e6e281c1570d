"""The denoiser: identity at initialization, block scheme rotation, and the
S to XXL size presets against their published parameter counts."""
import torch

from diffma.model import DiffMa, ModelConfig, SourceCondition, model_forward, preset_size_report

cfg = ModelConfig.tiny()
model = DiffMa(cfg)
B, L, D = 2, cfg.num_tokens, cfg.dim
src = SourceCondition(torch.randn(B, L, D), torch.rand(B, L), torch.randn(B, cfg.external_tokens, D))
z = torch.randn(B, *cfg.latent_shape)
eps = model_forward(model, z, torch.tensor([10, 900]), src)
print(f"untrained output {tuple(eps.shape)}, all zero: {bool((eps == 0).all())}")

trace = []
model(z, torch.tensor([10, 900]), src, trace=trace)
print("block trace:", trace)

print("\npreset  patch   params (ours)   params (published)  deviation")
for r in preset_size_report():
    print(f"{r['preset']:>6} {r['patch_size']:>6} {r['params']:>15,} {int(r['ref_params']):>20,} {100 * r['params_rel_dev']:+9.1f}%")
