"""Noise schedule, forward noising, the epsilon loss, EMA, and deterministic
DDIM sampling with an oracle denoiser."""
import torch

from diffma.diffusion import EMA, forward_noising, make_schedule, ode_sample, timestep_ladder

sched = make_schedule()
for t in (0, 1, 250, 500, 999):
    print(f"alpha_bar({t}) = {sched.alpha_bar_at(t).item():.6f}")
print("ladder for 10 steps:", timestep_ladder(sched.T, 10))

z0 = torch.rand(1, 4, 8, 8) * 2 - 1
eps = torch.randn(4096, 4, 8, 8)
zt = forward_noising(sched, z0.expand(4096, -1, -1, -1), torch.full((4096,), 500), eps)
print(f"z_500 sample variance {zt.var(0).mean():.4f} vs 1 - alpha_bar {1 - sched.alpha_bar_at(500).item():.4f}")


class Oracle(torch.nn.Module):
    """Knows z0, so it returns the exact noise; DDIM then recovers z0."""

    def forward(self, z, t, cond):
        ab = sched.alpha_bar_at(t).view(-1, 1, 1, 1).to(z.dtype)
        return (z - ab.sqrt() * z0) / (1 - ab).sqrt()


out = ode_sample(Oracle(), sched, None, (1, 4, 8, 8), steps=20, seed=0)
print(f"oracle sampling error {(out - z0).abs().max():.2e}")

net = torch.nn.Linear(3, 3)
ema = EMA(net, decay=0.9, warmup=False)
with torch.no_grad():
    net.weight.add_(1.0)
ema.update(net)
print("EMA moved 10% of the way:", torch.allclose(ema.model.weight, net.weight - 0.9))
