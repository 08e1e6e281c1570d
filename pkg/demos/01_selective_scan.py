"""Selective state-space scan: discretize, run the recurrence, and check it
against the convolution kernel when the system is time-invariant."""
import torch

from diffma.ssm import DiscretizedSSM, build_kernel, discretize_zoh, kernel_scan, recurrent_scan, s4d_real_A, selective_params

torch.manual_seed(0)
L, D, N = 32, 4, 8

# A time-invariant system: the same A_bar, B_bar, C_bar at every position.
a = torch.rand(D, N, dtype=torch.float64) * 0.9
b, c = torch.randn(D, N, dtype=torch.float64), torch.randn(D, N, dtype=torch.float64)
lti = DiscretizedSSM(*(v.expand(L, D, N) for v in (a, b, c)))
x = torch.randn(L, D, dtype=torch.float64)
y_rec = recurrent_scan(lti, x)
y_conv = kernel_scan(build_kernel(lti), x)
print(f"time-invariant: recurrent vs kernel max difference {(y_rec - y_conv).abs().max():.2e}")

# The selective variant: B, C and the step size depend on each token.
A = s4d_real_A(D, N, torch.float64)
w_B, w_C = torch.randn(N, D, dtype=torch.float64), torch.randn(N, D, dtype=torch.float64)
w_delta = torch.randn(D, D, dtype=torch.float64) * 0.1
p = selective_params(x, A, w_B, w_C, w_delta, torch.zeros(D, dtype=torch.float64))
print(f"per-token step sizes range {p.delta.min():.3f} .. {p.delta.max():.3f}")
y, h = recurrent_scan(discretize_zoh(p), x, return_state=True)
print(f"selective output {tuple(y.shape)}, final state {tuple(h.shape)}")
