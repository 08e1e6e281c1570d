"""Analytic FLOPs and measured runtime of the scan against dense attention."""
from diffma.bench import flops_estimate, scaling_benchmark

for L in (196, 784, 3136):
    att, scan = flops_estimate(L, 512, 16)
    print(f"L={L:5d}: attention {att / 1e9:7.2f} GFLOPs, spiral scan {scan / 1e9:6.2f} GFLOPs")

rep = scaling_benchmark(grid=(64, 128, 256, 512, 1024), dim=32, repeats=5, dim_check=None)
print(f"fitted log-log slopes: scan {rep.scan_slope:.2f}, attention (upper half) {rep.attention_slope_upper:.2f}")
