"""Analytic FLOP counts and an empirical runtime-scaling benchmark comparing
the recurrent selective scan against dense self-attention."""
from __future__ import annotations

import json
import logging
import platform
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .ssm import DiscretizedSSM, recurrent_scan

log = logging.getLogger(__name__)

DEFAULT_GRID = (64, 128, 256, 512, 1024, 2048, 4096)
MIN_RESOLVABLE_S = 2e-5


def flops_estimate(L: int, D: int, N: int = 16) -> tuple[int, int]:
    """``(attention, spiral scan)`` FLOPs: ``4LD^2 + 2L^2D`` and ``2[3L(2D)N + L(2D)N^2]``."""
    for name, v in (("L", L), ("D", D), ("N", N)):
        if not isinstance(v, (int, np.integer)) or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    L, D, N = int(L), int(D), int(N)
    attention = 4 * L * D * D + 2 * L * L * D
    scan = 2 * (3 * L * (2 * D) * N + L * (2 * D) * N * N)
    return attention, scan


def dense_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Single-head softmax attention with the full ``L x L`` score matrix."""
    scores = q @ k.transpose(-1, -2) / q.shape[-1] ** 0.5
    return torch.softmax(scores, dim=-1) @ v


def _scan_case(L: int, D: int, N: int, g: torch.Generator):
    a = torch.rand(L, D, N, generator=g, dtype=torch.float64) * 0.5 + 0.49
    b = torch.randn(L, D, N, generator=g, dtype=torch.float64)
    c = torch.randn(L, D, N, generator=g, dtype=torch.float64)
    x = torch.randn(L, D, generator=g, dtype=torch.float64)
    d = DiscretizedSSM(a, b, c)
    return lambda: recurrent_scan(d, x)


def _attention_case(L: int, D: int, g: torch.Generator):
    q, k, v = (torch.randn(L, D, generator=g) for _ in range(3))
    return lambda: dense_attention(q, k, v)


def time_call(fn, repeats: int = 5, warmup: int = 1) -> float:
    """Median wall-clock seconds of ``fn()`` over ``repeats`` runs after ``warmup`` runs."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def loglog_slope(L, t) -> float:
    L, t = np.asarray(L, dtype=np.float64), np.asarray(t, dtype=np.float64)
    if len(L) < 2:
        return float("nan")
    return float(np.polyfit(np.log(L), np.log(t), 1)[0])


@dataclass
class ScalingReport:
    grid: list
    dim: int
    state_size: int
    repeats: int
    scan_seconds: dict = field(default_factory=dict)
    attention_seconds: dict = field(default_factory=dict)
    dropped: list = field(default_factory=list)
    scan_slope: float = float("nan")
    attention_slope_upper: float = float("nan")
    attention_slope_full: float = float("nan")
    dim_doubling_ratio: float | None = None
    environment: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _keep_resolvable(name: str, times: dict, report: ScalingReport) -> dict:
    kept = {}
    for L, t in times.items():
        if t < MIN_RESOLVABLE_S:
            msg = f"{name} at L={L} took {t:.2e}s, below timer resolution; dropped from the fit"
            warnings.warn(msg)
            report.dropped.append({"impl": name, "L": L, "seconds": t})
        else:
            kept[L] = t
    return kept


def scaling_benchmark(
    grid=DEFAULT_GRID,
    dim: int = 64,
    state_size: int = 16,
    repeats: int = 5,
    seed: int = 0,
    dim_check: tuple[int, int] | None = (1024, 512),
) -> ScalingReport:
    """Time the scan and dense attention over ``grid`` and fit log-log slopes.

    The attention slope is fitted on the upper half of the grid, where the
    quadratic score matrix dominates. ``dim_check = (L, D)`` additionally times
    the scan at ``D`` and ``2D`` for the linear-in-width check.
    """
    grid = sorted(int(L) for L in grid)
    if len(grid) < 2 or grid[-1] < 16 * grid[0]:
        raise ValueError(f"length grid must span at least 16x, got {grid}")
    if repeats < 5:
        raise ValueError(f"need at least 5 repeats for a median, got {repeats}")
    g = torch.Generator().manual_seed(seed)
    report = ScalingReport(grid=grid, dim=dim, state_size=state_size, repeats=repeats)
    report.environment = {
        "python": platform.python_version(),
        "torch": torch.__version__,
        "threads": torch.get_num_threads(),
        "machine": platform.machine(),
    }
    scan, attn = {}, {}
    for L in grid:
        scan[L] = time_call(_scan_case(L, dim, state_size, g), repeats)
        attn[L] = time_call(_attention_case(L, dim, g), repeats)
        log.info("L=%d scan %.4fs attention %.4fs", L, scan[L], attn[L])
    report.scan_seconds = {str(k): v for k, v in scan.items()}
    report.attention_seconds = {str(k): v for k, v in attn.items()}

    scan = _keep_resolvable("scan", scan, report)
    attn = _keep_resolvable("attention", attn, report)
    report.scan_slope = loglog_slope(list(scan), list(scan.values()))
    upper = [L for L in attn if L >= grid[len(grid) // 2]]
    report.attention_slope_upper = loglog_slope(upper, [attn[L] for L in upper])
    report.attention_slope_full = loglog_slope(list(attn), list(attn.values()))

    if dim_check is not None:
        L, D = dim_check
        small = time_call(_scan_case(L, D, state_size, g), repeats)
        big = time_call(_scan_case(L, 2 * D, state_size, g), repeats)
        report.dim_doubling_ratio = big / small
    return report
