"""SSIM / PSNR / MSE on images in ``[0, 1]``.

SSIM is the single-scale formulation with an 11x11 Gaussian window
(sigma 1.5), constants ``K1 = 0.01``, ``K2 = 0.03``, population statistics,
averaged over the fully covered ("valid") window positions. Reported as a
percentage. MSE is on the 0-255 scale; PSNR uses a peak of 1.0 and is capped
at 100 dB for identical images.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP_DB = 100.0
RANGE_TOL = 1e-6


@dataclass
class MetricReport:
    ssim_pct: float
    psnr_db: float
    mse_255: float
    count: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    return convolve2d(img, win, mode="valid")


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM of two single-channel images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"need two equal 2D images, got {a.shape} and {b.shape}")
    if min(a.shape) < win_size:
        raise ValueError(f"images of {a.shape} are smaller than the {win_size}x{win_size} window")
    win = gaussian_window(win_size, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = _filter(a, win), _filter(b, win)
    var_a = _filter(a * a, win) - mu_a**2
    var_b = _filter(b * b, win) - mu_b**2
    cov = _filter(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10 * np.log10(data_range**2 / mse))


def mse_255(a: np.ndarray, b: np.ndarray) -> float:
    d = (np.asarray(a, np.float64) - np.asarray(b, np.float64)) * 255.0
    return float(np.mean(d * d))


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    elif x.ndim != 4:
        raise ValueError(f"images must be [H, W], [N, H, W] or [N, C, H, W], got {x.shape}")
    return x


def compute_metrics(generated, reference) -> MetricReport:
    """Average SSIM (per image and channel), PSNR (per image) and MSE over a batch."""
    gen, ref = _as_batch(generated), _as_batch(reference)
    if gen.shape != ref.shape:
        raise ValueError(f"shape mismatch: {gen.shape} vs {ref.shape}")
    for name, x in (("generated", gen), ("reference", ref)):
        if x.size and (x.min() < -RANGE_TOL or x.max() > 1 + RANGE_TOL or not np.isfinite(x).all()):
            raise ValueError(f"{name} pixels must lie in [0, 1]")
    n = gen.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    ssims = [ssim(g_c, r_c) for g, r in zip(gen, ref) for g_c, r_c in zip(g, r)]
    psnrs = [psnr(g, r) for g, r in zip(gen, ref)]
    return MetricReport(
        ssim_pct=100.0 * float(np.mean(ssims)),
        psnr_db=float(np.mean(psnrs)),
        mse_255=mse_255(gen, ref),
        count=n,
    )
