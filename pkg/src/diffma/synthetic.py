"""Procedural paired source/target images with shared anatomy.

Every pair is drawn from a label map of smooth blobs (body outline, fat
rim, muscle, two organ classes, bone). The source image renders tissue
densities plus concentric ring artifacts. The target renders the same
geometry through a fixed non-monotone contrast transfer, plus a faint
smooth texture. Background is dark in both.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.ndimage import gaussian_filter

from .rawio import read_tensor, write_tensor

SCHEMA_VERSION = 1

# label -> source density
DENSITY = {0: 0.0, 1: 0.30, 2: 0.50, 3: 0.62, 4: 0.74, 5: 0.95}
# target contrast transfer, sampled at the densities above
TRANSFER_X = (0.0, 0.30, 0.50, 0.62, 0.74, 0.95, 1.0)
TRANSFER_Y = (0.0, 0.85, 0.35, 0.70, 0.50, 0.10, 0.08)

EDGE_SIGMA = 1.5
RING_AMPLITUDE = 0.08
RING_PERIOD = 9.0
TEXTURE_AMPLITUDE = 0.01
TEXTURE_SIGMA = 2.0


def contrast_transfer(density: np.ndarray) -> np.ndarray:
    return PchipInterpolator(TRANSFER_X, TRANSFER_Y)(np.clip(density, 0, 1))


def _blob(yy, xx, cy, cx, ry, rx, angle, rng) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u, v = c * dx + s * dy, -s * dx + c * dy
    theta = np.arctan2(v / ry, u / rx)
    wobble = 1.0
    for k in (2, 3, 4):
        wobble = wobble + rng.uniform(0, 0.06) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    return (u / rx) ** 2 + (v / ry) ** 2 <= wobble**2


def label_map(rng: np.random.Generator, res: int) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) / res
    labels = np.zeros((res, res), dtype=np.uint8)
    cy, cx = 0.5 + rng.uniform(-0.04, 0.04, size=2)
    ry, rx = rng.uniform(0.30, 0.42), rng.uniform(0.36, 0.46)
    ang = rng.uniform(-0.3, 0.3)
    body = _blob(yy, xx, cy, cx, ry, rx, ang, rng)
    labels[body] = 1
    inner = _blob(yy, xx, cy, cx, ry * 0.84, rx * 0.86, ang, rng) & body
    labels[inner] = 2
    for organ in range(rng.integers(2, 5)):
        oy = cy + rng.uniform(-0.5, 0.5) * ry
        ox = cx + rng.uniform(-0.5, 0.5) * rx
        blob = _blob(yy, xx, oy, ox, rng.uniform(0.07, 0.14), rng.uniform(0.07, 0.14), rng.uniform(0, np.pi), rng)
        labels[blob & inner] = 3 + organ % 2
    for _ in range(rng.integers(1, 3)):
        oy = cy + rng.uniform(-0.55, 0.55) * ry
        ox = cx + rng.uniform(-0.55, 0.55) * rx
        blob = _blob(yy, xx, oy, ox, rng.uniform(0.04, 0.07), rng.uniform(0.04, 0.07), rng.uniform(0, np.pi), rng)
        labels[blob & inner] = 5
    return labels


def render_pair(labels: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    res = labels.shape[0]
    density = gaussian_filter(np.vectorize(DENSITY.get)(labels).astype(np.float64), EDGE_SIGMA)
    body = gaussian_filter((labels > 0).astype(np.float64), EDGE_SIGMA)

    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    r = np.hypot(yy - res / 2, xx - res / 2)
    rings = RING_AMPLITUDE * np.sin(2 * np.pi * r / RING_PERIOD + rng.uniform(0, 2 * np.pi))
    source = density + rings * body

    texture = gaussian_filter(rng.standard_normal((res, res)), TEXTURE_SIGMA)
    texture *= TEXTURE_AMPLITUDE / (texture.std() + 1e-12)
    target = contrast_transfer(density) + texture * body
    return (
        np.clip(source, 0, 1).astype(np.float32)[None],
        np.clip(target, 0, 1).astype(np.float32)[None],
    )


def make_pair(seed_seq: np.random.SeedSequence, res: int) -> tuple[np.ndarray, np.ndarray]:
    geo_seq, tex_seq = seed_seq.spawn(2)
    return render_pair(label_map(np.random.default_rng(geo_seq), res), np.random.default_rng(tex_seq))


def synthesize(n: int, seed: int, resolution: int = 128, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """``n`` pairs as two float32 arrays ``[n, 1, res, res]``."""
    if resolution % 8:
        raise ValueError(f"resolution must be divisible by 8, got {resolution}")
    seqs = np.random.SeedSequence(seed).spawn(n)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        pairs = list(pool.map(lambda s: make_pair(s, resolution), seqs))
    empty = np.zeros((0, 1, resolution, resolution), np.float32)
    src = np.stack([p[0] for p in pairs]) if pairs else empty
    tgt = np.stack([p[1] for p in pairs]) if pairs else empty.copy()
    return src, tgt


def generate_synthetic_pairs(n: int, seed: int, resolution: int, out_dir, workers: int = 1) -> dict:
    """Write ``n`` pairs and a manifest to ``out_dir``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    src, tgt = synthesize(n, seed, resolution, workers)
    files = []
    for i in range(n):
        names = {"source": f"pair_{i:05d}_source.bin", "target": f"pair_{i:05d}_target.bin"}
        write_tensor(out / names["source"], src[i])
        write_tensor(out / names["target"], tgt[i])
        files.append(names)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "count": n,
        "resolution": resolution,
        "channels": 1,
        "pixel_range": [0.0, 1.0],
        "contrast": {
            "density": {str(k): v for k, v in DENSITY.items()},
            "transfer_x": list(TRANSFER_X),
            "transfer_y": list(TRANSFER_Y),
            "edge_sigma": EDGE_SIGMA,
            "ring_amplitude": RING_AMPLITUDE,
            "ring_period": RING_PERIOD,
            "texture_amplitude": TEXTURE_AMPLITUDE,
            "texture_sigma": TEXTURE_SIGMA,
        },
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


@dataclass
class PairedDataset:
    """Read-only view of a generated dataset. Items are returned exactly as
    stored: there are no augmentations anywhere in the pipeline."""

    root: Path
    manifest: dict
    augmentations: tuple = ()

    @classmethod
    def open(cls, root) -> "PairedDataset":
        root = Path(root)
        manifest = json.loads((root / "manifest.json").read_text())
        if manifest.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"{root}: unsupported schema version {manifest.get('schema_version')}")
        return cls(root, manifest)

    def __len__(self) -> int:
        return self.manifest["count"]

    def __getitem__(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        names = self.manifest["files"][i]
        return read_tensor(self.root / names["source"]), read_tensor(self.root / names["target"])

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        res = self.manifest["resolution"]
        items = [self[i] for i in range(len(self))]
        if not items:
            empty = np.zeros((0, 1, res, res), np.float32)
            return empty, empty.copy()
        return np.stack([s for s, _ in items]), np.stack([t for _, t in items])


class MedicalVolumeLoader:
    """Placeholder for DICOM/NIfTI pair ingestion, which is out of scope. Any
    replacement must yield ``(source, target)`` float arrays in ``[0, 1]`` shaped
    ``[C, H, W]`` like :class:`PairedDataset`."""

    def __init__(self, root):
        raise NotImplementedError("medical volume ingestion is not implemented; use PairedDataset")
