"""End-to-end workflow pieces shared by the command line and the tests:
latents, embedder pretraining, condition tensors, diffusion training, sampling
and evaluation."""
from __future__ import annotations

import hashlib
import io
import logging
from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import EMA, NoiseSchedule, PoolingCodec, diffusion_loss, make_schedule, ode_sample
from .embedder import VisionEmbedder, freeze, pretrain_embedder
from .errors import FingerprintError
from .metrics import MetricReport, compute_metrics
from .model import DiffMa, HashedFeatureEncoder, ModelConfig, SourceCondition

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def build_model(cfg: ModelConfig, seed: int = 0) -> DiffMa:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DiffMa(cfg)


def build_embedder(cfg: ModelConfig, seed: int = 0) -> VisionEmbedder:
    C, H, W = cfg.latent_shape
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 1)
        return VisionEmbedder(C, cfg.patch_size, cfg.dim, (H, W))


def make_codec(cfg: ModelConfig, image_channels: int = 1) -> PoolingCodec:
    return PoolingCodec(factor=8, latent_channels=cfg.latent_shape[0], image_channels=image_channels)


def encode_images(codec: PoolingCodec, images: np.ndarray) -> torch.Tensor:
    return codec.encode(torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)))


@dataclass
class Conditioner:
    """Frozen source-side encoders."""

    embedder: VisionEmbedder
    external: HashedFeatureEncoder

    @torch.no_grad()
    def __call__(self, z_src: torch.Tensor, src_images: torch.Tensor) -> SourceCondition:
        out = self.embedder(z_src)
        return SourceCondition(e_ve=out.tokens, mask=out.mask, e_ext=self.external(src_images))


def make_conditioner(embedder: VisionEmbedder, cfg: ModelConfig, image_channels: int = 1) -> Conditioner:
    return Conditioner(freeze(embedder), HashedFeatureEncoder(cfg.dim, cfg.external_tokens, in_channels=image_channels))


def run_pretraining(embedder: VisionEmbedder, z_src: torch.Tensor, steps: int, batch_size: int, lr: float, seed: int):
    return pretrain_embedder(embedder, z_src, steps=steps, batch_size=batch_size, lr=lr, seed=seed)


@dataclass
class TrainResult:
    losses: list
    ema: EMA


def train_diffusion(
    model: DiffMa,
    schedule: NoiseSchedule,
    z0: torch.Tensor,
    cond: SourceCondition,
    steps: int,
    batch_size: int = 8,
    lr: float = 1e-4,
    weight_decay: float = 0.0,
    ema_decay: float = 0.9999,
    ema_warmup: bool = False,
    seed: int = 0,
    log_every: int = 0,
) -> TrainResult:
    """AdamW on the epsilon loss, EMA updated after every optimizer step."""
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    ema = EMA(model, decay=ema_decay, warmup=ema_warmup)
    model.train()
    n = z0.shape[0]
    losses = []
    for step in range(steps):
        idx = torch.randint(0, n, (batch_size,), generator=g)
        loss = diffusion_loss(model, schedule, z0[idx], cond.index(idx), g)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        ema.update(model)
        losses.append(loss.item())
        if log_every and (step % log_every == 0 or step == steps - 1):
            log.info("step %d loss %.5f", step, losses[-1])
    model.eval()
    return TrainResult(losses, ema)


@torch.no_grad()
def sample_latents(model, schedule, cond: SourceCondition, steps: int, seed: int, batch_size: int = 16,
                   clip_x0: float | None = 1.0) -> torch.Tensor:
    """Sample one latent per condition row; batch ``k`` uses seed ``seed + k``."""
    model.eval()
    n = cond.mask.shape[0]
    shape = tuple(model.cfg.latent_shape)
    out = []
    for k, start in enumerate(range(0, n, batch_size)):
        part = cond.index(slice(start, start + batch_size))
        b = part.mask.shape[0]
        out.append(ode_sample(model, schedule, part, (b, *shape), steps=steps, seed=seed + k, clip_x0=clip_x0))
    return torch.cat(out) if out else torch.zeros((0, *shape))


def decode_images(codec: PoolingCodec, latents: torch.Tensor) -> np.ndarray:
    return codec.decode(latents).clamp(0, 1).numpy()


def codec_matched(codec: PoolingCodec, images: np.ndarray) -> np.ndarray:
    """Images as the codec can represent them: ``decode(encode(x))``."""
    return decode_images(codec, encode_images(codec, images))


def evaluate(generated: np.ndarray, reference: np.ndarray) -> MetricReport:
    return compute_metrics(generated, reference)


# ---------------------------------------------------------------------------
# checkpoints


def state_digest(state_dict: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(state_dict):
        h.update(k.encode())
        h.update(state_dict[k].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save_model_checkpoint(path, model: DiffMa, ema: EMA, embedder: VisionEmbedder, schedule: NoiseSchedule,
                          step: int) -> str:
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "embedder_fingerprint": embedder.fingerprint(),
        "schedule_fingerprint": schedule.fingerprint(),
        "step": step,
        "state_dict": model.state_dict(),
        "ema": ema.state_dict(),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as f:
        f.write(buf.getvalue())
    return hashlib.sha256(buf.getvalue()).hexdigest()[:16]


def load_model_checkpoint(path, embedder: VisionEmbedder | None = None, schedule: NoiseSchedule | None = None):
    """Returns ``(model, ema_model, payload)``; fails loudly on any fingerprint mismatch."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise FingerprintError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if embedder is not None and payload["embedder_fingerprint"] != embedder.fingerprint():
        raise FingerprintError(
            f"{path}: trained with embedder {payload['embedder_fingerprint']}, got {embedder.fingerprint()}"
        )
    if schedule is not None and payload["schedule_fingerprint"] != schedule.fingerprint():
        raise FingerprintError(
            f"{path}: trained with schedule {payload['schedule_fingerprint']}, got {schedule.fingerprint()}"
        )
    cfg = ModelConfig.from_dict(payload["model_config"])
    model = DiffMa(cfg)
    model.load_state_dict(payload["state_dict"])
    ema_model = DiffMa(cfg)
    ema_model.load_state_dict(payload["ema"]["weights"])
    for m in (model, ema_model):
        m.eval()
    return model, ema_model, payload


def schedule_from(cfg) -> NoiseSchedule:
    return make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
