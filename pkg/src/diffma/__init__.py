"""Latent diffusion with a bidirectional state-space backbone and spiral
patch serialization, sized to run and be tested on a single machine."""

from .diffusion import EMA, NoiseSchedule, PoolingCodec, forward_noising, make_schedule, ode_sample
from .embedder import VisionEmbedder, infonce_loss, pretrain_embedder
from .errors import ConfigError, DependencyError, DiffMaError, FingerprintError, NonFiniteError
from .metrics import MetricReport, compute_metrics
from .model import DiffMa, ModelConfig, count_params, mamba_block, model_forward
from .spiral import ScanScheme, apply_permutation, build_spiral, invert_permutation, scheme_for_block
from .ssm import build_kernel, discretize_zoh, kernel_scan, recurrent_scan, selective_params

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DependencyError", "DiffMa", "DiffMaError", "EMA", "FingerprintError",
    "MetricReport", "ModelConfig", "NoiseSchedule", "NonFiniteError", "PoolingCodec", "ScanScheme",
    "VisionEmbedder", "apply_permutation", "build_kernel", "build_spiral", "compute_metrics",
    "count_params", "discretize_zoh", "forward_noising", "infonce_loss", "invert_permutation",
    "kernel_scan", "make_schedule", "mamba_block", "model_forward", "ode_sample", "pretrain_embedder",
    "recurrent_scan", "scheme_for_block", "selective_params",
]
