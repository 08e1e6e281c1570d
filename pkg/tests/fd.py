"""Central finite differences used as the independent gradient oracle."""
import numpy as np
import torch

STEP = 1e-5
RTOL = 1e-4


def central_fd(f, x: torch.Tensor, step: float = STEP) -> np.ndarray:
    """d f / d x for a scalar function ``f`` of a float64 tensor, one entry at a time."""
    grad = np.zeros(x.shape)
    flat = x.detach().reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = float(f())
            flat[i] = orig - step
            down = float(f())
            flat[i] = orig
            grad.reshape(-1)[i] = (up - down) / (2 * step)
    return grad


def autograd_grads(f, tensors):
    for t in tensors:
        t.grad = None
    f().backward()
    return [t.grad.detach().numpy().copy() for t in tensors]


def relative_error(analytic, numeric: np.ndarray) -> float:
    if isinstance(analytic, torch.Tensor):
        analytic = analytic.detach().numpy()
    scale = max(np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)
