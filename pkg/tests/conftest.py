import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


def finite_diff_grad(fn, x: torch.Tensor, step: float = 1e-5) -> torch.Tensor:
    """Central finite differences of a scalar function w.r.t. a tensor."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = fn(x).item()
        flat[i] = orig - step
        lo = fn(x).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def rel_grad_error(g_ad: torch.Tensor, g_fd: torch.Tensor) -> float:
    num = (g_ad - g_fd).norm().item()
    den = max(g_ad.norm().item(), g_fd.norm().item(), 1e-12)
    return num / den
