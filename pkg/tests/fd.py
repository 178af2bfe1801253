"""Central finite differences, independent of autograd."""
import numpy as np
import torch


def numeric_grad(fn, x: torch.Tensor, eps: float = 1e-6, coords=None) -> np.ndarray:
    """d fn / d x at the given flat coordinates (all by default); ``fn`` returns a scalar tensor."""
    flat = x.data.view(-1)
    coords = range(flat.numel()) if coords is None else coords
    out = []
    with torch.no_grad():
        for i in coords:
            orig = flat[i].item()
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            out.append((up - down) / (2 * eps))
    return np.array(out)


def analytic_grad(fn, x: torch.Tensor, coords=None) -> np.ndarray:
    if x.grad is not None:
        x.grad = None
    fn().backward()
    g = x.grad.detach().view(-1).numpy()
    return g if coords is None else g[list(coords)]


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def grad_rel_error(fn, x: torch.Tensor, coords=None, eps: float = 1e-6) -> float:
    return rel_error(analytic_grad(fn, x, coords), numeric_grad(fn, x, eps, coords))
