"""Central finite-difference checks of autograd gradients.

Errors are reported relative to the largest gradient magnitude in the
comparison, ``max|analytic - numeric| / max(max|numeric|, floor)``, which
stays meaningful when individual entries are near zero.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch


def relative_error(analytic, numeric, floor: float = 1e-12) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), floor))


def analytic_grads(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    for t in tensors:
        t.grad = None
    fn().backward()
    return [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]


@torch.no_grad()
def numeric_grads(fn, tensors, eps: float = 1e-6, coords: int | None = None, seed: int = 0):
    """Per-coordinate central differences; ``coords`` samples that many entries per tensor."""
    out = []
    rng = np.random.default_rng(seed)
    for t in tensors:
        flat = t.data.view(-1)
        idx = np.arange(flat.numel()) if coords is None or coords >= flat.numel() else np.sort(
            rng.choice(flat.numel(), coords, replace=False))
        g = np.zeros(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = float(fn())
            flat[i] = orig - eps
            fm = float(fn())
            flat[i] = orig
            g[k] = (fp - fm) / (2 * eps)
        out.append((idx, g))
    return out


def check_coordinates(fn, tensors, eps: float = 1e-6, coords: int | None = None, seed: int = 0) -> float:
    """Max relative error over (sampled) coordinates of every tensor jointly."""
    ana = analytic_grads(fn, tensors)
    num = numeric_grads(fn, tensors, eps, coords, seed)
    a = np.concatenate([ga.view(-1).numpy()[idx] for ga, (idx, _) in zip(ana, num)])
    n = np.concatenate([g for _, g in num])
    return relative_error(a, n)


@torch.no_grad()
def _directional(fn, tensors, dirs, eps):
    for t, d in zip(tensors, dirs):
        t.data.add_(eps * d)
    fp = float(fn())
    for t, d in zip(tensors, dirs):
        t.data.sub_(2 * eps * d)
    fm = float(fn())
    for t, d in zip(tensors, dirs):
        t.data.add_(eps * d)
    return (fp - fm) / (2 * eps)


def check_directions(fn, tensors, n_dirs: int = 8, eps: float = 1e-6, seed: int = 0) -> float:
    """Compare ``<grad, v>`` with a central difference along random directions ``v``
    spanning all ``tensors`` at once."""
    ana = analytic_grads(fn, tensors)
    gen = torch.Generator().manual_seed(seed)
    a, n = [], []
    for _ in range(n_dirs):
        dirs = [torch.randn(t.shape, generator=gen, dtype=t.dtype) for t in tensors]
        a.append(sum(float((g * d).sum()) for g, d in zip(ana, dirs)))
        n.append(_directional(fn, tensors, dirs, eps))
    return relative_error(a, n)
