"""Central finite differences over dicts of tensors.

Only ever calls the loss; it never touches autograd, so it checks the
gradient path independently.
"""

from __future__ import annotations

from typing import Callable

import torch


def central_difference(loss: Callable[[dict], float], weights: dict[str, torch.Tensor], step: float = 1e-4, names=None):
    grads = {}
    for name in names or list(weights):
        base = weights[name]
        g = torch.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = loss(weights)
            flat[i] = orig - step
            down = loss(weights)
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2 * step)
        grads[name] = g
    return grads


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-6) -> float:
    """max |a - b| / max(|a|, |b|, floor), elementwise."""
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, floor))
    return float(((a - b).abs() / denom).max()) if a.numel() else 0.0


def max_relative_error(analytic: dict, numeric: dict, floor: float = 1e-6) -> float:
    return max(relative_error(analytic[k], numeric[k], floor) for k in numeric)
