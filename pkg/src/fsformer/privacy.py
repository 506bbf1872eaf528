"""DP-SGD (per-sample clipping + Gaussian noise) and a Renyi-DP accountant.

Gradients handled here are batched dicts: every tensor carries a leading
per-sample axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import torch

from . import model as nn
from .trainer import AdamHyper, AdamState, adam_step

INTEGER_ORDERS = tuple(float(a) for a in range(2, 65))
DEFAULT_ORDERS = (1.01, 1.25, 1.5, 1.75) + INTEGER_ORDERS

#: returned by the accountant when sigma == 0 leaves nothing to account for
NO_GUARANTEE = None


@dataclass
class PrivacySpec:
    noise_multiplier: float = 0.001
    clip_norm: float = 5.0
    sampling_rate: float = 1.0
    rounds: int = 1
    delta: float = 1e-5
    orders: Sequence[float] = field(default_factory=lambda: DEFAULT_ORDERS)

    def __post_init__(self):
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be >= 0")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")
        if not 0 <= self.sampling_rate <= 1:
            raise ValueError("sampling_rate must lie in [0, 1]")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not self.orders or any(not 1 < a <= 64 for a in self.orders):
            raise ValueError("orders must be a nonempty subset of (1, 64]")


@dataclass
class PrivacyReport:
    epsilon: Optional[float]
    delta: float
    best_order: Optional[float]
    rdp: dict  # order -> composed RDP
    dp: dict  # order -> epsilon candidate at that order

    @property
    def guaranteed(self) -> bool:
        return self.epsilon is not NO_GUARANTEE

    def to_dict(self):
        return {
            "epsilon": self.epsilon,
            "delta": self.delta,
            "best_order": self.best_order,
            "guaranteed": self.guaranteed,
            "table": [{"alpha": a, "rdp": self.rdp[a], "epsilon": self.dp[a]} for a in sorted(self.rdp)],
        }


# --------------------------------------------------------------------------
# mechanism


def per_sample_norms(grads: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """L2 norm of each sample's gradient over all tensors concatenated."""
    sq = sum(g.reshape(g.shape[0], -1).pow(2).sum(dim=1) for g in grads.values())
    return torch.sqrt(sq)


def clip_per_sample(grads: Mapping[str, torch.Tensor], clip_norm: float) -> dict:
    if not clip_norm > 0:
        raise ValueError("clip_norm must be > 0")
    norms = per_sample_norms(grads)
    scale = 1.0 / torch.clamp(norms / clip_norm, min=1.0)
    return {k: g * scale.reshape(-1, *([1] * (g.dim() - 1))).to(g.dtype) for k, g in grads.items()}


def noisy_batch_gradient(clipped: Mapping[str, torch.Tensor], sigma: float, clip_norm: float, generator: torch.Generator | None = None) -> dict:
    """(sum of clipped grads + N(0, sigma^2 C^2 I)) / B."""
    out = {}
    for k, g in clipped.items():
        b = g.shape[0]
        total = g.sum(dim=0)
        if sigma > 0:
            total = total + torch.randn(total.shape, generator=generator, dtype=total.dtype) * (sigma * clip_norm)
        out[k] = total / b
    return out


def dp_gradient(x, y, weights, privacy: PrivacySpec, generator=None, loss_kind="weighted_ce", class_weights=None):
    """Private minibatch gradient; returns (mean per-sample loss, gradient dict)."""
    from torch.func import grad_and_value, vmap

    def single(w, xi, yi):
        return nn.loss_fn(w, xi[None], yi.reshape(1), loss_kind, class_weights)

    grads, losses = vmap(grad_and_value(single), in_dims=(None, 0, 0))(weights, x, y)
    clipped = clip_per_sample(grads, privacy.clip_norm)
    noisy = noisy_batch_gradient(clipped, privacy.noise_multiplier, privacy.clip_norm, generator)
    for k, g in noisy.items():
        if not torch.isfinite(g).all():
            raise nn.NonFiniteError(f"private gradient of {k}")
    return float(losses.mean()), noisy


def dp_grad_fn(privacy: PrivacySpec, generator, loss_kind="weighted_ce", class_weights=None):
    def fn(weights, xb, yb):
        return dp_gradient(xb, yb, weights, privacy, generator, loss_kind, class_weights)

    return fn


def dp_local_step(batch, weights, privacy: PrivacySpec, generator, state: AdamState, hyper: AdamHyper,
                  loss_kind="weighted_ce", class_weights=None):
    """Per-sample backward, clip, noise and average, then one Adam step."""
    x, y = batch
    loss, grads = dp_gradient(x, y, weights, privacy, generator, loss_kind, class_weights)
    weights, state = adam_step(weights, grads, state, hyper, state.step + 1)
    return weights, state, loss


# --------------------------------------------------------------------------
# accountant


def rdp_gaussian(alpha: float, clip_norm: float, sigma: float) -> Optional[float]:
    """alpha * C^2 / (2 sigma^2)."""
    if sigma == 0:
        return NO_GUARANTEE
    return alpha * clip_norm**2 / (2 * sigma**2)


def _log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def _logsumexp(xs: Sequence[float]) -> float:
    m = max(xs)
    if m == -math.inf:
        return -math.inf
    return m + math.log(sum(math.exp(x - m) for x in xs))


def rdp_subsampled(alpha: int, gamma: float, clip_norm: float, sigma: float) -> Optional[float]:
    """(1/(alpha-1)) log E_{k~Bin(alpha, gamma)} exp((alpha-1) eps_k), eps_k = k C^2/(2 sigma^2)."""
    if int(alpha) != alpha or alpha < 2:
        raise ValueError(f"subsampled RDP needs an integer order >= 2, got {alpha}")
    if not 0 <= gamma <= 1:
        raise ValueError("gamma must lie in [0, 1]")
    alpha = int(alpha)
    if gamma == 0:
        return 0.0
    if sigma == 0:
        return NO_GUARANTEE
    unit = clip_norm**2 / (2 * sigma**2)
    if gamma == 1:
        return alpha * unit
    log_g, log_1mg = math.log(gamma), math.log1p(-gamma)
    terms = [
        _log_comb(alpha, k) + k * log_g + (alpha - k) * log_1mg + (alpha - 1) * k * unit
        for k in range(alpha + 1)
    ]
    return _logsumexp(terms) / (alpha - 1)


def rdp_compose(eps: Optional[float], rounds: int) -> Optional[float]:
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    return NO_GUARANTEE if eps is NO_GUARANTEE else rounds * eps


def rdp_curve(spec: PrivacySpec) -> dict:
    """Composed RDP at every order of the grid.

    Integer orders use the subsampled bound; fractional orders fall back to
    the plain Gaussian value (no amplification).
    """
    sigma, clip, gamma = spec.noise_multiplier, spec.clip_norm, spec.sampling_rate
    out = {}
    for a in spec.orders:
        if float(a).is_integer():
            eps = rdp_subsampled(int(a), gamma, clip, sigma)
        else:
            eps = 0.0 if gamma == 0 else rdp_gaussian(a, clip, sigma)
        out[float(a)] = rdp_compose(eps, spec.rounds)
    return out


def rdp_to_dp(composed: Mapping[float, Optional[float]], delta: float) -> PrivacyReport:
    """eps(delta) = min over orders of eps_T(alpha) + log(1/delta)/(alpha-1)."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if not composed:
        raise ValueError("empty order grid")
    if any(v is NO_GUARANTEE for v in composed.values()):
        return PrivacyReport(NO_GUARANTEE, delta, None, dict(composed), {a: None for a in composed})
    table = {a: e + math.log(1 / delta) / (a - 1) for a, e in composed.items()}
    best = min(table, key=lambda a: (table[a], a))
    return PrivacyReport(table[best], delta, best, dict(composed), table)


def privacy_report(spec: PrivacySpec) -> PrivacyReport:
    return rdp_to_dp(rdp_curve(spec), spec.delta)
