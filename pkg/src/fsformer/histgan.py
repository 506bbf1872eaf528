"""Histogram-guided attention GAN for sequence generation, and unseen-attack flagging.

Generator: noise tiled over timesteps -> 2-layer LSTM -> multi-head
self-attention (residual) -> one small MLP head per feature.
Critic: 1-layer LSTM, last hidden state -> linear score (no sigmoid).

The histogram CDF term is computed on hard bins and therefore carries no
gradient; it enters the reported generator loss and the monitoring history,
while generator updates follow the adversarial term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import model as nn
from .trainer import AdamHyper, AdamState, DivergenceError, adam_step


@dataclass(frozen=True)
class GanConfig:
    noise_dim: int = 128
    batch_size: int = 64
    timesteps: int = 20
    features: int = 9
    gen_hidden: int = 128
    gen_layers: int = 2
    attn_heads: int = 4
    mlp_hidden: int = 32
    leaky_slope: float = 0.2
    disc_hidden: int = 64
    lambda_hist: float = 1.0
    lambda_gp: float = 10.0
    critic_steps: int = 5
    n_bins: int = 50
    learning_rate: float = 3e-4
    beta1: float = 0.5
    beta2: float = 0.9

    def __post_init__(self):
        if self.lambda_hist < 0 or self.lambda_gp < 0:
            raise ValueError("loss coefficients must be >= 0")
        for name in ("noise_dim", "batch_size", "timesteps", "features", "gen_hidden", "gen_layers",
                     "attn_heads", "mlp_hidden", "disc_hidden", "critic_steps", "n_bins"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.gen_hidden % self.attn_heads:
            raise ValueError("gen_hidden must be divisible by attn_heads")


def _xavier(shape, gen, dtype):
    bound = math.sqrt(6.0 / (shape[-2] + shape[-1]))
    return ((torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound).to(dtype)


def _lstm_params(prefix, n_in, hidden, gen, dtype):
    b = torch.zeros(4 * hidden, dtype=dtype)
    b[hidden : 2 * hidden] = 1.0  # forget gate
    return {
        prefix + "w_ih": _xavier((n_in, 4 * hidden), gen, dtype),
        prefix + "w_hh": _xavier((hidden, 4 * hidden), gen, dtype),
        prefix + "b": b,
    }


def init_generator(config: GanConfig, seed: int = 0, dtype=torch.float32) -> dict:
    c = config
    gen = torch.Generator().manual_seed(int(seed))
    w = {}
    n_in = c.noise_dim
    for i in range(c.gen_layers):
        w.update(_lstm_params(f"lstm.{i}.", n_in, c.gen_hidden, gen, dtype))
        n_in = c.gen_hidden
    dk = c.gen_hidden // c.attn_heads
    for k in ("wq", "wk", "wv"):
        w["attn." + k] = _xavier((c.attn_heads, c.gen_hidden, dk), gen, dtype)
    w["attn.wo"] = _xavier((c.gen_hidden, c.gen_hidden), gen, dtype)
    w["heads.w1"] = _xavier((c.features, c.gen_hidden, c.mlp_hidden), gen, dtype)
    w["heads.b1"] = torch.zeros(c.features, c.mlp_hidden, dtype=dtype)
    w["heads.w2"] = _xavier((c.features, c.mlp_hidden), gen, dtype)
    w["heads.b2"] = torch.zeros(c.features, dtype=dtype)
    return w


def init_discriminator(config: GanConfig, seed: int = 0, dtype=torch.float32) -> dict:
    gen = torch.Generator().manual_seed(int(seed) + 7919)
    w = _lstm_params("lstm.", config.features, config.disc_hidden, gen, dtype)
    w["score.w"] = _xavier((config.disc_hidden, 1), gen, dtype)[:, 0]
    w["score.b"] = torch.zeros((), dtype=dtype)
    return w


def lstm(x, w_ih, w_hh, b):
    """Unrolled LSTM over axis 1 of (B, T, in); returns all hidden states (B, T, H)."""
    hidden = w_hh.shape[0]
    h = x.new_zeros(x.shape[0], hidden)
    c = x.new_zeros(x.shape[0], hidden)
    pre = x @ w_ih + b
    outs = []
    for t in range(x.shape[1]):
        gates = pre[:, t] + h @ w_hh
        i, f, g, o = gates.split(hidden, dim=-1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        outs.append(h)
    return torch.stack(outs, dim=1)


def generator_forward(noise, gen_weights, config: GanConfig):
    """(B, noise_dim) -> (B, timesteps, features)."""
    w = gen_weights
    noise = torch.as_tensor(noise, dtype=w["attn.wo"].dtype)
    h = noise[:, None, :].expand(noise.shape[0], config.timesteps, noise.shape[1])
    for i in range(config.gen_layers):
        h = lstm(h, w[f"lstm.{i}.w_ih"], w[f"lstm.{i}.w_hh"], w[f"lstm.{i}.b"])
    att, _ = nn._mhsa(h, w["attn.wq"], w["attn.wk"], w["attn.wv"], w["attn.wo"])
    h = h + att
    hid = torch.einsum("bth,fhm->btfm", h, w["heads.w1"]) + w["heads.b1"]
    hid = torch.nn.functional.leaky_relu(hid, config.leaky_slope)
    return torch.einsum("btfm,fm->btf", hid, w["heads.w2"]) + w["heads.b2"]


def discriminator_forward(seq, disc_weights):
    """(B, T, F) -> (B,) unbounded critic scores."""
    w = disc_weights
    seq = torch.as_tensor(seq, dtype=w["score.w"].dtype)
    h = lstm(seq, w["lstm.w_ih"], w["lstm.w_hh"], w["lstm.b"])[:, -1]
    return h @ w["score.w"] + w["score.b"]


# --------------------------------------------------------------------------
# losses


def gradient_penalty(real, fake, critic: Callable, lambda_gp: float = 10.0, generator: torch.Generator | None = None, u=None):
    """lambda_gp * E[(||grad_x D(x_hat)||_2 - 1)^2] on random interpolates.

    ``u`` overrides the per-sample Uniform(0, 1) mixing coefficients.
    The result stays differentiable with respect to the critic's parameters.
    """
    real = torch.as_tensor(real)
    fake = torch.as_tensor(fake, dtype=real.dtype)
    if real.shape != fake.shape:
        raise ValueError("real and fake batches must have the same shape")
    if u is None:
        u = torch.rand(real.shape[0], generator=generator, dtype=real.dtype)
    u = torch.as_tensor(u, dtype=real.dtype).reshape(-1, *([1] * (real.dim() - 1)))
    x_hat = (u * real + (1 - u) * fake).detach().requires_grad_(True)
    scores = critic(x_hat)
    (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
    norms = grad.reshape(grad.shape[0], -1).norm(dim=1)
    return lambda_gp * ((norms - 1) ** 2).mean()


@dataclass
class FeatureHistogram:
    edges: np.ndarray
    probs: np.ndarray
    cdf: np.ndarray


def feature_histograms(real, fake, n_bins: int = 50) -> list[tuple[FeatureHistogram, FeatureHistogram]]:
    """Per feature, histograms of real and fake over shared bins spanning both."""
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if real.size == 0 or fake.size == 0:
        raise ValueError("histograms need nonempty batches")
    n_feat = real.shape[-1]
    real = real.reshape(-1, n_feat)
    fake = fake.reshape(-1, n_feat)
    out = []
    for i in range(n_feat):
        lo = min(real[:, i].min(), fake[:, i].min())
        hi = max(real[:, i].max(), fake[:, i].max())
        if hi <= lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, n_bins + 1)
        pair = []
        for vals in (real[:, i], fake[:, i]):
            counts, _ = np.histogram(vals, bins=edges)
            probs = counts / counts.sum()
            # cumsum can overshoot 1 by rounding; clip so the CDF stays monotone
            cdf = np.minimum(np.cumsum(probs), 1.0)
            cdf[-1] = 1.0
            pair.append(FeatureHistogram(edges, probs, cdf))
        out.append(tuple(pair))
    return out


def hist_cdf_loss(real, fake, n_bins: int = 50) -> float:
    """Sum over features of the L1 distance between real and fake CDFs."""
    return float(sum(np.abs(r.cdf - f.cdf).sum() for r, f in feature_histograms(real, fake, n_bins)))


def critic_loss(disc_weights, real, fake, config: GanConfig, generator=None, u=None):
    critic = lambda s: discriminator_forward(s, disc_weights)
    wass = -critic(real).mean() + critic(fake).mean()
    return wass + gradient_penalty(real, fake, critic, config.lambda_gp, generator, u)


def generator_adv_loss(gen_weights, disc_weights, noise, config: GanConfig):
    return -discriminator_forward(generator_forward(noise, gen_weights, config), disc_weights).mean()


def gan_losses(real, fake, disc_weights, config: GanConfig, generator=None, u=None, critic=None):
    """(L_G, L_D) as reported values.

    L_G = -E[D(fake)] + lambda_hist * hist_cdf_loss; L_D = -E[D(real)] + E[D(fake)] + GP.
    """
    real = torch.as_tensor(real)
    fake = torch.as_tensor(fake, dtype=real.dtype)
    if critic is None:
        critic = lambda s: discriminator_forward(s, disc_weights)
    d_real = critic(real).mean()
    d_fake = critic(fake).mean()
    gp = gradient_penalty(real, fake, critic, config.lambda_gp, generator, u)
    hist = hist_cdf_loss(real.detach().numpy(), fake.detach().numpy(), config.n_bins)
    l_g = -float(d_fake) + config.lambda_hist * hist
    l_d = float(-d_real + d_fake + gp)
    return l_g, l_d


# --------------------------------------------------------------------------
# training


@dataclass
class GanState:
    config: GanConfig
    gen: dict
    disc: dict
    gen_opt: AdamState
    disc_opt: AdamState
    critic_updates: int = 0
    generator_updates: int = 0
    history: list = field(default_factory=list)


def _grad(loss_fn, weights):
    leaves = {k: v.detach().requires_grad_(True) for k, v in weights.items()}
    loss = loss_fn(leaves)
    grads = torch.autograd.grad(loss, list(leaves.values()))
    return float(loss.detach()), {k: g.detach() for k, g in zip(leaves, grads)}


def _as_array(real) -> np.ndarray:
    if isinstance(real, np.ndarray):
        return real.astype(np.float32)
    return np.stack([s.values for s in real]).astype(np.float32)


def train_gan(real_samples, config: GanConfig, epochs: int, seed: int = 0, monitor_size: int = 256) -> GanState:
    """Alternate ``critic_steps`` critic updates with one generator update.

    Each minibatch of real data drives one critic update. After every epoch
    the histogram CDF loss between a fixed real subset and a fixed-noise
    generated batch is appended to ``history``.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    real = torch.from_numpy(_as_array(real_samples))
    if real.shape[1:] != (config.timesteps, config.features):
        raise ValueError(f"real samples shaped {tuple(real.shape[1:])}, config expects "
                         f"({config.timesteps}, {config.features})")
    gen_w = init_generator(config, seed)
    disc_w = init_discriminator(config, seed)
    state = GanState(config, gen_w, disc_w, AdamState.zeros_like(gen_w), AdamState.zeros_like(disc_w))
    hyper = AdamHyper(config.learning_rate, config.beta1, config.beta2)
    torch_gen = torch.Generator().manual_seed(int(seed))
    rng = np.random.default_rng(seed)
    m = min(monitor_size, len(real))
    monitor_real = real[:m]
    monitor_noise = torch.randn(m, config.noise_dim, generator=torch.Generator().manual_seed(int(seed) + 1))

    for epoch in range(epochs):
        order = torch.from_numpy(rng.permutation(len(real)))
        d_losses, g_losses = [], []
        for start in range(0, len(real), config.batch_size):
            batch = real[order[start : start + config.batch_size]]
            b = len(batch)
            noise = torch.randn(b, config.noise_dim, generator=torch_gen)
            with torch.no_grad():
                fake = generator_forward(noise, state.gen, config)
            u = torch.rand(b, generator=torch_gen)
            d_loss, grads = _grad(lambda w: critic_loss(w, batch, fake, config, u=u), state.disc)
            state.disc, state.disc_opt = adam_step(state.disc, grads, state.disc_opt, hyper, state.disc_opt.step + 1)
            state.critic_updates += 1
            d_losses.append(d_loss)
            if state.critic_updates % config.critic_steps == 0:
                noise = torch.randn(config.batch_size, config.noise_dim, generator=torch_gen)
                g_loss, grads = _grad(lambda w: generator_adv_loss(w, state.disc, noise, config), state.gen)
                state.gen, state.gen_opt = adam_step(state.gen, grads, state.gen_opt, hyper, state.gen_opt.step + 1)
                state.generator_updates += 1
                g_losses.append(g_loss)
            if not math.isfinite(d_loss):
                raise DivergenceError(f"GAN critic loss non-finite at epoch {epoch}")
        with torch.no_grad():
            sample = generator_forward(monitor_noise, state.gen, config)
        hist = hist_cdf_loss(monitor_real.numpy(), sample.numpy(), config.n_bins)
        # None when this epoch held no generator update
        adv = float(np.mean(g_losses)) if g_losses else None
        state.history.append({
            "epoch": epoch,
            "critic_loss": float(np.mean(d_losses)),
            "generator_adv_loss": adv,
            "hist_loss": hist,
            "generator_loss": adv + config.lambda_hist * hist if g_losses else None,
        })
    return state


def generate(state_or_weights, config: GanConfig, n: int, seed: int = 0) -> np.ndarray:
    gen_w = state_or_weights.gen if isinstance(state_or_weights, GanState) else state_or_weights
    noise = torch.randn(n, config.noise_dim, generator=torch.Generator().manual_seed(int(seed)))
    with torch.no_grad():
        return generator_forward(noise, gen_w, config).numpy()


# --------------------------------------------------------------------------
# unseen-attack detection


def detect_unseen(classifier_weights, sequences, threshold: float = 0.5):
    """Flag sequences whose top softmax probability is below ``threshold``.

    Returns (flags, flagged fraction).
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    if not isinstance(sequences, (np.ndarray, torch.Tensor)):
        sequences = np.stack([s.values for s in sequences])
    x = torch.as_tensor(np.asarray(sequences), dtype=classifier_weights["proj.weight"].dtype)
    if x.dim() == 2:
        x = x[None]
    confidence = nn.predict_proba(x, classifier_weights).max(dim=-1).values.numpy()
    flags = confidence < threshold
    return flags, float(flags.mean()) if len(flags) else 0.0
