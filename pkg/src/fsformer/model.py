"""Encoder-only transformer classifier with multi-query attention pooling.

Weights are a flat ``dict[str, Tensor]``; every function here is pure and
takes the weights explicitly, which keeps per-sample gradients (``torch.func``)
and federated averaging straightforward. Row-vector convention throughout:
``x @ W`` with ``W`` shaped (in, out).

Batched inputs are (B, T, F); single sequences (T, F) are accepted by the
public entry points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

LN_EPS = 1e-5
LOG_FLOOR = 1e-12
LOSS_KINDS = ("smooth_l1", "weighted_ce")


class NonFiniteError(FloatingPointError):
    def __init__(self, stage: str):
        super().__init__(f"non-finite values produced at stage '{stage}'")
        self.stage = stage


@dataclass(frozen=True)
class ModelConfig:
    timesteps: int = 20
    features: int = 9
    d_model: int = 64
    layers: int = 6
    heads: int = 2
    pool_heads: int = 4
    ffn_hidden: int = 2048
    classes: int = 20

    def __post_init__(self):
        for name in ("timesteps", "features", "d_model", "layers", "heads", "pool_heads", "ffn_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


def weight_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor names and shapes, in checkpoint order."""
    c = config
    d, dk = c.d_model, c.head_dim
    shapes = {
        "proj.weight": (c.features, d),
        "proj.bias": (d,),
        "pos": (c.timesteps, d),
    }
    for i in range(c.layers):
        p = f"layers.{i}."
        shapes.update({
            p + "wq": (c.heads, d, dk),
            p + "wk": (c.heads, d, dk),
            p + "wv": (c.heads, d, dk),
            p + "wo": (d, d),
            p + "ln1.gain": (d,),
            p + "ln1.bias": (d,),
            p + "ffn.w1": (d, c.ffn_hidden),
            p + "ffn.b1": (c.ffn_hidden,),
            p + "ffn.w2": (c.ffn_hidden, d),
            p + "ffn.b2": (d,),
            p + "ln2.gain": (d,),
            p + "ln2.bias": (d,),
        })
    shapes.update({
        "pool.wk": (d, d),
        "pool.wv": (d, d),
        "pool.u": (c.pool_heads, d),
        "pool.wq": (c.pool_heads, d, d),
        "pool.proj": (c.pool_heads * d, d),
        "cls.weight": (d, c.classes),
        "cls.bias": (c.classes,),
    })
    return shapes


def param_count(config: ModelConfig) -> int:
    c = config
    d, f, h = c.d_model, c.ffn_hidden, c.pool_heads
    embed = c.features * d + d + c.timesteps * d
    # Q/K/V over all heads are d x d in total, plus W_O and two layer norms
    per_layer = 3 * d * d + d * d + (d * f + f) + (f * d + d) + 4 * d
    pool = 2 * d * d + h * d + h * d * d + h * d * d
    head = d * c.classes + c.classes
    return embed + c.layers * per_layer + pool + head


def init_weights(config: ModelConfig, seed: int = 0, dtype=torch.float32) -> dict[str, torch.Tensor]:
    """Xavier-uniform linear maps; zero biases and positions; unit LN gains.

    The pooling seeds ``u_j`` are drawn from N(0, 1): zero seeds would make
    the per-head query maps receive no gradient.
    """
    gen = torch.Generator().manual_seed(int(seed))
    out = {}
    for name, shape in weight_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "pos" or leaf in ("bias", "b1", "b2"):
            t = torch.zeros(shape, dtype=torch.float64)
        elif leaf == "gain":
            t = torch.ones(shape, dtype=torch.float64)
        elif name == "pool.u":
            t = torch.randn(shape, generator=gen, dtype=torch.float64)
        else:
            fan_in, fan_out = shape[-2], shape[-1]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            t = (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound
        out[name] = t.to(dtype)
    return out


def check_weights(weights: dict[str, torch.Tensor], config: ModelConfig) -> None:
    expected = weight_shapes(config)
    if set(weights) != set(expected):
        missing = sorted(set(expected) - set(weights))
        extra = sorted(set(weights) - set(expected))
        raise ValueError(f"weight names mismatch; missing={missing} extra={extra}")
    for name, shape in expected.items():
        if tuple(weights[name].shape) != shape:
            raise ValueError(f"{name}: shape {tuple(weights[name].shape)} != {shape}")


def n_layers(weights) -> int:
    return sum(1 for k in weights if k.startswith("layers.") and k.endswith(".wo"))


# --------------------------------------------------------------------------
# blocks


def layer_norm(x, gain, bias, eps=LN_EPS):
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


def embed(x, weights):
    """z_t = x_t W_proj + b_proj + p_t for every timestep."""
    if x.shape[-1] != weights["proj.weight"].shape[0] or x.shape[-2] != weights["pos"].shape[0]:
        raise ValueError(
            f"input shape {tuple(x.shape)} does not match (T, F) = "
            f"({weights['pos'].shape[0]}, {weights['proj.weight'].shape[0]})"
        )
    return x @ weights["proj.weight"] + weights["proj.bias"] + weights["pos"]


def _mhsa(z, wq, wk, wv, wo):
    q = torch.einsum("...td,hdk->...htk", z, wq)
    k = torch.einsum("...td,hdk->...htk", z, wk)
    v = torch.einsum("...td,hdk->...htk", z, wv)
    scores = q @ k.transpose(-1, -2) / math.sqrt(wq.shape[-1])
    attn = torch.softmax(scores, dim=-1)
    heads = attn @ v  # (..., H, T, dk)
    concat = heads.transpose(-3, -2).reshape(*z.shape[:-1], -1)
    return concat @ wo, attn


def mhsa(z, layer_weights):
    """Multi-head self-attention; returns (output, attention maps (..., H, T, T))."""
    w = layer_weights
    return _mhsa(z, w["wq"], w["wk"], w["wv"], w["wo"])


def ffn(a, layer_weights):
    w = layer_weights
    return torch.relu(a @ w["ffn.w1"] + w["ffn.b1"]) @ w["ffn.w2"] + w["ffn.b2"]


def encoder_layer(z, layer_weights):
    """Post-norm block: A = LN1(Z + MHSA(Z)); Z' = LN2(A + FFN(A))."""
    w = layer_weights
    att, maps = mhsa(z, w)
    a = layer_norm(z + att, w["ln1.gain"], w["ln1.bias"])
    out = layer_norm(a + ffn(a, w), w["ln2.gain"], w["ln2.bias"])
    return out, maps


def layer_view(weights, i):
    prefix = f"layers.{i}."
    return {k[len(prefix):]: v for k, v in weights.items() if k.startswith(prefix)}


def attention_pool(z, weights, head_dim):
    """Multi-query pooling: shared keys/values, one learned query per head.

    Returns (pooled (..., d), contexts (..., P, d), attention (..., P, T)).
    """
    k = z @ weights["pool.wk"]
    v = z @ weights["pool.wv"]
    q = torch.einsum("pd,pde->pe", weights["pool.u"], weights["pool.wq"])
    scores = torch.einsum("pe,...te->...pt", q, k) / math.sqrt(head_dim)
    attn = torch.softmax(scores, dim=-1)
    ctx = attn @ v
    pooled = ctx.reshape(*ctx.shape[:-2], -1) @ weights["pool.proj"]
    return pooled, ctx, attn


def classify(pooled, weights):
    logits = pooled @ weights["cls.weight"] + weights["cls.bias"]
    probs = torch.softmax(logits, dim=-1)
    return logits, probs, torch.argmax(probs, dim=-1)


def _head_dim(weights):
    return weights["layers.0.wq"].shape[-1] if "layers.0.wq" in weights else weights["pool.wk"].shape[0]


def logits_fn(x, weights):
    """Forward pass to logits with no bookkeeping; safe under ``torch.func``."""
    z = embed(x, weights)
    for i in range(n_layers(weights)):
        z, _ = encoder_layer(z, layer_view(weights, i))
    pooled, _, _ = attention_pool(z, weights, _head_dim(weights))
    return pooled @ weights["cls.weight"] + weights["cls.bias"]


@dataclass
class ForwardTrace:
    embedded: torch.Tensor
    attention: list[torch.Tensor] = field(default_factory=list)
    encoded: torch.Tensor | None = None
    contexts: torch.Tensor | None = None
    pool_attention: torch.Tensor | None = None
    pooled: torch.Tensor | None = None
    logits: torch.Tensor | None = None
    probs: torch.Tensor | None = None
    pred: torch.Tensor | None = None


def _finite(t, stage):
    if not torch.isfinite(t).all():
        raise NonFiniteError(stage)
    return t


def forward(x, weights, config: ModelConfig | None = None) -> ForwardTrace:
    """Full forward pass keeping every intermediate."""
    x = torch.as_tensor(x, dtype=weights["proj.weight"].dtype)
    if config is not None and x.shape[-2:] != (config.timesteps, config.features):
        raise ValueError(f"expected (..., {config.timesteps}, {config.features}) input, got {tuple(x.shape)}")
    z = _finite(embed(x, weights), "embed")
    trace = ForwardTrace(embedded=z)
    for i in range(n_layers(weights)):
        z, maps = encoder_layer(z, layer_view(weights, i))
        _finite(z, f"encoder_layer_{i}")
        trace.attention.append(maps)
    trace.encoded = z
    pooled, ctx, attn = attention_pool(z, weights, _head_dim(weights))
    trace.pooled = _finite(pooled, "attention_pool")
    trace.contexts, trace.pool_attention = ctx, attn
    logits, probs, pred = classify(pooled, weights)
    trace.logits = _finite(logits, "classify")
    trace.probs, trace.pred = probs, pred
    return trace


def predict_proba(x, weights, batch_size: int = 1024) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=weights["proj.weight"].dtype)
    with torch.no_grad():
        chunks = [torch.softmax(logits_fn(x[i : i + batch_size], weights), dim=-1) for i in range(0, len(x), batch_size)]
    return torch.cat(chunks)


# --------------------------------------------------------------------------
# losses


def smooth_l1_loss(probs, target):
    """Piecewise quadratic/linear penalty on (p - y), mean over classes then batch."""
    r = (probs - target).abs()
    per = torch.where(r < 1, 0.5 * r * r, r - 0.5)
    return per.mean(dim=-1).mean()


def weighted_ce_loss(probs, labels, class_weights):
    labels = torch.as_tensor(labels).reshape(-1)
    probs = probs.reshape(-1, probs.shape[-1])
    w = torch.as_tensor(class_weights, dtype=probs.dtype)
    picked = probs.gather(1, labels[:, None])[:, 0]
    return (-w[labels] * torch.log(picked.clamp_min(LOG_FLOOR))).mean()


def loss_from_logits(logits, labels, loss_kind: str, class_weights=None):
    probs = torch.softmax(logits, dim=-1)
    labels = torch.as_tensor(labels)
    if loss_kind == "smooth_l1":
        onehot = torch.nn.functional.one_hot(labels.reshape(-1), probs.shape[-1]).to(probs.dtype)
        return smooth_l1_loss(probs.reshape(-1, probs.shape[-1]), onehot)
    if loss_kind == "weighted_ce":
        if class_weights is None:
            class_weights = torch.ones(probs.shape[-1], dtype=probs.dtype)
        return weighted_ce_loss(probs, labels, class_weights)
    raise ValueError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")


def loss_fn(weights, x, labels, loss_kind, class_weights=None):
    return loss_from_logits(logits_fn(x, weights), labels, loss_kind, class_weights)


def backward(x, labels, weights, config: ModelConfig | None = None, loss_kind: str = "smooth_l1", class_weights=None):
    """Loss and its exact gradient with respect to every weight tensor."""
    dtype = weights["proj.weight"].dtype
    x = torch.as_tensor(x, dtype=dtype)
    labels = torch.as_tensor(labels, dtype=torch.int64)
    if x.dim() == 2:
        x, labels = x[None], labels.reshape(1)
    if config is not None:
        check_weights(weights, config)
    names = list(weights)
    leaves = {k: weights[k].detach().requires_grad_(True) for k in names}
    loss = loss_fn(leaves, x, labels, loss_kind, class_weights)
    grads = torch.autograd.grad(loss, [leaves[k] for k in names])
    out = {k: g.detach() for k, g in zip(names, grads)}
    for k, g in out.items():
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"gradient of {k}")
    return float(loss.detach()), out


def per_sample_grads(x, labels, weights, loss_kind="weighted_ce", class_weights=None):
    """Gradients of each sample's own loss; every tensor gains a leading batch axis."""
    from torch.func import grad, vmap

    def single(w, xi, yi):
        return loss_fn(w, xi[None], yi.reshape(1), loss_kind, class_weights)

    return vmap(grad(single), in_dims=(None, 0, 0))(weights, x, labels)
