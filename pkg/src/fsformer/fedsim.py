"""Synchronous federated rounds: broadcast, local training, FedAvg.

FedProx is a local-objective change only (gradient term mu * (w - w_global));
aggregation is sample-weighted averaging in both strategies.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import model as nn
from .privacy import PrivacySpec, dp_grad_fn, privacy_report
from .seqdata import ClientShard, SequenceSample
from .trainer import (
    AdamHyper,
    AdamState,
    Metrics,
    derive_rng,
    evaluate,
    plain_grad_fn,
    run_epoch,
    to_tensors,
)

STRATEGIES = ("fedavg", "fedprox")


@dataclass
class FederationConfig:
    n_clients: int = 20
    rounds: int = 100
    local_epochs: int = 1
    strategy: str = "fedavg"
    mu: float = 0.01
    batch_size: int = 64
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.n_clients < 1 or self.rounds < 1 or self.local_epochs < 1:
            raise ValueError("n_clients, rounds and local_epochs must all be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def proximal_mu(self) -> float:
        return self.mu if self.strategy == "fedprox" else 0.0


@dataclass
class RoundReport:
    round: int
    weights: dict
    metrics: Metrics
    client_metrics: list
    client_samples: list
    global_metrics: Optional[Metrics] = None

    def to_dict(self) -> dict:
        out = {
            "round": self.round,
            "aggregate": self.metrics.to_dict(),
            "clients": [
                {"n": n, "accuracy": m.accuracy, "precision": m.precision, "recall": m.recall, "f1": m.f1}
                for n, m in zip(self.client_samples, self.client_metrics)
            ],
        }
        if self.global_metrics is not None:
            out["global"] = self.global_metrics.to_dict()
        return out


def _noise_generator(seed, round_index, client_id):
    state = np.random.SeedSequence([int(seed), int(round_index), int(client_id), 1]).generate_state(1, np.uint64)[0]
    return torch.Generator().manual_seed(int(state) & 0x7FFF_FFFF_FFFF_FFFF)


def local_train(
    shard: ClientShard,
    global_weights: dict,
    config: FederationConfig,
    seed: int = 0,
    round_index: int = 0,
    privacy: PrivacySpec | None = None,
):
    """Client update from the broadcast weights; returns (weights, test metrics).

    Metrics are computed on the shard's local test partition (None when the
    shard has no test data).
    """
    if not shard.train:
        raise ValueError(f"client {shard.client_id} has an empty training shard")
    dtype = global_weights["proj.weight"].dtype
    x, y = to_tensors(shard.train, dtype)
    cw = torch.as_tensor(shard.class_weights.weights, dtype=dtype)
    if privacy is None:
        grad_fn = plain_grad_fn("weighted_ce", cw)
    else:
        grad_fn = dp_grad_fn(privacy, _noise_generator(seed, round_index, shard.client_id), "weighted_ce", cw)
    hyper = AdamHyper(config.learning_rate, config.beta1, config.beta2, config.eps)
    weights = dict(global_weights)
    state = AdamState.zeros_like(weights)
    for e in range(config.local_epochs):
        rng = derive_rng(seed, round_index * config.local_epochs + e, shard.client_id)
        weights, state, _ = run_epoch(
            weights, state, x, y, config.batch_size, hyper, rng, grad_fn,
            anchor=global_weights, mu=config.proximal_mu,
        )
    metrics = evaluate(weights, shard.test) if shard.test else None
    return weights, metrics


def fedavg_aggregate(updates: Sequence[tuple[int, dict]]) -> dict:
    """Sample-weighted mean of client weights, accumulated in float64."""
    if not updates:
        raise ValueError("nothing to aggregate")
    names = list(updates[0][1])
    for n, w in updates:
        if n <= 0:
            raise ValueError(f"sample count must be positive, got {n}")
        if list(w) != names or any(w[k].shape != updates[0][1][k].shape for k in names):
            raise ValueError("client updates are not shape-congruent")
    total = float(sum(n for n, _ in updates))
    out = {}
    for k in names:
        acc = torch.zeros(updates[0][1][k].shape, dtype=torch.float64)
        for n, w in updates:
            acc = acc + (n / total) * w[k].to(torch.float64)
        out[k] = acc.to(updates[0][1][k].dtype)
    return out


def aggregate_metrics(reports: Sequence[tuple[int, Metrics]]) -> Metrics:
    """M_global = sum(n_i * metric_i) / N for every rate; confusion counts are summed."""
    if not reports:
        raise ValueError("nothing to aggregate")
    if any(n <= 0 for n, _ in reports):
        raise ValueError("sample counts must be positive")
    total = float(sum(n for n, _ in reports))
    kw = {}
    for k in Metrics.SCALARS:
        kw[k] = float(sum(n * getattr(m, k) for n, m in reports) / total)
    for k in Metrics.PER_CLASS:
        kw[k] = sum(n * getattr(m, k) for n, m in reports) / total
    kw["confusion"] = sum(m.confusion for _, m in reports)
    kw["present"] = np.logical_or.reduce([m.present for _, m in reports])
    return Metrics(**kw)


def run_federation(
    shards: Sequence[ClientShard],
    model_config: nn.ModelConfig,
    fed_config: FederationConfig,
    seed: int = 0,
    privacy: PrivacySpec | None = None,
    weights: dict | None = None,
    eval_set: Sequence[SequenceSample] | None = None,
    on_round: Callable[[RoundReport], None] | None = None,
) -> list[RoundReport]:
    """R rounds of broadcast / local_train / aggregate over every client.

    Clients are visited in client_id order and aggregated in that order.
    ``eval_set`` additionally evaluates the aggregated model each round.
    """
    if len(shards) != fed_config.n_clients:
        raise ValueError(f"{len(shards)} shards for n_clients={fed_config.n_clients}")
    shards = sorted(shards, key=lambda s: s.client_id)
    global_w = weights if weights is not None else nn.init_weights(model_config, seed)
    reports = []
    for r in range(fed_config.rounds):
        updates, client_metrics = [], []
        for shard in shards:
            w_i, m_i = local_train(shard, global_w, fed_config, seed, r, privacy)
            updates.append((shard.n_samples, w_i))
            client_metrics.append(m_i)
        global_w = fedavg_aggregate(updates)
        n = [u[0] for u in updates]
        scored = [(ni, m) for ni, m in zip(n, client_metrics) if m is not None]
        if scored:
            agg = aggregate_metrics(scored)
        else:
            agg = evaluate(global_w, eval_set) if eval_set else None
        report = RoundReport(r, global_w, agg, client_metrics, n,
                             evaluate(global_w, eval_set) if eval_set else None)
        reports.append(report)
        if on_round is not None:
            on_round(report)
    return reports


def federation_privacy(shards: Sequence[ClientShard], fed_config: FederationConfig, privacy: PrivacySpec):
    """Budget of the most exposed client: gamma = B / n_i, T = noisy steps taken."""
    n_min = min(s.n_samples for s in shards)
    gamma = min(1.0, fed_config.batch_size / n_min)
    steps = fed_config.rounds * fed_config.local_epochs * -(-n_min // fed_config.batch_size)
    return privacy_report(replace(privacy, sampling_rate=gamma, rounds=steps))
