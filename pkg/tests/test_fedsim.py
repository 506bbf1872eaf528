import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fsformer import model as nn
from fsformer.fedsim import (
    FederationConfig,
    aggregate_metrics,
    fedavg_aggregate,
    federation_privacy,
    local_train,
    run_federation,
)
from fsformer.privacy import PrivacySpec, privacy_report
from fsformer.seqdata import partition_clients, separable_samples, split_dataset
from fsformer.trainer import Metrics, TrainConfig, confusion_matrix, evaluate, metrics_from_confusion, train_centralized

SEP_CFG = nn.ModelConfig(timesteps=20, features=9, d_model=8, layers=1, heads=2, pool_heads=2, ffn_hidden=16, classes=2)


def _t(*v):
    return {"w": torch.tensor(v, dtype=torch.float64)}


def _metrics_with_accuracy(acc):
    m = metrics_from_confusion(np.array([[5, 5], [0, 10]]))
    m.accuracy = acc
    return m


# ---------------------------------------------------------------- aggregation


def test_fedavg_examples():
    w = {"a": torch.randn(3, 2), "b": torch.randn(4)}
    out = fedavg_aggregate([(7, w)])
    assert all(torch.equal(out[k], w[k]) for k in w)
    assert float(fedavg_aggregate([(1, _t(0.0)), (3, _t(4.0))])["w"][0]) == 3.0
    assert float(fedavg_aggregate([(2, _t(1.0)), (2, _t(3.0))])["w"][0]) == 2.0


def test_fedavg_errors():
    with pytest.raises(ValueError):
        fedavg_aggregate([])
    with pytest.raises(ValueError):
        fedavg_aggregate([(0, _t(1.0))])
    with pytest.raises(ValueError):
        fedavg_aggregate([(1, _t(1.0)), (1, _t(1.0, 2.0))])
    with pytest.raises(ValueError):
        fedavg_aggregate([(1, {"a": torch.zeros(1)}), (1, {"b": torch.zeros(1)})])


def _brute_mean(updates):
    total = sum(n for n, _ in updates)
    out = {}
    for k in updates[0][1]:
        flat = [w[k].double().reshape(-1).tolist() for _, w in updates]
        vals = [sum(n * f[i] for (n, _), f in zip(updates, flat)) / total for i in range(len(flat[0]))]
        out[k] = np.array(vals).reshape(updates[0][1][k].shape)
    return out


@st.composite
def update_lists(draw):
    k = draw(st.integers(1, 3))
    shapes = draw(st.lists(st.sampled_from([(1,), (2,), (3,), (2, 2), (1, 3)]), min_size=1, max_size=3))
    seed = draw(st.integers(0, 2**31 - 1))
    g = torch.Generator().manual_seed(seed)
    updates = []
    for _ in range(k):
        w = {f"t{i}": torch.randn(s, generator=g, dtype=torch.float64) for i, s in enumerate(shapes)}
        updates.append((draw(st.integers(1, 500)), w))
    return updates


@settings(max_examples=100, deadline=None)
@given(update_lists())
def test_fedavg_brute_force_oracle(updates):
    out = fedavg_aggregate(updates)
    ref = _brute_mean(updates)
    for k in out:
        assert np.max(np.abs(out[k].numpy() - ref[k])) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(update_lists(), st.floats(-10, 10), st.randoms())
def test_fedavg_linearity_and_order(updates, c, rnd):
    scaled = [(n, {k: c * v for k, v in w.items()}) for n, w in updates]
    a = fedavg_aggregate(scaled)
    b = fedavg_aggregate(updates)
    for k in a:
        assert torch.allclose(a[k], c * b[k], atol=1e-12)
    shuffled = list(updates)
    rnd.shuffle(shuffled)
    p = fedavg_aggregate(shuffled)
    assert all(torch.max((p[k] - b[k]).abs()) <= 1e-12 for k in b)
    same = fedavg_aggregate([(n, updates[0][1]) for n, _ in updates])
    assert all(torch.allclose(same[k], updates[0][1][k], rtol=0, atol=1e-15) for k in same)


def test_aggregate_metrics_examples():
    m = _metrics_with_accuracy(0.9)
    agg = aggregate_metrics([(3, m), (5, m)])
    assert agg.accuracy == pytest.approx(0.9) and agg.f1 == pytest.approx(m.f1)
    assert aggregate_metrics([(1, _metrics_with_accuracy(0.8)), (1, _metrics_with_accuracy(0.6))]).accuracy == pytest.approx(0.7)
    assert aggregate_metrics([(3, _metrics_with_accuracy(0.8)), (1, _metrics_with_accuracy(0.4))]).accuracy == pytest.approx(0.7)
    with pytest.raises(ValueError):
        aggregate_metrics([(0, m)])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 1000), st.integers(0, 2**31 - 1)), min_size=1, max_size=4))
def test_aggregate_metrics_oracle(clients):
    reports = []
    for n, seed in clients:
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 4, size=30)
        preds = np.where(rng.random(30) < 0.6, labels, rng.integers(0, 4, size=30))
        reports.append((n, metrics_from_confusion(confusion_matrix(labels, preds, 4))))
    agg = aggregate_metrics(reports)
    total = sum(n for n, _ in reports)
    for key in Metrics.SCALARS:
        ref = sum(n * getattr(m, key) for n, m in reports) / total
        assert abs(getattr(agg, key) - ref) <= 1e-12
    for key in Metrics.PER_CLASS:
        ref = np.array([sum(n * getattr(m, key)[c] for n, m in reports) / total for c in range(4)])
        assert np.max(np.abs(getattr(agg, key) - ref)) <= 1e-12


# ---------------------------------------------------------------- local training / federation


def _sep_split():
    return split_dataset(separable_samples(200, seed=0), seed=0)


def _shards(k, split=None):
    split = split or _sep_split()
    return partition_clients(split.train, k, 0.05, seed=0, test=split.test, n_classes=2)


def test_config_validation():
    for bad in ({"local_epochs": 0}, {"n_clients": 0}, {"rounds": 0}, {"mu": -1.0}, {"strategy": "fedsgd"}):
        with pytest.raises(ValueError):
            FederationConfig(**bad)
    assert FederationConfig(strategy="fedavg", mu=5.0).proximal_mu == 0.0


def test_fedprox_mu_zero_is_fedavg_bitwise():
    shard = _shards(3)[1]
    w0 = nn.init_weights(SEP_CFG, 0)
    a, _ = local_train(shard, w0, FederationConfig(n_clients=3, strategy="fedavg", local_epochs=2), seed=5)
    b, _ = local_train(shard, w0, FederationConfig(n_clients=3, strategy="fedprox", mu=0.0, local_epochs=2), seed=5)
    assert all(torch.equal(a[k], b[k]) for k in a)


def _displacement(w, w0):
    return float(torch.sqrt(sum(((w[k] - w0[k]) ** 2).sum() for k in w)))


def test_fedprox_large_mu_shrinks_displacement():
    shard = _shards(3)[0]
    w0 = nn.init_weights(SEP_CFG, 0)
    base, _ = local_train(shard, w0, FederationConfig(n_clients=3, strategy="fedprox", mu=0.0, batch_size=16), seed=1)
    prox, _ = local_train(shard, w0, FederationConfig(n_clients=3, strategy="fedprox", mu=1e6, batch_size=16), seed=1)
    assert _displacement(prox, w0) < _displacement(base, w0)


def test_local_train_rejects_empty_shard():
    shard = _shards(2)[0]
    shard.train = []
    with pytest.raises(ValueError):
        local_train(shard, nn.init_weights(SEP_CFG, 0), FederationConfig(n_clients=2))


def test_single_client_matches_centralized_epoch():
    split = _sep_split()
    shards = partition_clients(split.train, 1, seed=3, n_classes=2)
    fed = run_federation(shards, SEP_CFG, FederationConfig(n_clients=1, rounds=1, batch_size=64), seed=7)
    cen, _ = train_centralized(split, SEP_CFG, TrainConfig(epochs=1, batch_size=64, loss_kind="weighted_ce"), seed=7)
    assert all(torch.equal(fed[-1].weights[k], cen[k]) for k in cen)


def test_rounds_reports_and_metric_consistency():
    shards = _shards(3)
    reports = run_federation(shards, SEP_CFG, FederationConfig(n_clients=3, rounds=3, batch_size=16), seed=0,
                             eval_set=_sep_split().test)
    assert [r.round for r in reports] == [0, 1, 2]
    assert sum(reports[-1].client_samples) == sum(s.n_samples for s in shards) == len(_sep_split().train)
    for rep in reports:
        ref = aggregate_metrics(list(zip(rep.client_samples, rep.client_metrics)))
        assert abs(rep.metrics.accuracy - ref.accuracy) <= 1e-9
        assert rep.global_metrics is not None
        d = rep.to_dict()
        assert len(d["clients"]) == 3 and "aggregate" in d and "global" in d


def test_federation_deterministic_and_order_independent():
    shards = _shards(3)
    cfg = FederationConfig(n_clients=3, rounds=2, batch_size=32)
    a = run_federation(shards, SEP_CFG, cfg, seed=4)[-1].weights
    b = run_federation(shards[::-1], SEP_CFG, cfg, seed=4)[-1].weights
    assert all(torch.equal(a[k], b[k]) for k in a)
    with pytest.raises(ValueError):
        run_federation(shards[:2], SEP_CFG, cfg, seed=4)


def test_private_federation_runs_and_accounts():
    shards = _shards(2)
    cfg = FederationConfig(n_clients=2, rounds=2, batch_size=16)
    spec = PrivacySpec(noise_multiplier=1.0, clip_norm=1.0)
    a = run_federation(shards, SEP_CFG, cfg, seed=1, privacy=spec)[-1].weights
    b = run_federation(shards, SEP_CFG, cfg, seed=1, privacy=spec)[-1].weights
    c = run_federation(shards, SEP_CFG, cfg, seed=1)[-1].weights
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)
    report = federation_privacy(shards, cfg, spec)
    n_min = min(s.n_samples for s in shards)
    assert report.guaranteed and report.epsilon > 0
    steps = 2 * -(-n_min // 16)  # rounds x batches per epoch on the smallest shard
    ref = privacy_report(PrivacySpec(1.0, 1.0, sampling_rate=16 / n_min, rounds=steps))
    assert report.epsilon == ref.epsilon and report.best_order == ref.best_order


def test_federated_gap_on_separable_set():
    split = _sep_split()
    shards = partition_clients(split.train, 5, 0.05, seed=0, test=split.test, n_classes=2)
    fed = run_federation(shards, SEP_CFG, FederationConfig(n_clients=5, rounds=20, batch_size=16), seed=0,
                         eval_set=split.test)
    cen, _ = train_centralized(split, SEP_CFG, TrainConfig(epochs=20, batch_size=16, loss_kind="weighted_ce"), seed=0)
    gap = evaluate(cen, split.test).accuracy - fed[-1].global_metrics.accuracy
    assert gap <= 0.03
