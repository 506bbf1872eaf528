"""Desk-scale experiment setups shared by scripts/ and the acceptance suite.

Every setup is fixed up front (corpus size, model width, epochs, seeds) so a
run is a pure function of its seed.
"""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np
import torch

from . import model as nn
from .fedsim import FederationConfig, federation_privacy, run_federation
from .histgan import GanConfig, detect_unseen, generate, train_gan
from .privacy import PrivacySpec
from .seqdata import (
    DISTINCT_SIGNATURE_CLASSES,
    DatasetSplit,
    SynthSpec,
    build_windows,
    normalize_apply,
    normalize_fit,
    partition_clients,
    split_dataset,
    stack,
    synth_corpus,
)
from .trainer import TrainConfig, evaluate, train_centralized

DESK_DATA = SynthSpec(n_vehicles=400, stream_length=200)
DESK_MODEL = nn.ModelConfig(d_model=32, layers=2, heads=2, pool_heads=4, ffn_hidden=64)
DESK_TRAIN = TrainConfig(epochs=60, batch_size=64, learning_rate=1e-3, loss_kind="smooth_l1")

# speed-family attacks held out of the known set in the unseen pipeline
HELD_OUT_FAMILY = (5, 6, 7, 8)


def desk_split(seed: int = 0, spec: SynthSpec = DESK_DATA, exclude=()) -> tuple[DatasetSplit, object]:
    """Window, split 70/15/15 and standardize with train-fit statistics."""
    windows = build_windows(synth_corpus(spec, seed=seed))
    if exclude:
        windows = [w for w in windows if w.label not in exclude]
    split = split_dataset(windows, seed=seed)
    scaler = normalize_fit(split.train)
    out = DatasetSplit(*(normalize_apply(scaler, part) for part in (split.train, split.validation, split.test)),
                       split.split_seed)
    return out, scaler


def subset_accuracy(weights, samples, classes) -> float:
    x, y = stack(samples)
    mask = np.isin(y, classes)
    if not mask.any():
        raise ValueError("no samples from the requested classes")
    preds = nn.predict_proba(torch.from_numpy(x[mask]), weights).argmax(-1).numpy()
    return float((preds == y[mask]).mean())


def centralized_run(seed: int = 0, train_config: TrainConfig = DESK_TRAIN, model_config=DESK_MODEL, on_epoch=None):
    t0 = time.perf_counter()
    split, _ = desk_split(seed)
    weights, history = train_centralized(split, model_config, train_config, seed=seed, on_epoch=on_epoch)
    return {
        "weights": weights,
        "history": history,
        "test": evaluate(weights, split.test),
        "distinct_accuracy": subset_accuracy(weights, split.test, DISTINCT_SIGNATURE_CLASSES),
        "seconds": time.perf_counter() - t0,
    }


def federated_gap(seed: int = 0, n_clients: int = 5, rounds: int = 20, batch_size: int = 64, learning_rate: float = 1e-3):
    """Federated accuracy against centralized training for the same epoch budget.

    Both use weighted cross-entropy and the same Adam settings; centralized
    training runs ``rounds`` epochs so each sample is visited equally often.
    ``step_matched`` is a second centralized run whose optimizer-step count
    equals one client's, for reference.
    """
    split, _ = desk_split(seed)
    shards = partition_clients(split.train, n_clients, seed=seed, test=split.test)
    fed_cfg = FederationConfig(n_clients=n_clients, rounds=rounds, batch_size=batch_size, learning_rate=learning_rate)
    t0 = time.perf_counter()
    fed = run_federation(shards, DESK_MODEL, fed_cfg, seed=seed)[-1].weights
    t_fed = time.perf_counter() - t0
    cen_cfg = TrainConfig(epochs=rounds, batch_size=batch_size, learning_rate=learning_rate, loss_kind="weighted_ce")
    cen, _ = train_centralized(split, DESK_MODEL, cen_cfg, seed=seed)
    fed_acc, cen_acc = evaluate(fed, split.test).accuracy, evaluate(cen, split.test).accuracy
    short = replace(cen_cfg, epochs=max(1, round(rounds * fed_cfg.local_epochs / n_clients)))
    step_matched = evaluate(train_centralized(split, DESK_MODEL, short, seed=seed)[0], split.test).accuracy
    return {"federated": fed_acc, "centralized": cen_acc, "gap": cen_acc - fed_acc, "step_matched": step_matched,
            "fed_seconds": t_fed, "seconds": time.perf_counter() - t0}


def dp_sweep(sigmas=(0.001, 0.1, 0.5), seed: int = 0, n_clients: int = 5, rounds: int = 20, batch_size: int = 64,
             clip_norm: float = 1.0, learning_rate: float = 1e-3, delta: float = 1e-5):
    """Private federated accuracy and budget per noise multiplier."""
    split, _ = desk_split(seed)
    shards = partition_clients(split.train, n_clients, seed=seed, test=split.test)
    fed_cfg = FederationConfig(n_clients=n_clients, rounds=rounds, batch_size=batch_size, learning_rate=learning_rate)
    rows = []
    for sigma in sigmas:
        t0 = time.perf_counter()
        spec = PrivacySpec(noise_multiplier=sigma, clip_norm=clip_norm, delta=delta)
        weights = run_federation(shards, DESK_MODEL, fed_cfg, seed=seed, privacy=spec)[-1].weights
        report = federation_privacy(shards, fed_cfg, spec)
        rows.append({
            "sigma": sigma,
            "accuracy": evaluate(weights, split.test).accuracy,
            "epsilon": report.epsilon,
            "best_order": report.best_order,
            "seconds": time.perf_counter() - t0,
        })
    return rows


def calibrate_threshold(weights, known_validation, max_false_flag: float = 0.2, grid=None) -> float:
    """Largest grid threshold whose flag rate on known validation data stays within budget."""
    grid = np.round(np.arange(0.05, 1.0, 0.01), 2) if grid is None else grid
    ok = [float(t) for t in grid if detect_unseen(weights, known_validation, float(t))[1] <= max_false_flag]
    return max(ok) if ok else float(min(grid))


def unseen_pipeline(seed: int = 0, classifier_epochs: int = 30, gan_epochs: int = 50, gan_config: GanConfig | None = None,
                    n_generated: int = 500, threshold: float = 0.5, held_out=HELD_OUT_FAMILY, max_false_flag: float = 0.2):
    """Known-class classifier against GAN samples of a held-out attack family.

    The classifier never sees ``held_out``; the GAN is trained on those
    windows (standardized with the classifier's scaler) and its samples play
    the unseen attack. Detection rate is the flag rate on generated data,
    false-flag rate the flag rate on the known test split. Rates are given
    at ``threshold`` and at a threshold calibrated on known validation data.
    """
    t0 = time.perf_counter()
    known, scaler = desk_split(seed, exclude=held_out)
    tc = TrainConfig(epochs=classifier_epochs, batch_size=64, learning_rate=1e-3, loss_kind="smooth_l1")
    weights, _ = train_centralized(known, DESK_MODEL, tc, seed=seed)
    family = [w for w in build_windows(synth_corpus(DESK_DATA, seed=seed)) if w.label in held_out]
    real = np.stack([s.values for s in normalize_apply(scaler, family)]).astype(np.float32)
    gan_config = gan_config or GanConfig()
    state = train_gan(real, gan_config, gan_epochs, seed=seed)
    fake = generate(state, gan_config, n_generated, seed=seed + 1)
    x_known, _ = stack(known.test)
    _, detection = detect_unseen(weights, fake, threshold)
    _, false_flag = detect_unseen(weights, x_known, threshold)
    _, real_family = detect_unseen(weights, real, threshold)
    x_val, _ = stack(known.validation)
    tau = calibrate_threshold(weights, x_val, max_false_flag)
    return {
        "calibrated_threshold": tau,
        "calibrated_detection_rate": detect_unseen(weights, fake, tau)[1],
        "calibrated_false_flag_rate": detect_unseen(weights, x_known, tau)[1],
        "calibrated_real_family_flag_rate": detect_unseen(weights, real, tau)[1],
        "detection_rate": detection,
        "false_flag_rate": false_flag,
        "real_family_flag_rate": real_family,
        "known_accuracy": evaluate(weights, known.test).accuracy,
        "hist_first": state.history[0]["hist_loss"],
        "hist_last": state.history[-1]["hist_loss"],
        "seconds": time.perf_counter() - t0,
        "weights": weights,
        "fake": fake,
        "known_test": x_known,
    }


def gan_toy(epochs: int = 50, seed: int = 0, n: int = 1600):
    """Constant-one toy distribution; returns the hist loss trajectory."""
    cfg = GanConfig(features=1)
    real = np.full((n, cfg.timesteps, 1), 1.0, dtype=np.float32)
    state = train_gan(real, cfg, epochs, seed=seed)
    return [h["hist_loss"] for h in state.history]
