"""Single-sequence inference latency, split into data setup and prediction."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from . import model as nn
from .seqdata import FeatureScaler


@dataclass
class LatencyReport:
    iterations: int
    total_ms: np.ndarray
    setup_ms: np.ndarray
    predict_ms: np.ndarray

    @staticmethod
    def _stats(a):
        return {
            "mean": float(a.mean()),
            "median": float(np.median(a)),
            "p95": float(np.percentile(a, 95)),
            "min": float(a.min()),
            "max": float(a.max()),
        }

    def summary(self) -> dict:
        return {
            "iterations": self.iterations,
            "data_setup_ms": self._stats(self.setup_ms),
            "prediction_ms": self._stats(self.predict_ms),
            "inference_ms": self._stats(self.total_ms),
        }


def bench_inference(weights, samples: np.ndarray, scaler: FeatureScaler | None = None, warmup: int = 10, iterations: int = 100) -> LatencyReport:
    """Time batch-size-1 forward passes on a monotonic clock.

    Data setup covers scaling the raw (T, F) window and building the input
    tensor; prediction covers the forward pass and argmax.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 2:
        samples = samples[None]
    dtype = weights["proj.weight"].dtype
    setup, predict, total = [], [], []
    with torch.inference_mode():
        for i in range(warmup + iterations):
            raw = samples[i % len(samples)]
            t0 = time.perf_counter_ns()
            values = scaler.apply(raw) if scaler is not None else raw
            x = torch.from_numpy(np.ascontiguousarray(values)).to(dtype)[None]
            t1 = time.perf_counter_ns()
            int(torch.argmax(nn.logits_fn(x, weights), dim=-1)[0])
            t2 = time.perf_counter_ns()
            if i >= warmup:
                setup.append((t1 - t0) / 1e6)
                predict.append((t2 - t1) / 1e6)
                total.append((t2 - t0) / 1e6)
    return LatencyReport(iterations, np.array(total), np.array(setup), np.array(predict))
