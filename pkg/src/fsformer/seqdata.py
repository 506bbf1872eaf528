"""Trace ingestion, windowing, splitting and the synthetic vehicular corpus.

A trace is a per-vehicle stream of beacon messages with nine kinematic
features. Classification operates on fixed-length windows of that stream.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

FEATURES = ("ts", "pos_x", "pos_y", "spd_x", "spd_y", "acl_x", "acl_y", "hed_x", "hed_y")
CSV_HEADER = ("vehicle_id", "msg_index", *FEATURES, "label")
N_FEATURES = len(FEATURES)
N_CLASSES = 20
UNSEEN_LABEL = 20

CLASS_NAMES = (
    "normal",
    "constant_position",
    "constant_position_offset",
    "random_position",
    "random_position_offset",
    "constant_speed",
    "constant_speed_offset",
    "random_speed",
    "random_speed_offset",
    "eventual_stop",
    "disruptive",
    "data_replay",
    "delayed_messages",
    "dos",
    "dos_random",
    "dos_disruptive",
    "data_replay_sybil",
    "traffic_congestion_sybil",
    "dos_random_sybil",
    "dos_disruptive_sybil",
)

# Classes whose perturbation is observable from inside a single window of the
# sender's own stream. Normal traffic, a constant offset, a faithful replay and
# a pure delay all produce internally consistent kinematics and are excluded.
DISTINCT_SIGNATURE_CLASSES = (1, 3, 4, 5, 6, 7, 8, 9, 10, 13, 14, 15, 16, 17, 18, 19)


class TraceFormatError(ValueError):
    """Raised for malformed trace CSV content; carries the offending line."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class TraceRecord:
    vehicle_id: int
    msg_index: int
    features: tuple[float, ...]
    label: int


@dataclass(frozen=True, eq=False)
class SequenceSample:
    values: np.ndarray  # (window, features)
    label: int
    vehicle_id: int = -1

    def __eq__(self, other):
        if not isinstance(other, SequenceSample):
            return NotImplemented
        return (
            self.label == other.label
            and self.vehicle_id == other.vehicle_id
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


@dataclass
class DatasetSplit:
    train: list[SequenceSample]
    validation: list[SequenceSample]
    test: list[SequenceSample]
    split_seed: int


@dataclass
class ClassWeights:
    weights: np.ndarray  # (n_classes,)

    def __len__(self):
        return len(self.weights)


@dataclass
class ClientShard:
    client_id: int
    train: list[SequenceSample]
    test: list[SequenceSample]
    class_weights: ClassWeights

    @property
    def n_samples(self) -> int:
        return len(self.train)


@dataclass
class FeatureScaler:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


def stack(samples: Sequence[SequenceSample], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into an (N, T, F) value array and an (N,) label array."""
    if not samples:
        raise ValueError("no samples to stack")
    x = np.stack([s.values for s in samples]).astype(dtype, copy=False)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


# --------------------------------------------------------------------------
# parsing


def _parse_row(row: list[str], line: int, max_label: int) -> TraceRecord:
    if len(row) != len(CSV_HEADER):
        raise TraceFormatError(line, f"expected {len(CSV_HEADER)} fields, got {len(row)}")
    try:
        vehicle_id = int(row[0])
        msg_index = int(row[1])
        feats = tuple(float(v) for v in row[2:-1])
        label = int(row[-1])
    except ValueError as exc:
        raise TraceFormatError(line, str(exc)) from None
    if not all(math.isfinite(v) for v in feats):
        raise TraceFormatError(line, "non-finite feature value")
    if not 0 <= label <= max_label:
        raise TraceFormatError(line, f"label {label} outside [0, {max_label}]")
    return TraceRecord(vehicle_id, msg_index, feats, label)


def parse_trace_log(path: str | Path, allow_unseen: bool = False) -> list[TraceRecord]:
    """Read a trace CSV, validate every row and order by (vehicle, msg_index).

    ``allow_unseen`` admits label 20, which only generated sequences carry.
    """
    max_label = UNSEEN_LABEL if allow_unseen else N_CLASSES - 1
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise TraceFormatError(1, "unexpected header")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            records.append(_parse_row(row, line, max_label))
    records.sort(key=lambda r: (r.vehicle_id, r.msg_index))
    for prev, cur in zip(records, records[1:]):
        if prev.vehicle_id == cur.vehicle_id and prev.msg_index == cur.msg_index:
            raise TraceFormatError(0, f"duplicate msg_index {cur.msg_index} for vehicle {cur.vehicle_id}")
    return records


def write_trace_log(path: str | Path, records: Iterable[TraceRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([r.vehicle_id, r.msg_index, *(repr(float(v)) for v in r.features), r.label])


def samples_to_records(samples: Sequence[SequenceSample], label: int | None = None) -> list[TraceRecord]:
    """Flatten windows back into trace rows, one pseudo-vehicle per window."""
    out = []
    for i, s in enumerate(samples):
        lab = s.label if label is None else label
        for t, row in enumerate(s.values):
            out.append(TraceRecord(i, t, tuple(float(v) for v in row), lab))
    return out


# --------------------------------------------------------------------------
# windowing, splits, weights


def window_count(length: int, window: int, stride: int) -> int:
    if length < window:
        return 0
    return (length - window) // stride + 1


def build_windows(records: Sequence[TraceRecord], window: int = 20, stride: int = 10) -> list[SequenceSample]:
    """Slide a fixed window over each vehicle's stream.

    Streams shorter than ``window`` yield nothing. Candidate windows whose
    records carry more than one label are dropped.
    """
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    out: list[SequenceSample] = []
    i = 0
    n = len(records)
    while i < n:
        j = i
        vid = records[i].vehicle_id
        while j < n and records[j].vehicle_id == vid:
            j += 1
        stream = records[i:j]
        values = np.array([r.features for r in stream], dtype=np.float64)
        labels = np.array([r.label for r in stream])
        for start in range(0, len(stream) - window + 1, stride):
            lab = labels[start : start + window]
            if (lab != lab[0]).any():
                continue
            out.append(SequenceSample(values[start : start + window].copy(), int(lab[0]), vid))
        i = j
    return out


def _allocate(counts: np.ndarray, ratios: Sequence[float]) -> np.ndarray:
    """Integer (class x split) allocation: columns hit the largest-remainder
    totals of N*ratio, rows sum to the class counts, cells stay within 1 of
    their exact quota."""
    ratios = np.asarray(ratios, dtype=np.float64)
    n_total = int(counts.sum())
    exact_totals = n_total * ratios
    totals = np.floor(exact_totals).astype(int)
    rem = n_total - totals.sum()
    for k in np.argsort(-(exact_totals - totals), kind="stable")[:rem]:
        totals[k] += 1

    quota = counts[:, None] * ratios[None, :]
    alloc = np.floor(quota + 1e-9).astype(int)
    row_need = counts - alloc.sum(axis=1)
    col_need = totals - alloc.sum(axis=0)
    frac = quota - alloc
    # Gale-Ryser style greedy: rows with most missing units first, each takes
    # its units from the columns with the largest outstanding need.
    for c in sorted(range(len(counts)), key=lambda c: -row_need[c]):
        for _ in range(row_need[c]):
            options = [s for s in range(len(ratios)) if col_need[s] > 0]
            if not options:
                options = list(range(len(ratios)))
            s = max(options, key=lambda s: (col_need[s], frac[c, s]))
            alloc[c, s] += 1
            frac[c, s] = -1.0
            col_need[s] -= 1
        row_need[c] = 0
    return alloc


def split_dataset(
    samples: Sequence[SequenceSample],
    ratios: Sequence[float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> DatasetSplit:
    """Per-class shuffled train/validation/test split preserving imbalance."""
    if not samples:
        raise ValueError("cannot split an empty sample list")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative values summing to 1, got {ratios}")
    labels = np.array([s.label for s in samples])
    classes = np.unique(labels)
    counts = np.array([(labels == c).sum() for c in classes])
    alloc = _allocate(counts, ratios)
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for row, c in enumerate(classes):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        a, b = alloc[row, 0], alloc[row, 0] + alloc[row, 1]
        parts[0].extend(idx[:a])
        parts[1].extend(idx[a:b])
        parts[2].extend(idx[b:])
    train, val, test = ([samples[i] for i in sorted(p)] for p in parts)
    return DatasetSplit(train, val, test, seed)


def compute_class_weights(labels: Sequence[int], n_classes: int = N_CLASSES) -> ClassWeights:
    """Inverse-frequency weights N / (C_present * n_i); absent classes get 0."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("class weights need at least one label")
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    present = counts > 0
    weights = np.zeros(n_classes)
    weights[present] = labels.size / (present.sum() * counts[present])
    return ClassWeights(weights)


def normalize_fit(train: Sequence[SequenceSample]) -> FeatureScaler:
    x = np.concatenate([s.values for s in train], axis=0)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    degenerate = std < 1e-12
    mean[degenerate] = 0.0
    std[degenerate] = 1.0
    return FeatureScaler(mean, std)


def normalize_apply(scaler: FeatureScaler, samples: Sequence[SequenceSample]) -> list[SequenceSample]:
    return [SequenceSample(scaler.apply(s.values), s.label, s.vehicle_id) for s in samples]


def partition_clients(
    train: Sequence[SequenceSample],
    n_clients: int,
    jitter_fraction: float = 0.05,
    seed: int = 0,
    test: Sequence[SequenceSample] | None = None,
    n_classes: int = N_CLASSES,
) -> list[ClientShard]:
    """Random disjoint client shards with sizes uniform within +-jitter.

    Each shard keeps its samples in pool order, so a single client receives
    the pool unchanged. ``test`` (if given) is partitioned the same way to
    give every client a local test set.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if n_clients > len(train):
        raise ValueError(f"{n_clients} clients but only {len(train)} samples")
    rng = np.random.default_rng(seed)
    train_parts = _random_parts(len(train), n_clients, jitter_fraction, rng)
    if test is not None and len(test) >= n_clients:
        test_parts = _random_parts(len(test), n_clients, jitter_fraction, rng)
    else:
        test_parts = [np.arange(len(test) if test is not None else 0)] * n_clients
    shards = []
    for cid, (tr, te) in enumerate(zip(train_parts, test_parts)):
        shard_train = [train[i] for i in tr]
        shard_test = [test[i] for i in te] if test is not None else []
        weights = compute_class_weights([s.label for s in shard_train], n_classes)
        shards.append(ClientShard(cid, shard_train, shard_test, weights))
    return shards


def _random_parts(n: int, k: int, jitter: float, rng: np.random.Generator) -> list[np.ndarray]:
    if k == 1:
        return [np.arange(n)]
    raw = 1.0 + rng.uniform(-jitter, jitter, size=k) if jitter > 0 else np.ones(k)
    exact = raw / raw.sum() * n
    sizes = np.maximum(np.floor(exact).astype(int), 1)
    while sizes.sum() > n:
        sizes[np.argmax(sizes)] -= 1
    for i in np.argsort(-(exact - sizes), kind="stable")[: n - sizes.sum()]:
        sizes[i] += 1
    perm = rng.permutation(n)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return [np.sort(perm[bounds[i] : bounds[i + 1]]) for i in range(k)]


# --------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthSpec:
    n_vehicles: int = 240
    stream_length: int = 200
    class_mix: Mapping[int, float] = field(default_factory=lambda: {c: 1 / N_CLASSES for c in range(N_CLASSES)})
    dt: float = 1.0
    accel_scale: float = 0.6
    sensor_noise: float = 0.05
    area: float = 1000.0


def _class_counts(mix: Mapping[int, float], n: int) -> dict[int, int]:
    total = sum(mix.values())
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"class mix sums to {total}, expected 1")
    for c, p in mix.items():
        if not 0 <= c < N_CLASSES or p < 0:
            raise ValueError(f"invalid class mix entry {c}: {p}")
    keys = sorted(mix)
    exact = np.array([mix[c] * n for c in keys])
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return dict(zip(keys, counts.tolist()))


def _kinematic_track(rng, length, dt, accel_scale, area, speed_range=(8.0, 25.0)):
    """Smooth track: position integrates speed, speed integrates acceleration."""
    t = np.arange(length) * dt
    pos0 = rng.uniform(0, area, size=2)
    angle = rng.uniform(0, 2 * np.pi)
    vel0 = rng.uniform(*speed_range) * np.array([np.cos(angle), np.sin(angle)])
    amp = rng.normal(0, 1, size=2)
    omega = rng.uniform(0.05, 0.3)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    acl = accel_scale * amp[None, :] * np.sin(omega * t[:, None] + phase[None, :])
    vel = np.empty((length, 2))
    pos = np.empty((length, 2))
    vel[0], pos[0] = vel0, pos0
    for k in range(1, length):
        vel[k] = vel[k - 1] + acl[k - 1] * dt
        pos[k] = pos[k - 1] + vel[k - 1] * dt + 0.5 * acl[k - 1] * dt * dt
    return pos, vel, acl


def _heading(vel: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vel, axis=1, keepdims=True)
    safe = np.where(norm > 1e-9, norm, 1.0)
    hed = vel / safe
    hed[norm[:, 0] <= 1e-9] = np.array([1.0, 0.0])
    return hed


def _synth_vehicle(label: int, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    L, area = spec.stream_length, spec.area
    dos = label in (13, 14, 15, 18, 19)
    dt = spec.dt / 10 if dos else spec.dt
    slow = label == 17
    pos, vel, acl = _kinematic_track(
        rng, L, dt, spec.accel_scale, area, speed_range=(0.5, 2.0) if slow else (8.0, 25.0)
    )
    ts = rng.uniform(0, 200) + np.arange(L) * dt
    hed = _heading(vel)
    noise = spec.sensor_noise

    def neighbour():
        return _kinematic_track(rng, L, spec.dt, spec.accel_scale, area)

    # sensor noise on the honest channels; attacked channels are overwritten
    if noise > 0:
        pos = pos + rng.normal(0, noise * 10, size=pos.shape)
        vel = vel + rng.normal(0, noise, size=vel.shape)
        acl = acl + rng.normal(0, noise, size=acl.shape)
    rep_pos, rep_vel, rep_acl = pos.copy(), vel.copy(), acl.copy()

    if label == 1:
        rep_pos[:] = pos[0]
    elif label == 2:
        mag, ang = rng.uniform(50, 150), rng.uniform(0, 2 * np.pi)
        rep_pos = pos + mag * np.array([np.cos(ang), np.sin(ang)])
    elif label == 3:
        rep_pos = rng.uniform(0, area, size=pos.shape)
    elif label == 14:
        rep_pos = rng.uniform(0, area, size=pos.shape)
        rep_vel = rng.uniform(-30, 30, size=vel.shape)
    elif label == 4:
        rep_pos = pos + rng.uniform(-70, 70, size=pos.shape)
    elif label == 5:
        rep_vel[:] = vel[0]
    elif label == 6:
        mag, ang = rng.uniform(3, 8), rng.uniform(0, 2 * np.pi)
        rep_vel = vel + mag * np.array([np.cos(ang), np.sin(ang)])
    elif label == 7:
        rep_vel = rng.uniform(-30, 30, size=vel.shape)
    elif label == 8:
        rep_vel = vel + rng.uniform(-5, 5, size=vel.shape)
    elif label == 9:
        stop = int(rng.integers(0, max(1, L // 10)))
        rep_pos[stop:] = pos[stop]
        rep_vel[stop:] = 0.0
        rep_acl[stop:] = 0.0
    elif label in (10, 15):
        tracks = [neighbour() for _ in range(8)]
        pick = rng.integers(0, len(tracks), size=L)
        when = rng.integers(0, L, size=L)
        for k in range(L):
            p, v, a = tracks[pick[k]]
            rep_pos[k], rep_vel[k], rep_acl[k] = p[when[k]], v[when[k]], a[when[k]]
    elif label == 11:
        rep_pos, rep_vel, rep_acl = neighbour()
    elif label == 12:
        delay = int(rng.integers(3, 8))
        idx = np.maximum(np.arange(L) - delay, 0)
        rep_pos, rep_vel, rep_acl = pos[idx], vel[idx], acl[idx]
    elif label in (16, 19):
        a, b = neighbour(), neighbour()
        period = 5
        for k in range(L):
            p, v, ac = a if (k // period) % 2 == 0 else b
            rep_pos[k], rep_vel[k], rep_acl[k] = p[k], v[k], ac[k]
    elif label == 18:
        rep_pos = pos + rng.uniform(-30, 30, size=pos.shape)

    rep_hed = _heading(rep_vel) if label in (5, 6, 7, 8, 14) else hed
    if label in (10, 11, 15, 16, 19):
        rep_hed = _heading(rep_vel)
    return np.column_stack([ts, rep_pos, rep_vel, rep_acl, rep_hed])


def synth_corpus(spec: SynthSpec, seed: int = 0) -> list[TraceRecord]:
    """Deterministic labeled corpus of per-vehicle traces.

    Each vehicle carries a single class for its whole stream; the attacked
    channel is overwritten following the class semantics (e.g. constant
    position holds the first reported position).
    """
    counts = _class_counts(spec.class_mix, spec.n_vehicles)
    labels = np.concatenate([np.full(n, c, dtype=int) for c, n in counts.items() if n > 0])
    rng = np.random.default_rng(seed)
    labels = labels[rng.permutation(len(labels))]
    records = []
    for vid, label in enumerate(labels):
        vrng = np.random.default_rng([seed, vid])
        feats = _synth_vehicle(int(label), spec, vrng)
        for k, row in enumerate(feats):
            records.append(TraceRecord(vid, k, tuple(row.tolist()), int(label)))
    return records


def separable_samples(n: int = 200, seed: int = 0, timesteps: int = 20, features: int = 9, shift: float = 1.5) -> list[SequenceSample]:
    """Two-class toy set: class 1 has feature 3 shifted by ``shift`` at every step."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = i % 2
        x = rng.normal(0, 1, size=(timesteps, features))
        x[:, 3] += shift if label else -shift
        out.append(SequenceSample(x, label, i))
    return out
