import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fsformer.seqdata import (
    CSV_HEADER,
    SequenceSample,
    SynthSpec,
    TraceFormatError,
    TraceRecord,
    build_windows,
    compute_class_weights,
    normalize_apply,
    normalize_fit,
    parse_trace_log,
    partition_clients,
    split_dataset,
    synth_corpus,
    window_count,
    write_trace_log,
)


def _records(length, label=0, vid=0, n_feat=9):
    return [TraceRecord(vid, k, tuple(float(k + j) for j in range(n_feat)), label) for k in range(length)]


def _samples(counts):
    out = []
    for label, n in counts.items():
        base = len(out)
        out.extend(SequenceSample(np.full((20, 9), float(base + i)), label, base + i) for i in range(n))
    return out


def _write(path, rows):
    path.write_text(",".join(CSV_HEADER) + "\n" + "".join(r + "\n" for r in rows))
    return path


# ---------------------------------------------------------------- parsing


def test_parse_header_only(tmp_path):
    assert parse_trace_log(_write(tmp_path / "a.csv", [])) == []


def test_parse_one_row(tmp_path):
    recs = parse_trace_log(_write(tmp_path / "a.csv", ["3,0,1.0,2,3,4,5,6,7,0.6,0.8,2"]))
    assert len(recs) == 1
    assert recs[0].features == (1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 0.6, 0.8)
    assert (recs[0].vehicle_id, recs[0].label) == (3, 2)


def test_parse_label_out_of_range_names_line(tmp_path):
    path = _write(tmp_path / "a.csv", ["0,0,1,2,3,4,5,6,7,0.6,0.8,1", "0,1,1,2,3,4,5,6,7,0.6,0.8,25"])
    with pytest.raises(TraceFormatError, match="line 3"):
        parse_trace_log(path)


@pytest.mark.parametrize("row", [
    "0,0,1,2,3,4,5,6,7,0.6,0.8",  # short
    "0,0,1,2,3,nan,5,6,7,0.6,0.8,1",
    "0,0,1,2,3,inf,5,6,7,0.6,0.8,1",
    "0,0,1,2,x,4,5,6,7,0.6,0.8,1",
])
def test_parse_rejects_malformed(tmp_path, row):
    with pytest.raises(TraceFormatError, match="line 2"):
        parse_trace_log(_write(tmp_path / "a.csv", [row]))


def test_parse_rejects_repeated_msg_index(tmp_path):
    path = _write(tmp_path / "a.csv", ["0,4,1,2,3,4,5,6,7,0.6,0.8,1", "0,4,1,2,3,4,5,6,7,0.6,0.8,1"])
    with pytest.raises(TraceFormatError):
        parse_trace_log(path)


def test_parse_unseen_label_only_when_allowed(tmp_path):
    path = _write(tmp_path / "a.csv", ["0,0,1,2,3,4,5,6,7,0.6,0.8,20"])
    with pytest.raises(TraceFormatError):
        parse_trace_log(path)
    assert parse_trace_log(path, allow_unseen=True)[0].label == 20


def test_parse_orders_by_vehicle_then_index(tmp_path):
    rows = ["1,1,0,0,0,0,0,0,0,1,0,0", "0,5,0,0,0,0,0,0,0,1,0,0", "1,0,0,0,0,0,0,0,0,1,0,0", "0,2,0,0,0,0,0,0,0,1,0,0"]
    recs = parse_trace_log(_write(tmp_path / "a.csv", rows))
    assert [(r.vehicle_id, r.msg_index) for r in recs] == [(0, 2), (0, 5), (1, 0), (1, 1)]


def test_write_parse_roundtrip(tmp_path):
    recs = synth_corpus(SynthSpec(n_vehicles=4, stream_length=7), seed=3)
    write_trace_log(tmp_path / "c.csv", recs)
    assert parse_trace_log(tmp_path / "c.csv") == recs


# ---------------------------------------------------------------- windows


def test_window_examples():
    w = build_windows(_records(50))
    assert len(w) == 4
    assert [s.values[0, 0] for s in w] == [0.0, 10.0, 20.0, 30.0]
    assert build_windows(_records(19)) == []
    (only,) = build_windows(_records(20))
    assert np.array_equal(only.values, np.array([r.features for r in _records(20)]))


def test_window_count_law_exhaustive():
    # brute force: enumerate every start position that fits
    for length in range(0, 101):
        for window in range(1, 31):
            for stride in range(1, 31):
                brute = sum(1 for s in range(0, length, stride) if s + window <= length)
                assert window_count(length, window, stride) == brute == max(0, (length - window) // stride + 1 if length >= window else 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100), st.integers(1, 30), st.integers(1, 30))
def test_build_windows_matches_law(length, window, stride):
    assert len(build_windows(_records(length, n_feat=2), window, stride)) == window_count(length, window, stride)


def test_mixed_label_windows_dropped():
    recs = [TraceRecord(0, k, (float(k),), 0 if k < 25 else 1) for k in range(50)]
    labels = [(s.values[0, 0], s.label) for s in build_windows(recs, 20, 10)]
    # starts 0 (all 0), 10 (mixed), 20 (mixed), 30 (all 1)
    assert labels == [(0.0, 0), (30.0, 1)]


def test_windows_do_not_cross_vehicles():
    recs = _records(15, vid=0) + _records(15, vid=1)
    assert build_windows(recs, 20, 10) == []


# ---------------------------------------------------------------- splits


def test_split_one_class():
    s = split_dataset(_samples({0: 1000}), seed=1)
    assert (len(s.train), len(s.validation), len(s.test)) == (700, 150, 150)


def test_split_two_classes():
    s = split_dataset(_samples({0: 800, 1: 200}), seed=1)
    counts = [sum(x.label == c for x in s.train) for c in (0, 1)]
    assert counts == [560, 140]


def test_split_deterministic():
    data = _samples({0: 60, 1: 33, 2: 7})
    a, b = split_dataset(data, seed=5), split_dataset(data, seed=5)
    assert [x.vehicle_id for x in a.train] == [x.vehicle_id for x in b.train]
    assert [x.vehicle_id for x in a.test] == [x.vehicle_id for x in b.test]
    c = split_dataset(data, seed=6)
    assert [x.vehicle_id for x in a.train] != [x.vehicle_id for x in c.train]


def test_split_rejects_empty_and_bad_ratios():
    with pytest.raises(ValueError):
        split_dataset([])
    with pytest.raises(ValueError):
        split_dataset(_samples({0: 5}), ratios=(0.5, 0.2, 0.2))


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(1, 60), min_size=1, max_size=6), st.integers(0, 2**16))
def test_split_conservation(class_sizes, seed):
    data = _samples(dict(enumerate(class_sizes)))
    s = split_dataset(data, seed=seed)
    n = len(data)
    assert len(s.train) + len(s.validation) + len(s.test) == n
    ids = [x.vehicle_id for part in (s.train, s.validation, s.test) for x in part]
    assert sorted(ids) == sorted(x.vehicle_id for x in data)
    for part, r in zip((s.train, s.validation, s.test), (0.7, 0.15, 0.15)):
        assert abs(len(part) - r * n) <= 1
        for c, size in enumerate(class_sizes):
            assert abs(sum(x.label == c for x in part) - r * size) <= 2
    for c, size in enumerate(class_sizes):
        assert sum(x.label == c for part in (s.train, s.validation, s.test) for x in part) == size


# ---------------------------------------------------------------- class weights


def test_class_weight_examples():
    assert np.allclose(compute_class_weights([0] * 100 + [1] * 100, 2).weights, [1.0, 1.0])
    assert np.allclose(compute_class_weights([0] * 100 + [1] * 50, 2).weights, [0.75, 1.5])
    assert np.array_equal(compute_class_weights([0] * 100, 2).weights, [1.0, 0.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 19), min_size=1, max_size=300))
def test_class_weight_identity(labels):
    w = compute_class_weights(labels).weights
    counts = np.bincount(labels, minlength=20)
    assert np.isclose((counts * w).sum(), len(labels), rtol=1e-12)
    assert np.all(w[counts == 0] == 0) and np.all(w[counts > 0] > 0)


# ---------------------------------------------------------------- normalization


def test_normalize_constant_feature_passthrough():
    data = [SequenceSample(np.column_stack([np.full(20, 3.0), np.arange(20.0)]), 0)]
    out = normalize_apply(normalize_fit(data), data)[0]
    assert np.array_equal(out.values[:, 0], data[0].values[:, 0])


def test_normalize_arithmetic():
    # one feature with mean 5 and population stdev 2
    vals = np.array([3.0, 7.0] * 10)[:, None]
    scaler = normalize_fit([SequenceSample(vals, 0)])
    assert np.isclose(scaler.apply(np.array([[9.0]]))[0, 0], 2.0)


def test_normalize_standardizes_train():
    rng = np.random.default_rng(0)
    data = [SequenceSample(rng.normal(3, 7, size=(20, 9)), 0) for _ in range(30)]
    x = np.concatenate([s.values for s in normalize_apply(normalize_fit(data), data)])
    assert np.allclose(x.mean(axis=0), 0, atol=1e-9)
    assert np.allclose(x.std(axis=0), 1, atol=1e-9)


# ---------------------------------------------------------------- synthetic corpus


def _stream(recs):
    return np.array([r.features for r in recs])


def test_synth_constant_position():
    recs = synth_corpus(SynthSpec(n_vehicles=1, stream_length=40, class_mix={1: 1.0}), seed=2)
    x = _stream(recs)
    assert len(recs) == 40 and all(r.label == 1 for r in recs)
    assert np.all(x[:, 1] == x[0, 1]) and np.all(x[:, 2] == x[0, 2])


def test_synth_normal_zero_acceleration_is_linear():
    spec = SynthSpec(n_vehicles=1, stream_length=40, class_mix={0: 1.0}, accel_scale=0.0, sensor_noise=0.0)
    x = _stream(synth_corpus(spec, seed=4))
    assert np.allclose(x[:, 3:5], x[0, 3:5])
    t = np.arange(40) * spec.dt
    assert np.allclose(x[:, 1:3], x[0, 1:3] + t[:, None] * x[0, 3:5])


def test_synth_random_speed_varies():
    x = _stream(synth_corpus(SynthSpec(n_vehicles=1, stream_length=40, class_mix={7: 1.0}), seed=0))
    assert np.all(np.abs(x[:, 3:5]) <= 30)
    assert np.std(np.diff(x[:, 3])) > 5


def test_synth_deterministic(tmp_path):
    spec = SynthSpec(n_vehicles=25, stream_length=30)
    write_trace_log(tmp_path / "a.csv", synth_corpus(spec, seed=9))
    write_trace_log(tmp_path / "b.csv", synth_corpus(spec, seed=9))
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_synth_bad_mix():
    with pytest.raises(ValueError):
        synth_corpus(SynthSpec(class_mix={0: 0.5, 1: 0.4}))


def test_synth_all_finite_and_labelled():
    recs = synth_corpus(SynthSpec(n_vehicles=40, stream_length=25), seed=1)
    x = _stream(recs)
    assert np.isfinite(x).all()
    assert {r.label for r in recs} == set(range(20))


# ---------------------------------------------------------------- clients


def test_partition_single_client_is_pool():
    pool = _samples({0: 30, 1: 20})
    (shard,) = partition_clients(pool, 1, seed=3)
    assert shard.train == pool


def test_partition_even_split():
    shards = partition_clients(_samples({0: 1000, 3: 1000}), 20, jitter_fraction=0.0, seed=0)
    assert [s.n_samples for s in shards] == [100] * 20


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 1000), st.floats(0, 0.2))
def test_partition_is_partition(k, seed, jitter):
    pool = _samples({0: 50, 1: 30, 2: 20})
    shards = partition_clients(pool, k, jitter, seed)
    ids = [x.vehicle_id for s in shards for x in s.train]
    assert sorted(ids) == sorted(x.vehicle_id for x in pool)
    assert len(ids) == len(set(ids))
    assert all(s.n_samples > 0 for s in shards)
    mean = len(pool) / k
    for s in shards:
        assert abs(s.n_samples - mean) <= jitter * mean * 1.2 + 1
        labels = [x.label for x in s.train]
        assert np.allclose(s.class_weights.weights, compute_class_weights(labels).weights)


def test_partition_too_many_clients():
    with pytest.raises(ValueError):
        partition_clients(_samples({0: 3}), 4)
