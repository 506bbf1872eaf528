"""``fsformer`` command line: data generation, training, federation, GAN, accounting, benchmark."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace

import numpy as np
import torch

from . import config as cfgmod
from . import model as nn
from .bench import bench_inference
from .checkpoint import CheckpointError, read_checkpoint, save_checkpoint
from .fedsim import federation_privacy, run_federation
from .histgan import GanConfig, detect_unseen, generate, train_gan
from .privacy import DEFAULT_ORDERS, INTEGER_ORDERS, PrivacySpec, privacy_report
from .seqdata import (
    UNSEEN_LABEL,
    DatasetSplit,
    FeatureScaler,
    SequenceSample,
    SynthSpec,
    build_windows,
    normalize_apply,
    normalize_fit,
    parse_trace_log,
    partition_clients,
    samples_to_records,
    split_dataset,
    synth_corpus,
    write_trace_log,
)
from .trainer import evaluate, train_centralized, write_jsonl, write_metrics_csv

# flag dest -> config key
FLAG_KEYS = {
    "vehicles": "data.n_vehicles",
    "length": "data.stream_length",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.learning_rate",
    "loss": "train.loss_kind",
    "strategy": "fed.strategy",
    "mu": "fed.mu",
    "clients": "fed.n_clients",
    "rounds": "fed.rounds",
    "local_epochs": "fed.local_epochs",
    "fed_batch_size": "fed.batch_size",
    "noise": "privacy.noise",
    "clip": "privacy.clip",
    "delta": "privacy.delta",
    "seed": "seed",
    "threads": "threads",
}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# shared plumbing


def _resolve_config(args) -> cfgmod.RunConfig:
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    for dest, key in FLAG_KEYS.items():
        if getattr(args, dest, None) is not None:
            overrides[key] = getattr(args, dest)
    try:
        return cfgmod.load_config(args.config, overrides)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    except ValueError as exc:
        raise UsageError(f"bad configuration: {exc}") from None


def _records(cfg, path):
    if path:
        return parse_trace_log(path)
    spec = SynthSpec(n_vehicles=cfg.data.n_vehicles, stream_length=cfg.data.stream_length)
    return synth_corpus(spec, cfg.seed)


def _prepared_split(cfg, path):
    windows = build_windows(_records(cfg, path), cfg.data.window, cfg.data.stride)
    if not windows:
        raise ValueError("no windows could be built from the input traces")
    split = split_dataset(windows, seed=cfg.seed)
    scaler = normalize_fit(split.train)
    norm = DatasetSplit(*(normalize_apply(scaler, p) for p in (split.train, split.validation, split.test)), split.split_seed)
    return norm, scaler


def _scaler_meta(scaler: FeatureScaler) -> dict:
    return {"mean": scaler.mean.tolist(), "std": scaler.std.tolist()}


def _scaler_from(meta) -> FeatureScaler:
    return FeatureScaler(np.array(meta["scaler"]["mean"]), np.array(meta["scaler"]["std"]))


def _save_model(weights, path, model_cfg, scaler, extra=None):
    meta = {"kind": "classifier", "model": asdict(model_cfg), "scaler": _scaler_meta(scaler)}
    meta.update(extra or {})
    save_checkpoint(weights, path, meta)


def _load_model(path):
    weights, meta = read_checkpoint(path)
    if meta.get("kind") != "classifier":
        raise CheckpointError(f"{path} is not a classifier checkpoint")
    return weights, nn.ModelConfig(**meta["model"]), _scaler_from(meta)


def _emit(obj):
    print(json.dumps(obj, sort_keys=True, indent=2))


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg):
    spec = SynthSpec(n_vehicles=cfg.data.n_vehicles, stream_length=cfg.data.stream_length)
    records = synth_corpus(spec, cfg.seed)
    write_trace_log(args.out, records)
    print(f"wrote {len(records)} records for {spec.n_vehicles} vehicles to {args.out}")


def cmd_train(args, cfg):
    split, scaler = _prepared_split(cfg, args.data)
    history = []

    def on_epoch(log):
        history.append(log.to_dict())
        print(f"epoch {log.epoch}: loss={log.train_loss:.5f} val_acc={log.metrics.accuracy:.4f}", file=sys.stderr)

    weights, _ = train_centralized(split, cfg.model, replace(cfg.train, seed=cfg.seed), cfg.seed, on_epoch=on_epoch)
    if args.metrics:
        write_jsonl(args.metrics, history)
    test = evaluate(weights, split.test)
    if args.report:
        write_metrics_csv(args.report, test)
    if args.out:
        _save_model(weights, args.out, cfg.model, scaler)
    _emit({"test_accuracy": test.accuracy, "test_macro_f1": test.f1})


def cmd_eval(args, cfg):
    weights, model_cfg, scaler = _load_model(args.checkpoint)
    windows = build_windows(_records(cfg, args.data), cfg.data.window, cfg.data.stride)
    samples = windows if args.all else split_dataset(windows, seed=cfg.seed).test
    m = evaluate(weights, normalize_apply(scaler, samples))
    if args.report:
        write_metrics_csv(args.report, m)
    _emit({"n": m.n, "accuracy": m.accuracy, "precision": m.precision, "recall": m.recall, "f1": m.f1})


def cmd_fed(args, cfg):
    split, scaler = _prepared_split(cfg, args.data)
    shards = partition_clients(split.train, cfg.fed.n_clients, cfg.data.jitter, cfg.seed, test=split.test,
                               n_classes=cfg.model.classes)
    privacy = None
    if args.dp:
        privacy = PrivacySpec(noise_multiplier=cfg.privacy.noise, clip_norm=cfg.privacy.clip, delta=cfg.privacy.delta)
    rows = []

    def on_round(rep):
        rows.append(rep.to_dict())
        acc = rep.metrics.accuracy if rep.metrics is not None else float("nan")
        print(f"round {rep.round}: aggregate_acc={acc:.4f}", file=sys.stderr)

    reports = run_federation(shards, cfg.model, cfg.fed, cfg.seed, privacy, on_round=on_round)
    final = reports[-1].weights
    if args.metrics:
        write_jsonl(args.metrics, rows)
    test = evaluate(final, split.test)
    if args.report:
        write_metrics_csv(args.report, test)
    out = {"test_accuracy": test.accuracy, "test_macro_f1": test.f1}
    extra = {}
    if privacy is not None:
        report = federation_privacy(shards, cfg.fed, privacy)
        out["privacy"] = {"epsilon": report.epsilon, "delta": report.delta, "best_order": report.best_order}
        extra["privacy"] = out["privacy"]
    if args.out:
        _save_model(final, args.out, cfg.model, scaler, extra)
    _emit(out)


def cmd_gan_train(args, cfg):
    labels = {int(c) for c in args.classes.split(",")}
    windows = [w for w in build_windows(_records(cfg, args.data), cfg.data.window, cfg.data.stride) if w.label in labels]
    if not windows:
        raise ValueError(f"no windows with labels {sorted(labels)}")
    scaler = normalize_fit(windows)
    real = np.stack([s.values for s in normalize_apply(scaler, windows)])
    gan_cfg = replace(cfg.gan, timesteps=cfg.data.window, features=real.shape[-1])
    state = train_gan(real, gan_cfg, args.gan_epochs, cfg.seed)
    if args.metrics:
        write_jsonl(args.metrics, state.history)
    meta = {"kind": "generator", "gan": asdict(gan_cfg), "scaler": _scaler_meta(scaler), "classes": sorted(labels)}
    save_checkpoint(state.gen, args.out, meta)
    _emit(state.history[-1])


def cmd_gan_generate(args, cfg):
    weights, meta = read_checkpoint(args.checkpoint)
    if meta.get("kind") != "generator":
        raise CheckpointError(f"{args.checkpoint} is not a generator checkpoint")
    gan_cfg = GanConfig(**meta["gan"])
    seqs = _scaler_from(meta).invert(generate(weights, gan_cfg, args.n, cfg.seed).astype(np.float64))
    samples = [SequenceSample(s, UNSEEN_LABEL, i) for i, s in enumerate(seqs)]
    write_trace_log(args.out, samples_to_records(samples, UNSEEN_LABEL))
    print(f"wrote {args.n} generated sequences to {args.out}")


def cmd_detect_unseen(args, cfg):
    weights, _, scaler = _load_model(args.checkpoint)

    def scaled(path, unseen):
        windows = build_windows(parse_trace_log(path, allow_unseen=unseen), cfg.data.window, cfg.data.stride)
        if not windows:
            raise ValueError(f"{path}: no complete windows")
        return np.stack([scaler.apply(w.values) for w in windows])

    flags, rate = detect_unseen(weights, scaled(args.data, True), args.threshold)
    out = {"threshold": args.threshold, "n": int(len(flags)), "flagged": int(flags.sum()), "detection_rate": rate}
    if args.known:
        out["false_flag_rate"] = detect_unseen(weights, scaled(args.known, False), args.threshold)[1]
    _emit(out)


def cmd_privacy_budget(args, cfg):
    orders = INTEGER_ORDERS if args.grid == "integer" else DEFAULT_ORDERS
    spec = PrivacySpec(
        noise_multiplier=cfg.privacy.noise,
        clip_norm=cfg.privacy.clip,
        sampling_rate=args.gamma,
        rounds=args.steps,
        delta=cfg.privacy.delta,
        orders=orders,
    )
    _emit(privacy_report(spec).to_dict())


def cmd_bench(args, cfg):
    if args.checkpoint:
        weights, model_cfg, scaler = _load_model(args.checkpoint)
    else:
        model_cfg, scaler = cfg.model, None
        weights = nn.init_weights(model_cfg, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    samples = rng.normal(size=(16, model_cfg.timesteps, model_cfg.features))
    report = bench_inference(weights, samples, scaler, args.warmup, args.iterations)
    _emit({"params": nn.param_count(model_cfg), **report.summary()})


def cmd_config_keys(args, cfg):
    sys.stdout.write(cfgmod.dump_config(cfg))


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file of 'key = value' lines")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int, help="global seed (default: $FSF_SEED or 0)")
    common.add_argument("--threads", type=int, help="torch intra-op threads (default 1)")

    p = argparse.ArgumentParser(prog="fsformer", description=__doc__)
    sub = p.add_subparsers(dest="command", metavar="command")

    def data_flags(sp):
        sp.add_argument("--data", help="trace CSV (default: synthesize a corpus)")
        sp.add_argument("--vehicles", type=int)
        sp.add_argument("--length", type=int)

    sp = sub.add_parser("gen-data", parents=[common], help="write a synthetic trace CSV")
    sp.add_argument("--out", required=True)
    sp.add_argument("--vehicles", type=int)
    sp.add_argument("--length", type=int)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", parents=[common], help="centralized training")
    data_flags(sp)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--loss", choices=nn.LOSS_KINDS)
    sp.add_argument("--out", help="checkpoint path")
    sp.add_argument("--metrics", help="per-epoch JSON-lines path")
    sp.add_argument("--report", help="final per-class CSV path")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    data_flags(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--all", action="store_true", help="evaluate every window, not only the test split")
    sp.add_argument("--report")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("fed", parents=[common], help="federated training (optionally private)")
    data_flags(sp)
    sp.add_argument("--strategy", choices=("fedavg", "fedprox"))
    sp.add_argument("--mu", type=float)
    sp.add_argument("--clients", type=int)
    sp.add_argument("--rounds", type=int)
    sp.add_argument("--local-epochs", type=int)
    sp.add_argument("--batch-size", dest="fed_batch_size", type=int)
    sp.add_argument("--dp", action="store_true", help="enable DP-SGD")
    sp.add_argument("--noise", type=float)
    sp.add_argument("--clip", type=float)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--out")
    sp.add_argument("--metrics")
    sp.add_argument("--report")
    sp.set_defaults(func=cmd_fed)

    sp = sub.add_parser("gan-train", parents=[common], help="train the sequence GAN on selected classes")
    data_flags(sp)
    sp.add_argument("--classes", required=True, help="comma-separated labels to learn, e.g. 5,6,7,8")
    sp.add_argument("--epochs", dest="gan_epochs", type=int, default=50)
    sp.add_argument("--out", required=True)
    sp.add_argument("--metrics")
    sp.set_defaults(func=cmd_gan_train)

    sp = sub.add_parser("gan-generate", parents=[common], help="sample sequences to a trace CSV (label 20)")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--n", type=int, default=500)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gan_generate)

    sp = sub.add_parser("detect-unseen", parents=[common], help="flag low-confidence sequences")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="generated trace CSV")
    sp.add_argument("--known", help="trace CSV of known traffic for the false-flag rate")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.set_defaults(func=cmd_detect_unseen)

    sp = sub.add_parser("privacy-budget", parents=[common], help="RDP accountant")
    sp.add_argument("--noise", type=float)
    sp.add_argument("--clip", type=float)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--gamma", type=float, default=1.0, help="sampling rate B/n")
    sp.add_argument("--rounds", dest="steps", type=int, default=1, help="number of composed steps T")
    sp.add_argument("--grid", choices=("default", "integer"), default="default")
    sp.set_defaults(func=cmd_privacy_budget)

    sp = sub.add_parser("bench", parents=[common], help="single-sequence latency")
    sp.add_argument("--checkpoint", help="classifier checkpoint (default: fresh full-size model)")
    sp.add_argument("--warmup", type=int, default=20)
    sp.add_argument("--iterations", type=int, default=200)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("config-keys", parents=[common], help="print every config key with its value")
    sp.set_defaults(func=cmd_config_keys)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        cfg = _resolve_config(args)
        torch.set_num_threads(max(1, cfg.threads))
        args.func(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fsformer: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, CheckpointError, FloatingPointError) as exc:
        print(f"fsformer {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
