"""Command-line surface: preprocess, synth, train, evaluate, bench.

Configuration resolves defaults -> JSON config file -> explicit flags,
and the fully resolved config is echoed into every output artifact.
Commands either complete and write their outputs at the end, or fail
with a nonzero exit code and leave nothing behind.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import bench as bench_mod
from . import evaluation, ingest, train as train_mod, xmd
from .errors import GazeSsmError
from .metrics import compute_metrics
from .model import ModelConfig, load_checkpoint, predict_probs
from .train import TrainConfig

logger = logging.getLogger("gazessm")

PIPELINE_DEFAULTS = {
    "sample_rate": 50.0,
    "window_seconds": 10.0,
    "mask_mode": "change",
    "eps": 1e-8,
    "label_threshold": 5,
    "label_interval_seconds": 10.0,
}


def _load_config_file(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _merge(defaults: dict, file_section: dict, overrides: dict) -> dict:
    out = dict(defaults)
    for k, v in (file_section or {}).items():
        if k not in out:
            raise GazeSsmError(f"unknown config key {k!r} (have {sorted(out)})")
        out[k] = v
    for k, v in overrides.items():
        if v is not None:
            out[k] = v
    return out


def _write_json(path, obj):
    xmd._atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _add_model_flags(p):
    p.add_argument("--input-dim", type=int, default=None)
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--d-state", type=int, default=None)
    p.add_argument("--d-conv", type=int, default=None)
    p.add_argument("--expand", type=int, default=None)
    p.add_argument("--layers", type=int, default=None, help="layers per direction")
    p.add_argument("--dropout", type=float, default=None)


def _add_train_flags(p):
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--val-fraction", type=float, default=None)
    p.add_argument("--early-stop-metric", choices=["accuracy", "auc"], default=None)
    p.add_argument("--weighting-mode", choices=list(train_mod.WEIGHTING_MODES), default=None)


def _resolve_model_cfg(args, cfg_file, seed) -> ModelConfig:
    section = _merge(
        ModelConfig().to_dict(),
        cfg_file.get("model", {}),
        {
            "input_dim": args.input_dim,
            "d_model": args.d_model,
            "d_state": args.d_state,
            "d_conv": args.d_conv,
            "expand": args.expand,
            "layers_per_direction": args.layers,
            "dropout": args.dropout,
            "seed": seed,
        },
    )
    return ModelConfig.from_dict(section)


def _resolve_train_cfg(args, cfg_file, seed) -> TrainConfig:
    section = _merge(
        TrainConfig().to_dict(),
        cfg_file.get("train", {}),
        {
            "lr": args.lr,
            "weight_decay": args.weight_decay,
            "batch_size": args.batch_size,
            "max_epochs": args.max_epochs,
            "clip_norm": args.clip_norm,
            "patience": args.patience,
            "val_fraction": args.val_fraction,
            "early_stop_metric": args.early_stop_metric,
            "weighting_mode": args.weighting_mode,
            "seed": seed,
        },
    )
    return TrainConfig.from_dict(section)


def _resolve_seed(args, cfg_file) -> int:
    if args.seed is not None:
        return args.seed
    return int(cfg_file.get("seed", 0))


# -- subcommands -----------------------------------------------------------------


def cmd_preprocess(args) -> int:
    cfg_file = _load_config_file(args.config)
    pipeline = _merge(
        PIPELINE_DEFAULTS,
        cfg_file.get("pipeline", {}),
        {
            "sample_rate": args.rate,
            "window_seconds": args.window_seconds,
            "mask_mode": args.mask_mode,
            "eps": args.eps,
            "label_threshold": args.label_threshold,
        },
    )
    profile = args.profile
    raw_dir = args.raw_dir
    participants = sorted(
        d for d in os.listdir(raw_dir) if os.path.isdir(os.path.join(raw_dir, d))
    ) if os.path.isdir(raw_dir) else []
    if not participants:
        raise GazeSsmError(f"{raw_dir}: no participant directories found")

    all_windows = []
    provenance = {}
    for pid in participants:
        pdir = os.path.join(raw_dir, pid)
        for name in ("experiment.csv", "baseline.csv", "labels.csv"):
            if not os.path.exists(os.path.join(pdir, name)):
                raise GazeSsmError(f"participant {pid}: missing {name}")
        baseline_rec = ingest.parse_recording(
            os.path.join(pdir, "baseline.csv"), profile, pid, session_kind="baseline"
        )
        base = ingest.baseline_stats(ingest.coalesce_timestamps(baseline_rec))
        experiment_rec = ingest.parse_recording(
            os.path.join(pdir, "experiment.csv"), profile, pid, session_kind="experiment"
        )
        ratings = ingest.parse_label_track(
            os.path.join(pdir, "labels.csv"),
            profile,
            interval_seconds=pipeline["label_interval_seconds"],
        )
        labels = xmd.LabelTrack(
            interval_seconds=pipeline["label_interval_seconds"],
            ratings=ratings,
            threshold=pipeline["label_threshold"],
        )
        windows, prov = xmd.build_windows(
            experiment_rec,
            base,
            labels,
            rate=pipeline["sample_rate"],
            window_seconds=pipeline["window_seconds"],
            eps=pipeline["eps"],
            mask_mode=pipeline["mask_mode"],
        )
        logger.info("participant %s: %d windows (%d dropped)", pid, len(windows), prov["dropped_windows"])
        all_windows.extend(windows)
        provenance[pid] = prov

    if not all_windows:
        raise GazeSsmError("preprocessing produced no windows")
    manifest_path = xmd.serialize_windows(
        all_windows, args.out, pipeline_params=pipeline, schema_profile=profile, provenance=provenance
    )
    ingest.write_profile_sidecar(profile, os.path.join(args.out, "schema_profile.json"))
    print(manifest_path)
    return 0


def cmd_synth(args) -> int:
    cfg_file = _load_config_file(args.config)
    seed = _resolve_seed(args, cfg_file)
    section = _merge(
        evaluation.SynthSpec().to_dict(),
        cfg_file.get("synth", {}),
        {
            "participants": args.participants,
            "windows_per_participant": args.windows,
            "t_steps": args.t_steps,
            "separation": args.separation,
            "burst_rate_low": args.burst_low,
            "burst_rate_high": args.burst_high,
            "seed": seed,
        },
    )
    spec = evaluation.SynthSpec(**section)
    windows, meta = evaluation.generate_synthetic(spec)
    manifest_path = xmd.serialize_windows(
        windows, args.out, pipeline_params=meta, schema_profile="synthetic"
    )
    print(manifest_path)
    return 0


def _build_splits(args, participants, seed):
    if args.protocol == "loso":
        return evaluation.make_loso_splits(participants)
    if args.protocol == "kfold":
        return evaluation.make_kfold_splits(participants, args.k, seed=seed)
    raise GazeSsmError(f"unknown protocol {args.protocol!r}")


def cmd_train(args) -> int:
    cfg_file = _load_config_file(args.config)
    seed = _resolve_seed(args, cfg_file)
    model_cfg = _resolve_model_cfg(args, cfg_file, seed)
    train_cfg = _resolve_train_cfg(args, cfg_file, seed)
    windows, manifest = xmd.load_windows(args.manifest)
    model_cfg.input_dim = manifest["width"]
    participants = sorted({w.participant_id for w in windows})
    splits = _build_splits(args, participants, seed)

    os.makedirs(args.out, exist_ok=True)
    report, artifacts = evaluation.run_protocol(
        windows, splits, train_cfg, model_cfg, checkpoint_dir=os.path.join(args.out, "folds")
    )
    for split in splits:
        art = artifacts.get(split.fold_id)
        if art is None:
            continue
        fold_dir = os.path.join(args.out, "folds", f"fold_{split.fold_id:03d}")
        _write_json(
            os.path.join(fold_dir, "artifacts.json"),
            {
                "fold_id": split.fold_id,
                "protocol": split.protocol,
                "test_participants": split.test_participants,
                "threshold": art.threshold,
                "flip": art.flip,
                "pos_weight": art.pos_weight,
                "best_epoch": art.best_epoch,
                "epochs_run": art.epochs_run,
                "trace": art.trace,
            },
        )
    run_config = {
        "manifest": os.path.abspath(args.manifest),
        "protocol": args.protocol,
        "k": args.k,
        "seed": seed,
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
    }
    _write_json(os.path.join(args.out, "run_config.json"), run_config)
    report["run_config"] = run_config
    _write_json(os.path.join(args.out, "report.json"), report)
    agg = report["aggregate"]["accuracy"]
    logger.info("aggregate accuracy: %s", agg)
    print(os.path.join(args.out, "report.json"))
    return 0


def cmd_evaluate(args) -> int:
    windows, _ = xmd.load_windows(args.manifest)
    run_config_path = os.path.join(args.artifacts, "run_config.json")
    if not os.path.exists(run_config_path):
        raise GazeSsmError(f"{args.artifacts}: missing run_config.json (run `train` first)")
    with open(run_config_path, "r", encoding="utf-8") as fh:
        run_config = json.load(fh)
    folds_dir = os.path.join(args.artifacts, "folds")
    fold_names = sorted(d for d in os.listdir(folds_dir) if d.startswith("fold_"))
    if not fold_names:
        raise GazeSsmError(f"{folds_dir}: no fold artifacts")

    by_pid: dict = {}
    for w in windows:
        by_pid.setdefault(w.participant_id, []).append(w)

    fold_reports = []
    for name in fold_names:
        fold_dir = os.path.join(folds_dir, name)
        with open(os.path.join(fold_dir, "artifacts.json"), "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
        params = load_checkpoint(os.path.join(fold_dir, "checkpoint.bin"))
        test_windows = [w for p in sidecar["test_participants"] for w in by_pid.get(p, [])]
        if not test_windows:
            raise GazeSsmError(f"{name}: manifest has no windows for its test participants")
        z = np.stack([w.z for w in test_windows]).astype(np.float32)
        y = np.asarray([w.label for w in test_windows], dtype=np.int64)
        probs = predict_probs(z, params)
        rep = compute_metrics(probs, y, threshold=sidecar["threshold"], flip=sidecar["flip"])
        fold_reports.append(
            {
                "fold_id": sidecar["fold_id"],
                "test_participants": sidecar["test_participants"],
                "n_test": len(test_windows),
                **rep.to_dict(),
            }
        )

    report = {
        "schema_version": evaluation.REPORT_VERSION,
        "protocol": run_config.get("protocol"),
        "n_folds": len(fold_reports),
        "run_config": run_config,
        "folds": fold_reports,
        "aggregate": {
            key: evaluation._aggregate(fold_reports, key)
            for key in ("accuracy", "auc", "f1_positive", "f1_negative", "f1_macro")
        },
    }
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "report.json")
    _write_json(out_path, report)
    print(out_path)
    return 0


def _make_power_sampler(spec: str):
    if spec == "null":
        return bench_mod.NullPowerSampler()
    if spec.startswith("constant:"):
        return bench_mod.ConstantPowerSampler(float(spec.split(":", 1)[1]))
    if spec.startswith("file:"):
        return bench_mod.FilePowerSampler(spec.split(":", 1)[1])
    raise GazeSsmError(f"unknown power source {spec!r} (null | constant:<W> | file:<path>)")


def cmd_bench(args) -> int:
    cfg_file = _load_config_file(args.config)
    seed = _resolve_seed(args, cfg_file)
    params = load_checkpoint(args.checkpoint)
    section = _merge(
        bench_mod.BenchConfig().to_dict(),
        cfg_file.get("bench", {}),
        {
            "batch_size": args.batch,
            "warmup_iterations": args.warmup,
            "iterations": args.iterations,
            "power_interval_ms": args.power_interval_ms,
            "t_steps": args.t_steps,
            "seed": seed,
        },
    )
    section["input_dim"] = params.config.input_dim
    cfg = bench_mod.BenchConfig(**section)
    report = bench_mod.benchmark_inference(params, cfg, power=_make_power_sampler(args.power))
    text = json.dumps(report, sort_keys=True, indent=1)
    if args.out:
        xmd._atomic_write_text(args.out, text + "\n")
        print(args.out)
    else:
        print(text)
    return 0


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gazessm",
        description="Missingness-aware eye-tracking classification toolkit",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override every seed")

    p = sub.add_parser("preprocess", help="raw CSVs -> XMD window manifest")
    common(p)
    p.add_argument("--raw-dir", required=True)
    p.add_argument("--profile", choices=sorted(ingest.SCHEMA_PROFILES), default="generic")
    p.add_argument("--out", required=True)
    p.add_argument("--rate", type=float, default=None)
    p.add_argument("--window-seconds", type=float, default=None)
    p.add_argument("--mask-mode", choices=["change", "arrival"], default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--label-threshold", type=int, default=None)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate a synthetic window manifest")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--participants", type=int, default=None)
    p.add_argument("--windows", type=int, default=None, help="windows per participant")
    p.add_argument("--t-steps", type=int, default=None)
    p.add_argument("--separation", type=float, default=None)
    p.add_argument("--burst-low", type=float, default=None)
    p.add_argument("--burst-high", type=float, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train folds under a CV protocol")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--protocol", choices=["loso", "kfold"], default="loso")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="recompute metrics from trained fold artifacts")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--artifacts", required=True, help="a `train` output directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="inference latency/throughput benchmark")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--t-steps", type=int, default=None)
    p.add_argument("--power-interval-ms", type=float, default=None)
    p.add_argument("--power", default="null", help="null | constant:<W> | file:<path>")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except GazeSsmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
