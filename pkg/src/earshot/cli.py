"""Command-line interface: synth, train, predict, evaluate, sweep.

Every command is deterministic under --seed. Exit codes: 0 success,
2 config error, 3 data/format error, 4 numeric failure. The EARSHOT_LOG
environment variable sets the log level (default INFO).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .conditioning import ConditioningStats
from .data import (_config_from_kv, config_to_kv, load_dataset, load_manifest,
                   load_model_config, load_sidecar, load_train_config, parse_kv,
                   read_predictions_csv, save_sidecar, write_predictions_csv)
from .errors import ConfigError, DataError, NumericError
from .experiments import EvalRecord, SweepSpec, run_sweep, scene_histogram, stratify
from .model import ModelConfig, build_model
from .synthetic import SynthSpec, generate_dataset
from .tensor import load_checkpoint, save_checkpoint
from .training import (TrainConfig, ensemble_predict_scores, make_folds,
                       rmse_metric, train_fold)

log = logging.getLogger("earshot")


def _require_jobs_serial(args) -> None:
    if getattr(args, "jobs", 1) != 1:
        log.warning("--jobs %d requested; this build runs cells serially", args.jobs)


# ---------------------------------------------------------------------------
# synth


def _load_synth_spec(path) -> SynthSpec:
    with open(path) as f:
        return _config_from_kv(SynthSpec, parse_kv(f.read(), str(path)), str(path))


def cmd_synth(args) -> int:
    spec = _load_synth_spec(args.config)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = generate_dataset(spec, out)
    print(f"wrote {spec.n_utterances} utterances to {manifest}")
    return 0


# ---------------------------------------------------------------------------
# train


def _fold_sidecar(result, mcfg: ModelConfig, tcfg: TrainConfig) -> dict:
    values = {"fold": result.fold, "best_epoch": result.best_epoch,
              "val_rmse": f"{result.best_val_rmse:.6f}"}
    for key, v in config_to_kv(mcfg).items():
        values[f"model.{key}"] = v
    for key, v in config_to_kv(tcfg).items():
        values[f"train.{key}"] = v
    if result.stats is not None:
        values["stats.mean"] = ",".join(repr(float(x)) for x in result.stats.mean)
        values["stats.std"] = ",".join(repr(float(x)) for x in result.stats.std)
    return values


def write_fold_plan(path, folds, seed: int) -> None:
    doc = {"seed": seed, "folds": [{"index": f.index,
                                    "val_listeners": list(f.val_listeners),
                                    "train_listeners": list(f.train_listeners)}
                                   for f in folds]}
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def cmd_train(args) -> int:
    # fail fast: both configs must parse and validate before any data loads
    mcfg = load_model_config(args.model_config)
    tcfg = load_train_config(args.train_config)
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)

    utts, profiles = load_dataset(args.manifest, mcfg, args.listeners)
    for u in utts:
        if u.label is None:
            raise DataError(f"utterance {u.utterance_id}: training needs labels")
    folds = make_folds(profiles, n_folds=5, seed=tcfg.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_fold_plan(out / "fold_plan.json", folds, tcfg.seed)

    report_rows = []
    for fold in folds:
        train_set = [u for u in utts if u.listener_id in fold.train_listeners]
        val_set = [u for u in utts if u.listener_id in fold.val_listeners]
        result = train_fold(mcfg, tcfg, train_set, val_set, profiles,
                            fold_index=fold.index, log_fn=log.info)
        save_checkpoint(result.store, out / f"fold_{fold.index}.ckpt")
        save_sidecar(out / f"fold_{fold.index}.meta", _fold_sidecar(result, mcfg, tcfg))
        print(f"fold {fold.index}: best val RMSE {result.best_val_rmse:.6f} "
              f"(epoch {result.best_epoch})")
        report_rows.append((fold.index, result.best_epoch, result.best_val_rmse))

    with open(out / "folds.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("fold", "best_epoch", "val_rmse"))
        for fold_index, epoch, rmse in report_rows:
            w.writerow((fold_index, epoch, f"{rmse:.6f}"))
    print(f"wrote {len(folds)} checkpoints to {out}")
    return 0


# ---------------------------------------------------------------------------
# predict


def _split_section(sidecar: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in sidecar.items() if k.startswith(prefix)}


def _load_member(ckpt_path: Path) -> tuple[dict, dict, ConditioningStats | None]:
    meta_path = ckpt_path.with_suffix(".meta")
    if not meta_path.exists():
        raise DataError(f"{ckpt_path}: missing sidecar {meta_path}")
    sidecar = load_sidecar(meta_path)
    model_kv = _split_section(sidecar, "model.")
    if not model_kv:
        raise DataError(f"{meta_path}: sidecar has no model.* section")
    stats = None
    if "stats.mean" in sidecar:
        stats = ConditioningStats(
            np.array([float(x) for x in sidecar["stats.mean"].split(",")]),
            np.array([float(x) for x in sidecar["stats.std"].split(",")]))
    state = load_checkpoint(ckpt_path)
    return model_kv, state, stats


def cmd_predict(args) -> int:
    members_raw = [_load_member(Path(p)) for p in args.checkpoints]
    first_kv = members_raw[0][0]
    for path, (kv, _, _) in zip(args.checkpoints[1:], members_raw[1:]):
        if kv != first_kv:
            diff = sorted(k for k in set(kv) | set(first_kv)
                          if kv.get(k) != first_kv.get(k))
            raise ConfigError(f"checkpoint {path} disagrees with {args.checkpoints[0]} "
                              f"on model config keys: {diff}")
    cfg = _config_from_kv(ModelConfig, first_kv, f"{args.checkpoints[0]} sidecar")

    utts, profiles = load_dataset(args.manifest, cfg, args.listeners)
    members = []
    for (_, state, stats), path in zip(members_raw, args.checkpoints):
        store = build_model(cfg, np.random.default_rng(0))
        store.load_state(state)
        members.append((store, stats))

    scores = ensemble_predict_scores(members, cfg, utts, profiles)
    if not np.all(np.isfinite(scores)):
        bad = [utts[i].utterance_id for i in np.nonzero(~np.isfinite(scores).all(axis=1))[0]]
        raise NumericError(f"non-finite predictions for utterances: {bad}")

    rows = [{"utterance_id": u.utterance_id, "listener_id": u.listener_id,
             "scene_id": u.scene_id, "system_id": u.system_id, "label": u.label,
             "score_left": s[0], "score_right": s[1], "prediction": s[2]}
            for u, s in zip(utts, scores)]
    write_predictions_csv(args.out, rows)
    print(f"wrote {len(rows)} predictions from {len(members)} checkpoint(s) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _join_records(preds: list[dict], manifest: dict) -> list[EvalRecord]:
    truth = {u["utterance_id"]: u for u in manifest["utterances"]}
    pred_ids = {r["utterance_id"] for r in preds}
    missing_truth = sorted(pred_ids - set(truth))
    missing_preds = sorted(set(truth) - pred_ids)
    if missing_truth or missing_preds:
        raise DataError("prediction/manifest id mismatch; "
                        f"not in manifest: {missing_truth}; "
                        f"not in predictions: {missing_preds}")
    records = []
    for r in preds:
        u = truth[r["utterance_id"]]
        if u.get("label") is None:
            raise DataError(f"utterance {u['utterance_id']}: evaluation needs a label")
        records.append(EvalRecord(r["utterance_id"], r["prediction"], float(u["label"]),
                                  u.get("listener_id", ""), u.get("system_id", ""),
                                  u.get("scene_id", "")))
    return records


def cmd_evaluate(args) -> int:
    preds = read_predictions_csv(args.predictions)
    manifest = load_manifest(args.manifest)
    records = _join_records(preds, manifest)
    overall = rmse_metric(np.array([r.prediction for r in records]),
                          np.array([r.label for r in records]))
    print(f"overall RMSE {overall:.6f} over {len(records)} utterances")

    out = Path(args.out) if args.out else Path(args.predictions).parent
    out.mkdir(parents=True, exist_ok=True)

    if args.train_manifest:
        train_doc = load_manifest(args.train_manifest)
        train_listeners = {u["listener_id"] for u in train_doc["utterances"]}
        train_systems = {u.get("system_id", "") for u in train_doc["utterances"]} - {""}
        reports = stratify(records, train_listeners, train_systems)
        with open(out / "stratified.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("group", "identity", "rmse", "n"))
            for name in ("system_seen", "system_unseen", "listener_seen", "listener_unseen"):
                rep = reports[name]
                for g in rep.groups:
                    w.writerow((name, g.label, f"{g.rmse:.6f}", g.n))
                w.writerow((name, "(pooled)", f"{rep.pooled:.6f}", rep.n))
                print(f"{name}: pooled RMSE {rep.pooled:.6f} (n={rep.n})")

    if any(r.scene_id for r in records):
        hist = scene_histogram(records)
        with open(out / "scene_rmse.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("scene_id", "rmse", "n"))
            for sid, rmse, n in hist.scene_rmse:
                w.writerow((sid, f"{rmse:.6f}", n))
        with open(out / "scene_histogram.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("bin_lo", "bin_hi", "count"))
            for i, count in enumerate(hist.bin_counts):
                w.writerow((f"{hist.bin_edges[i]:.6f}", f"{hist.bin_edges[i + 1]:.6f}", count))
        print(f"scene RMSE tail share above {hist.tail_threshold:g}: {hist.tail_share:.6f}")
    return 0


# ---------------------------------------------------------------------------
# sweep


def _parse_window(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition("-")
    if not sep:
        raise ConfigError(f"window '{text}' must look like 'lo-hi'")
    try:
        return int(lo), int(hi)
    except ValueError:
        raise ConfigError(f"window '{text}' must be two integers") from None


def _load_sweep_spec(path) -> tuple[SweepSpec, int]:
    with open(path) as f:
        kv = parse_kv(f.read(), str(path))
    unknown = set(kv) - {"window_size", "candidates", "readouts", "n_train"}
    if unknown:
        raise ConfigError(f"{path}: unknown sweep keys {sorted(unknown)}")
    for key in ("window_size", "candidates", "n_train"):
        if key not in kv:
            raise ConfigError(f"{path}: sweep config needs '{key}'")
    spec = SweepSpec(
        window_size=int(kv["window_size"]),
        candidates=tuple(_parse_window(w) for w in kv["candidates"].split()),
        readouts=tuple(r.strip() for r in kv.get("readouts", "mean").split(",") if r.strip()),
    )
    return spec, int(kv["n_train"])


def cmd_sweep(args) -> int:
    sweep, n_train = _load_sweep_spec(args.config)
    mcfg = load_model_config(args.model_config)
    tcfg = load_train_config(args.train_config)
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    _require_jobs_serial(args)

    def dataset_for(cfg: ModelConfig):
        return load_dataset(args.manifest, cfg, args.listeners)

    report = run_sweep(sweep, mcfg, tcfg, n_train, dataset_for, log_fn=log.info)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("window", "readout", "val_rmse", "error"))
        for r in report.rows:
            rmse = "" if r.val_rmse is None else f"{r.val_rmse:.6f}"
            w.writerow((f"{r.window[0]}-{r.window[1]}", r.readout, rmse, r.error))
    best = report.argmin()
    print(f"argmin: window {best.window[0]}-{best.window[1]} readout {best.readout} "
          f"val RMSE {best.val_rmse:.6f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="earshot",
        description="Intrusive binaural speech-intelligibility prediction "
                    "from frozen speech-foundation-model features.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help: str):
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel cells (default 1, deterministic)")
        p.add_argument("--out", required=True, help=out_help)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", required=True, help="SynthSpec key=value file")
    common(p, "output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="5-fold listener-level cross-validation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--listeners", default=None,
                   help="listeners.json (default: next to the manifest)")
    p.add_argument("--model-config", required=True, help="ModelConfig key=value file")
    p.add_argument("--train-config", required=True, help="TrainConfig key=value file")
    common(p, "output directory for checkpoints and reports")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score a manifest with checkpoint(s)")
    p.add_argument("checkpoints", nargs="+", help="one or more .ckpt files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--listeners", default=None)
    common(p, "output prediction CSV path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="RMSE report for a prediction CSV")
    p.add_argument("--predictions", required=True, help="CSV from `earshot predict`")
    p.add_argument("--manifest", required=True, help="truth manifest with labels")
    p.add_argument("--train-manifest", default=None,
                   help="training manifest enabling seen/unseen stratification")
    p.add_argument("--seed", type=int, default=None, help=argparse.SUPPRESS)
    p.add_argument("--jobs", type=int, default=1, help=argparse.SUPPRESS)
    p.add_argument("--out", default=None,
                   help="report directory (default: next to the predictions)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="layer-window sweep over a dataset")
    p.add_argument("--config", required=True, help="sweep key=value file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--listeners", default=None)
    p.add_argument("--model-config", required=True)
    p.add_argument("--train-config", required=True)
    common(p, "output sweep CSV path")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("EARSHOT_LOG", "INFO").upper(), logging.INFO),
        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        log.error("%s", e)
        return 2
    except NumericError as e:
        log.error("%s", e)
        return 4
    except (DataError, OSError) as e:
        log.error("%s", e)
        return 3


if __name__ == "__main__":
    sys.exit(main())
