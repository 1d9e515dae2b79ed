"""``synthmotion`` command line.

Data (report paths, metrics JSON) goes to stdout, logs to stderr. Exit codes:
0 ok, 1 usage or configuration error, 2 data or audit failure. The only
environment variable read is ``SYNTHMOTION_LOG_LEVEL``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from .dataset import (
    AuditError,
    GenerationError,
    audit_manifest,
    filter_for_synthesis,
    read_manifest,
    run_generation,
    split_by_site,
    split_subjects,
    write_manifest,
)
from .probe.mlp import TrainingError
from .volume import CorruptFileError, NiftiFormatError, UnsupportedDatatypeError

log = logging.getLogger("synthmotion")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
LOG_ENV = "SYNTHMOTION_LOG_LEVEL"


class UsageError(Exception):
    pass


def _csv_list(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


def _load_cfg(args) -> config_mod.RunConfig:
    if getattr(args, "config", None):
        return config_mod.load_config(args.config)
    return config_mod.RunConfig()


def _need_file(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _print_json(obj) -> None:
    json.dump(obj, sys.stdout, indent=1)
    sys.stdout.write("\n")


# --------------------------------------------------------------------------
# dataset commands
# --------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    manifest = _need_file(args.manifest or cfg.run.manifest, "--manifest")
    out = args.out or cfg.run.out_dir
    if out is None:
        raise UsageError("--out is required")
    passes = args.passes if args.passes is not None else cfg.run.passes
    seed = args.seed if args.seed is not None else cfg.run.master_seed
    workers = args.workers if args.workers is not None else cfg.run.workers
    if passes < 1 or workers < 1:
        raise UsageError("--passes and --workers must be >= 1")
    entries = read_manifest(manifest)
    if args.split:
        entries = [e for e in entries if e.split in args.split]
    report = run_generation(entries, out, cfg.augment, cfg.motion, passes=passes, master_seed=seed,
                            workers=workers, rms=cfg.rms, bins=cfg.bins,
                            max_failure_fraction=cfg.run.max_failure_fraction, base=manifest.parent)
    log.info("%d outputs (%d skipped, %d failed)", report["n_outputs"], report["n_skipped"], report["n_failed"])
    print(Path(out) / "report.json")
    return EXIT_OK


def cmd_split(args) -> int:
    entries = read_manifest(_need_file(args.manifest, "--manifest"))
    if args.synthetic_sites or args.qc_sites:
        if not (args.synthetic_sites and args.qc_sites):
            raise UsageError("--synthetic-sites and --qc-sites go together")
        entries = split_by_site(entries, _csv_list(args.synthetic_sites), _csv_list(args.qc_sites))
    if args.fractions:
        fr = tuple(float(x) for x in _csv_list(args.fractions))
        if len(fr) != 3:
            raise UsageError("--fractions takes three comma-separated numbers")
        pools = sorted({e.pool for e in entries})
        entries = [e for pool in pools for e in split_subjects([e for e in entries if e.pool == pool], fr, args.seed)]
    write_manifest(entries, args.out)
    print(args.out)
    return EXIT_OK


def cmd_filter(args) -> int:
    entries = read_manifest(_need_file(args.manifest, "--manifest"))
    kw = tuple(_csv_list(args.keywords)) if args.keywords else ("motion", "movement", "ringing")
    kept = filter_for_synthesis(entries, kw)
    log.info("kept %d of %d entries", len(kept), len(entries))
    write_manifest(kept, args.out)
    print(args.out)
    return EXIT_OK


def cmd_audit(args) -> int:
    audit_manifest(read_manifest(_need_file(args.manifest, "--manifest")))
    print("ok")
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def _read_column(path: Path) -> tuple[list[str] | None, np.ndarray]:
    """Values from a one- or two-column CSV (optional ``id`` column, then ``value``)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or "value" not in reader.fieldnames:
            raise UsageError(f"{path}: needs a 'value' column")
        rows = list(reader)
    ids = [r["id"] for r in rows] if "id" in reader.fieldnames else None
    return ids, np.array([float(r["value"]) for r in rows])


def cmd_eval(args) -> int:
    from .metrics import calibration_curve, classification_report, r_squared, write_calibration_csv
    pid, pred = _read_column(_need_file(args.pred, "--pred"))
    tid, truth = _read_column(_need_file(args.truth, "--truth"))
    if len(pred) != len(truth) or (pid is not None and tid is not None and pid != tid):
        raise UsageError("prediction and truth rows are not aligned")
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    if args.task == "regression":
        result = {"task": "regression", "n": int(len(truth)), "r2": r_squared(truth, pred)}
        points = calibration_curve(truth, pred)
        if out:
            from .plotting import plot_calibration
            write_calibration_csv(points, out / "calibration.csv")
            plot_calibration(points, out / "calibration.png", result["r2"])
    else:
        if not (np.all(pred == np.round(pred)) and np.all(truth == np.round(truth))):
            raise UsageError("classification labels must be integers")
        n_classes = args.classes or int(max(pred.max(), truth.max())) + 1
        result = {"task": "classification", "n": int(len(truth)),
                  **classification_report(truth.astype(int), pred.astype(int), n_classes)}
    if out:
        (out / "metrics.json").write_text(json.dumps(result, indent=1))
    _print_json(result)
    return EXIT_OK


# --------------------------------------------------------------------------
# probe
# --------------------------------------------------------------------------

def cmd_features(args) -> int:
    from .probe.features import tabulate_generated
    n = tabulate_generated(_need_file(args.labels, "--labels"), args.out, args.phase_axis)
    log.info("tabulated %d volumes", n)
    print(args.out)
    return EXIT_OK


def _train_cfg(cfg, args):
    over = {}
    if args.lr is not None:
        over["lr"] = args.lr
    if args.epochs is not None:
        over["max_epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    return replace(cfg, **over)


def cmd_probe(args) -> int:
    from .metrics import calibration_curve, r_squared, write_calibration_csv
    from .plotting import plot_calibration, plot_comparison, plot_history
    from .probe.features import read_feature_table
    from .probe.mlp import load_checkpoint, save_checkpoint
    from .probe.train import (
        QcData,
        compare_transfer_vs_scratch,
        predict_scores,
        pretrain,
        scratch_train,
        transfer_train,
        write_comparison_csv,
        write_history,
    )

    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.action == "pretrain":
        table = read_feature_table(_need_file(args.features, "--features"))
        if "train" not in table or "val" not in table:
            raise UsageError("feature table needs 'train' and 'val' rows")
        tcfg = _train_cfg(cfg.pretrain, args)
        (xtr, ytr), (xv, yv) = table["train"], table["val"]
        model, history = pretrain(xtr, ytr, xv, yv, tcfg, cfg.bins)
        pred = predict_scores(model, xv, cfg.bins)
        r2 = r_squared(yv, pred)
        save_checkpoint(model, out / "model.bin", {"train_config": tcfg.__dict__})
        write_history(history, out / "history.csv")
        plot_history(history, out / "history.png")
        points = calibration_curve(yv, pred)
        write_calibration_csv(points, out / "calibration.csv")
        plot_calibration(points, out / "calibration.png", r2)
        result = {"val_r2": r2, "best_val_metric": model.meta["best_val_metric"], "epochs": len(history),
                  "checkpoint": str(out / "model.bin")}
    else:
        table = read_feature_table(_need_file(args.qc_features, "--qc-features"))
        missing = {"train", "val", "test"} - set(table)
        if missing:
            raise UsageError(f"QC feature table lacks splits {sorted(missing)}")
        data = QcData(table["train"][0], table["train"][1].astype(int), table["val"][0],
                      table["val"][1].astype(int), table["test"][0], table["test"][1].astype(int))
        if args.action == "scratch":
            model, report, history = scratch_train(data.x_train.shape[1], data, _train_cfg(cfg.scratch, args))
            save_checkpoint(model, out / "scratch.bin")
            write_history(history, out / "history.csv", "val_balanced_accuracy")
            result = report
        else:
            pretrained = load_checkpoint(_need_file(args.checkpoint, "--checkpoint"))
            if args.action == "transfer":
                head, report, history = transfer_train(pretrained, data, _train_cfg(cfg.transfer, args))
                save_checkpoint(head, out / "head.bin", {"trunk_hash": report["trunk_hash"]})
                write_history(history, out / "history.csv", "val_balanced_accuracy")
                result = report
            else:
                result = compare_transfer_vs_scratch(pretrained, data, _train_cfg(cfg.transfer, args),
                                                     _train_cfg(cfg.scratch, args), seeds=range(args.seeds))
                write_comparison_csv(result, out / "comparison.csv")
                plot_comparison(result, out / "comparison.png")
        (out / f"{args.action}.json").write_text(json.dumps(result, indent=1))
    _print_json(result)
    return EXIT_OK


# --------------------------------------------------------------------------
# misc
# --------------------------------------------------------------------------

def cmd_toy(args) -> int:
    from .toy import build_toy_set
    ts = build_toy_set(args.out, n_subjects=args.subjects, passes=args.passes, seed=args.seed, workers=args.workers)
    _print_json({"root": str(ts.root), "pretrain_features": str(ts.pretrain_features),
                 "qc_features": str(ts.qc_features), "config": str(ts.root / "config.toml"),
                 "per_split": ts.report["per_split"]})
    return EXIT_OK


def cmd_config(args) -> int:
    if args.action == "init":
        text = config_mod.dump_config(config_mod.RunConfig())
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
    else:
        config_mod.load_config(_need_file(args.file, "config file"))
        print("ok")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_benchmark
    cfg = _load_cfg(args)
    workers = [int(w) for w in _csv_list(args.workers)]
    if not workers or min(workers) < 1:
        raise UsageError("--workers takes positive integers")
    report = run_benchmark(args.out, n_volumes=args.volumes, worker_counts=workers, cfg=cfg.augment,
                           motion=cfg.motion)
    _print_json(report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="synthmotion", description="Synthetic motion-artifact generation and QC probes.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate motion-corrupted volumes from a manifest")
    g.add_argument("--config")
    g.add_argument("--manifest")
    g.add_argument("--out")
    g.add_argument("--passes", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("--split", action="append", help="only sources in this split (repeatable)")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("split", help="assign pools by site and/or splits by subject")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--synthetic-sites", help="comma-separated site ids")
    s.add_argument("--qc-sites", help="comma-separated site ids")
    s.add_argument("--fractions", help="train,val,test fractions, e.g. 0.7,0.15,0.15")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_split)

    f = sub.add_parser("filter", help="keep clean scans eligible for synthesis")
    f.add_argument("--manifest", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--synthesis-filter", action="store_true", default=True)
    f.add_argument("--keywords", help="comma-separated comment keywords to exclude")
    f.set_defaults(func=cmd_filter)

    a = sub.add_parser("audit", help="check a manifest for subject and site leakage")
    a.add_argument("--manifest", required=True)
    a.set_defaults(func=cmd_audit)

    e = sub.add_parser("eval", help="score predictions against truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--task", choices=("regression", "classification"), required=True)
    e.add_argument("--classes", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    ft = sub.add_parser("features", help="tabulate probe features of a generated set")
    ft.add_argument("--labels", required=True, help="labels.csv written by generate")
    ft.add_argument("--out", required=True)
    ft.add_argument("--phase-axis", type=int, default=1, choices=(0, 1, 2))
    ft.set_defaults(func=cmd_features)

    pr = sub.add_parser("probe", help="pretrain / transfer / scratch / compare")
    pr.add_argument("action", choices=("pretrain", "transfer", "scratch", "compare"))
    pr.add_argument("--config")
    pr.add_argument("--features", help="feature table with train/val rows (pretrain)")
    pr.add_argument("--qc-features", help="QC feature table with train/val/test rows")
    pr.add_argument("--checkpoint", help="pretrained model (transfer, compare)")
    pr.add_argument("--out", required=True)
    pr.add_argument("--lr", type=float)
    pr.add_argument("--epochs", type=int)
    pr.add_argument("--seed", type=int)
    pr.add_argument("--seeds", type=int, default=5, help="number of seeds (compare)")
    pr.set_defaults(func=cmd_probe)

    t = sub.add_parser("toy", help="build the desk-scale toy fixture")
    t.add_argument("--out", required=True)
    t.add_argument("--subjects", type=int, default=60)
    t.add_argument("--passes", type=int, default=10)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--workers", type=int, default=1)
    t.set_defaults(func=cmd_toy)

    c = sub.add_parser("config", help="write or validate a run config")
    c.add_argument("action", choices=("init", "check"))
    c.add_argument("file", nargs="?")
    c.add_argument("--out")
    c.set_defaults(func=cmd_config)

    b = sub.add_parser("bench", help="generation throughput at several worker counts")
    b.add_argument("--out", required=True)
    b.add_argument("--volumes", type=int, default=100)
    b.add_argument("--workers", default="1,8")
    b.add_argument("--config")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, config_mod.ConfigError) as exc:
        print(f"synthmotion: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AuditError as exc:
        print(f"synthmotion: audit failed: {exc}", file=sys.stderr)
        return EXIT_DATA
    except GenerationError as exc:
        print(f"synthmotion: generation failed: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NiftiFormatError, CorruptFileError, UnsupportedDatatypeError, TrainingError) as exc:
        print(f"synthmotion: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError) as exc:
        # invalid arguments surfacing from the library (e.g. overlapping site lists)
        print(f"synthmotion: error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, ValueError) else EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
