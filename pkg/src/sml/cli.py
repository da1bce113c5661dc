"""Command-line interface: synth, select, train, predict, crossval, mask-stats.

Exit codes: 0 success, 1 usage error, 2 data error. SML_THREADS overrides --workers.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from .classifier import EnsembleConfig, roc_curve
from .dataset import SynthParams, StackFormatError, read_manifest, synth_cohort, write_manifest, write_stack
from .pipeline import (
    ModelFormatError, PipelineError, RunConfig, cross_validate, evaluate, load_model, mask_stats,
    predict_cohort, save_model, test_pipeline, train_pipeline, write_json, write_predictions, write_roc,
)
from .selection import default_grid, select_alphas

log = logging.getLogger("sml")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _workers(args) -> int:
    env = os.environ.get("SML_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"SML_THREADS must be an integer, got {env!r}")
        if n < 1:
            raise UsageError("SML_THREADS must be >= 1")
        return n
    return args.workers


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {path}")
    return p


def _ensemble(args) -> EnsembleConfig:
    return EnsembleConfig(n_trees=args.trees, features_per_tree=args.features, max_depth=args.depth,
                          learning_rate=args.learning_rate, mode=args.mode, seed=args.seed,
                          feature_sampling=args.feature_sampling)


def _run_config(args, workers: int) -> RunConfig:
    return RunConfig(
        train_manifest=_existing(args.manifest), grid_step=args.grid_step, quantile_count=args.quantiles,
        ensemble=_ensemble(args), seed=args.seed, workers=workers, restarts=args.restarts,
        gram_pixels=args.gram_pixels, features=args.kind, target_p=args.target_p,
    )


def cmd_synth(args, workers):
    params = SynthParams(n_normal=args.normal, n_abnormal=args.abnormal, m_range=(args.m_min, args.m_max),
                         p=args.p, cluster_fraction=args.cluster_fraction, mean_shift=args.mean_shift,
                         label_signal=args.label_signal, noise_sd=args.noise_sd,
                         signal_pixel_fraction=args.signal_fraction)
    out = Path(args.out)
    (out / "stacks").mkdir(parents=True, exist_ok=True)
    rows = []
    for pt in synth_cohort(params, args.seed, lazy=True).patients:
        rel = f"stacks/{pt.patient_id}.sps"
        write_stack(pt.load(), out / rel)
        rows.append((pt.patient_id, pt.label, rel))
    write_manifest(rows, out / "manifest.csv")
    print(f"wrote {len(rows)} stacks and {out / 'manifest.csv'}")


def cmd_select(args, workers):
    cohort = read_manifest(_existing(args.manifest), args.target_p)
    grid = default_grid(args.grid_step)
    sel = select_alphas(cohort, grid=grid, quantile_count=args.quantiles, seed=args.seed,
                        restarts=args.restarts, gram_pixels=args.gram_pixels, workers=workers)
    with Path(args.out).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["ell", "alpha", "misclustering_error"])
        for ell in (1, 2):
            for alpha, err in zip(sel.grid, sel.errors[ell - 1]):
                writer.writerow([ell, repr(alpha), repr(err)])
    if args.selection_out:
        write_json(sel.to_dict(), args.selection_out)
    print(json.dumps({"ell": sel.ell, "alpha_star": sel.alpha_star, "min_error": sel.min_error,
                      "alphas": list(sel.alphas)}))


def cmd_train(args, workers):
    config = _run_config(args, workers)
    model, report = train_pipeline(config)
    save_model(model, args.model_out)
    if args.report_out:
        write_json(report.to_dict(), args.report_out)
    summary = {"in_sample_accuracy": report.accuracy, "train_seconds": report.train_seconds,
               "n_features": model.n_features}
    if model.selection is not None:
        summary.update(ell=model.selection.ell, alpha_star=model.selection.alpha_star)
    print(json.dumps(summary))


def cmd_predict(args, workers):
    model = load_model(_existing(args.model))
    p = model.mask.p if args.target_p is None else args.target_p
    cohort = read_manifest(_existing(args.manifest), p)
    truth = [pt.label for pt in cohort.patients]
    if any(t is not None for t in truth):
        report = test_pipeline(model, cohort, workers)
        preds = report.predictions
    else:
        preds = predict_cohort(model, cohort.patients, workers)
        report = evaluate(preds, truth)
    write_predictions(preds, args.out, truth)
    scored = [(pr.score, t) for pr, t in zip(preds, truth) if pr.score is not None and t is not None]
    if args.roc:
        if not scored or len({t for _, t in scored}) < 2:
            raise UsageError("--roc needs labels of both classes in the manifest")
        write_roc(roc_curve([s for s, _ in scored], [int(t == "abnormal") for _, t in scored]), args.roc)
    if args.report_out:
        write_json(report.to_dict(), args.report_out)
    print(json.dumps({"n": len(preds), "undiagnosed": report.undiagnosed, "accuracy": report.accuracy,
                      "auc": report.auc, "test_seconds": report.test_seconds}))


def cmd_crossval(args, workers):
    config = _run_config(args, workers)
    result = cross_validate(config, args.repeats, n_normal_train=args.train_normal,
                            n_abnormal_train=args.train_abnormal, baselines=args.baselines)
    write_json(result, args.out)
    print(json.dumps({k: v["out_of_sample"] for k, v in result.items() if isinstance(v, dict)}))


def cmd_mask_stats(args, workers):
    cohort = read_manifest(_existing(args.manifest), args.target_p)
    rows = mask_stats(cohort, args.alphas, args.ell, workers)
    with Path(args.out).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["alpha", "pct_A1", "pct_A2", "pct_A3"])
        for row in rows:
            writer.writerow([repr(v) for v in row])
    print(f"wrote {len(rows)} rows to {args.out}")


def _add_model_args(sp):
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--quantiles", type=int, choices=(5, 9), default=9)
    sp.add_argument("--grid-step", type=float, default=0.02)
    sp.add_argument("--trees", type=int, default=1000)
    sp.add_argument("--features", type=int, default=20, help="features sampled per tree")
    sp.add_argument("--depth", type=int, default=3)
    sp.add_argument("--learning-rate", type=float, default=0.1)
    sp.add_argument("--mode", choices=("gbrf", "rf"), default="gbrf")
    sp.add_argument("--feature-sampling", choices=("tree", "split"), default="tree")
    sp.add_argument("--kind", choices=("sml", "random_image", "mean_image"), default="sml",
                    help="input image: spectral quantile mean, or a baseline")
    sp.add_argument("--gram-pixels", choices=("A3", "A2"), default="A3")
    sp.add_argument("--restarts", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--target-p", type=int, default=None, help="resize slices to this side length")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sml", description="Spectral selection, pixel screening and boosted trees for image stacks.")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("synth", help="write a synthetic cohort")
    sp.add_argument("--out", required=True)
    sp.add_argument("--normal", type=int, required=True)
    sp.add_argument("--abnormal", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--p", type=int, default=128)
    sp.add_argument("--m-min", type=int, default=40)
    sp.add_argument("--m-max", type=int, default=400)
    sp.add_argument("--cluster-fraction", type=float, default=SynthParams.cluster_fraction)
    sp.add_argument("--mean-shift", type=float, default=SynthParams.mean_shift)
    sp.add_argument("--label-signal", type=float, default=SynthParams.label_signal)
    sp.add_argument("--noise-sd", type=float, default=SynthParams.noise_sd)
    sp.add_argument("--signal-fraction", type=float, default=SynthParams.signal_pixel_fraction)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("select", help="misclustering error over the alpha grid")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--grid-step", type=float, default=0.02)
    sp.add_argument("--quantiles", type=int, choices=(5, 9), default=9)
    sp.add_argument("--gram-pixels", choices=("A3", "A2"), default="A3")
    sp.add_argument("--restarts", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--target-p", type=int, default=None)
    sp.add_argument("--out", required=True, help="CSV ell,alpha,misclustering_error")
    sp.add_argument("--selection-out", default=None, help="optional JSON with the chosen levels")
    sp.set_defaults(func=cmd_select)

    sp = sub.add_parser("train", help="fit a model")
    _add_model_args(sp)
    sp.add_argument("--model-out", required=True)
    sp.add_argument("--report-out", default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="score scans with a saved model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--roc", default=None)
    sp.add_argument("--report-out", default=None)
    sp.add_argument("--target-p", type=int, default=None)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("crossval", help="repeated stratified train/test splits")
    _add_model_args(sp)
    sp.add_argument("--repeats", type=int, default=50)
    sp.add_argument("--train-normal", type=int, default=50)
    sp.add_argument("--train-abnormal", type=int, default=200)
    sp.add_argument("--baselines", nargs="*", choices=("random_image", "mean_image"), default=[])
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_crossval)

    sp = sub.add_parser("mask-stats", help="pixel partition percentages per alpha")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--ell", type=int, choices=(1, 2), default=2)
    sp.add_argument("--alphas", type=float, nargs="+", default=[0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    sp.add_argument("--target-p", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_mask_stats)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        workers = _workers(args)
        if workers < 1:
            raise UsageError("--workers must be >= 1")
        args.func(args, workers)
    except UsageError as exc:
        print(f"sml: error: {exc}", file=sys.stderr)
        return 1
    except (StackFormatError, ModelFormatError, PipelineError, OSError, ValueError) as exc:
        print(f"sml: data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
