"""Command-line entry point.

Exit codes: 0 success, 1 validation or usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import cohort as co
from .evaluation import (
    compare_prediction_files,
    metrics_report,
    load_predictions,
    report,
    run_nested_cv,
    save_predictions,
    CNNTrainer,
)
from .explain import aggregate_top5, class_overlap_table, explain_sample
from .model import load_params, predict_proba, save_params
from .phantom import generate_cohort
from .pipeline import load_samples, phantom_spec, run_all
from .preprocess import preprocess_manifest
from .store import (
    FAST_PROFILE,
    FORMAT_VERSION,
    MANIFEST_VERSION,
    ConfigError,
    OctadError,
    RunConfig,
    Rng,
    ValidationError,
    load_config,
    load_manifest,
    module_seed,
    serialize_config,
    write_tensor,
)

log = logging.getLogger("octad")

VERBS = ("phantom", "preprocess", "cohort", "train", "evaluate", "compare", "explain",
         "report", "run-all")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _grid(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty grid")
    return vals


def build_parser() -> _Parser:
    p = _Parser(prog="octad", description="OCT B-scan AD classification experiments.")
    sub = p.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)
    sub.required = True
    p.verbs = {}

    def verb(name, help_, *flags):
        sp = sub.add_parser(name, help=help_)
        p.verbs[name] = sp
        sp.add_argument("--config", type=Path, help="key=value run configuration")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--fast", action="store_true", help="64x64 inputs, 10 epochs, SWA at 8")
        for f in flags:
            if f == "manifest":
                sp.add_argument("--manifest", type=Path, required=True)
            elif f == "plan":
                sp.add_argument("--plan", type=Path, required=True)
            elif f == "out":
                sp.add_argument("--out", type=Path, required=True)
            elif f == "mode":
                sp.add_argument("--mode", help="composite, raw3, contour3 or mask3")
            elif f == "grid":
                sp.add_argument("--grid", type=_grid, help="comma-separated learning rates")
            elif f == "parallel":
                sp.add_argument("--parallel", type=int, help="worker processes (default: outer folds)")
            elif f == "tau":
                sp.add_argument("--tau", type=float, help="saliency threshold")
            elif f == "runfold":
                sp.add_argument("--run", type=int, default=0)
                sp.add_argument("--outer", type=int, default=0)
            elif f == "spec":
                sp.add_argument("--spec", type=Path, help="cohort key=value spec")
            elif f == "params":
                sp.add_argument("--params", type=Path, required=True)
            elif f == "reports":
                sp.add_argument("--reports", type=Path, nargs="+", required=True)
            elif f == "out?":
                sp.add_argument("--out", type=Path)
        return sp

    verb("phantom", "generate a synthetic cohort", "out")
    verb("preprocess", "build model inputs for a manifest", "manifest", "out", "mode")
    verb("cohort", "curate the cohort and plan folds", "manifest", "spec", "out")
    verb("train", "train one outer fold", "manifest", "plan", "runfold", "out", "grid")
    verb("evaluate", "nested cross-validation", "manifest", "plan", "out", "grid", "parallel")
    verb("compare", "compare prediction files", "reports", "out?")
    verb("explain", "Grad-CAM overlap for one fold", "manifest", "plan", "params", "runfold",
         "out", "tau")
    verb("report", "metrics table for prediction files", "reports", "out?")
    verb("run-all", "full experiment", "out", "mode", "grid", "parallel", "tau")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.fast:
        changes.update(FAST_PROFILE)
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "mode", None):
        changes["channel_mode"] = args.mode
    if getattr(args, "tau", None) is not None:
        changes["threshold_saliency"] = args.tau
    if getattr(args, "grid", None):
        changes["lr_grid"] = args.grid
    return cfg.replace(**changes) if changes else cfg


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")


def _fold_samples(args, cfg):
    manifest = load_manifest(_need(args.manifest, "manifest"))
    plan = co.load_plan(_need(args.plan, "plan"))
    known = set(plan.labels)
    samples = [s for s in load_samples(manifest, args.manifest.parent) if s.key[0] in known]
    return plan, samples


def cmd_phantom(args, cfg):
    m = generate_cohort(cfg.n_ad, cfg.n_cn, phantom_spec(cfg),
                        Rng(module_seed(cfg.seed, "phantom")), args.out, cfg.year_cap)
    log.info("wrote %d scans to %s", len(m), args.out)


def cmd_preprocess(args, cfg):
    m = load_manifest(_need(args.manifest, "manifest"))
    out = preprocess_manifest(m, args.manifest.parent, args.out, cfg.channel_mode, cfg.image_size)
    log.info("preprocessed %d scans (%s, %dpx)", len(out), cfg.channel_mode, cfg.image_size)


def cmd_cohort(args, cfg):
    m = load_manifest(_need(args.manifest, "manifest"))
    if args.spec:
        spec = co.parse_cohort_spec(_need(args.spec, "cohort spec").read_text(encoding="utf-8"))
    else:
        spec = co.CohortSpec(year_cap=cfg.year_cap, match_seed=cfg.seed)
    matched = co.match_controls(co.select_ad(m, spec), spec)
    plan = co.plan_folds(matched, cfg.n_runs, cfg.n_outer, cfg.n_inner,
                         Rng(module_seed(cfg.seed, "folds")))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    co.save_plan(args.out, plan)
    log.info("planned %d subjects (%d scans)", len(plan.labels), len(matched))


def cmd_train(args, cfg):
    plan, samples = _fold_samples(args, cfg)
    if not 0 <= args.run < len(plan.runs) or not 0 <= args.outer < plan.n_outer:
        raise ValidationError("--run/--outer outside the plan")
    train_subj = plan.runs[args.run].train_subjects(args.outer)
    train_s = [s for s in samples if s.key[0] in train_subj]
    lr = cfg.lr_grid[0] if args.grid else cfg.learning_rate
    rng = Rng(module_seed(cfg.seed, "eval")).child(args.run, args.outer).child(2)
    model = CNNTrainer(cfg)(train_s, lr, rng)
    save_params(args.out, model.params)
    log.info("trained run %d fold %d on %d scans, lr=%g", args.run, args.outer, len(train_s), lr)


def cmd_evaluate(args, cfg):
    plan, samples = _fold_samples(args, cfg)
    result = run_nested_cv(plan, cfg.lr_grid, samples, config=cfg,
                           rng=Rng(module_seed(cfg.seed, "eval")), name=cfg.channel_mode,
                           parallel=_parallel(args, plan.n_outer))
    args.out.mkdir(parents=True, exist_ok=True)
    save_predictions(args.out / "predictions.csv", result.predictions)
    (args.out / "report.txt").write_text(report([result.report]), encoding="utf-8")


def cmd_compare(args, cfg):
    if len(args.reports) < 2:
        raise UsageError("compare needs at least two prediction files")
    paths = [_need(p, "predictions") for p in args.reports]
    _emit(compare_prediction_files(paths), args.out)


def cmd_report(args, cfg):
    paths = [_need(p, "predictions") for p in args.reports]
    if len(paths) > 1:
        _emit(compare_prediction_files(paths), args.out)
        return
    name = paths[0].parent.name or paths[0].stem
    _emit(report([metrics_report(name, load_predictions(paths[0]))]), args.out)


def cmd_explain(args, cfg):
    plan, samples = _fold_samples(args, cfg)
    params = load_params(_need(args.params, "params"))
    test = plan.runs[args.run].outer[args.outer]
    test_s = [s for s in samples if s.key[0] in test]
    if not test_s:
        raise ValidationError("no test scans for this fold")
    scores = predict_proba(params, np.stack([s.data for s in test_s]))
    halfwidth = cfg.subfield_halfwidth_px * test_s[0].data.shape[-1] / 512.0
    maps, exps = {0: [], 1: []}, []
    for s, sc in zip(test_s, scores):
        sal, ex = explain_sample(params, s.data, s.contours, s.label, float(sc),
                                 cfg.threshold_saliency, halfwidth, s.key)
        maps[s.label].append(sal)
        exps.append(ex)
        write_tensor(args.out / "saliency" / f"{s.key[0]}_{s.key[1]}_{s.key[2]}.oct", sal.values)
    for cls, name in ((0, "CN"), (1, "AD")):
        if maps[cls]:
            write_tensor(args.out / "saliency" / f"aggregate_top5_{name}.oct",
                         aggregate_top5(maps[cls]))
    _emit(class_overlap_table(exps, cfg.pooled_overlap, cfg.threshold_saliency), args.out / "overlaps.txt")


def cmd_run_all(args, cfg):
    run_all(cfg, args.out, parallel=_parallel(args, cfg.n_outer))


def _parallel(args, n_outer: int) -> int:
    p = args.parallel if getattr(args, "parallel", None) is not None else n_outer
    if p < 1:
        raise ValidationError("--parallel must be >= 1")
    return p


COMMANDS = {
    "phantom": cmd_phantom, "preprocess": cmd_preprocess, "cohort": cmd_cohort,
    "train": cmd_train, "evaluate": cmd_evaluate, "compare": cmd_compare,
    "explain": cmd_explain, "report": cmd_report, "run-all": cmd_run_all,
}


def run(argv=None) -> int:
    parser = build_parser()
    args = None
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
        log.info("octad seed=%d formats=%s,%s", cfg.seed, FORMAT_VERSION, MANIFEST_VERSION)
        for line in serialize_config(cfg).splitlines():
            log.info("config %s", line)
        COMMANDS[args.verb](args, cfg)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except UsageError as e:
        msg = str(e)
        if "usage:" not in msg:
            sub = parser.verbs.get(getattr(args, "verb", None), parser)
            msg = f"{sub.format_usage()}{sub.prog}: error: {msg}"
        sys.stderr.write(f"{msg}\n")
        return 1
    except (ValidationError, ConfigError) as e:
        sys.stderr.write(f"{parser.prog}: validation error: {e}\n")
        return 1
    except (OctadError, OSError, ArithmeticError) as e:
        sys.stderr.write(f"{parser.prog}: error: {e}\n")
        return 2
    return 0


def main(argv=None) -> None:
    level = os.environ.get("OCTAD_LOG", "INFO").upper()
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
