"""End-to-end experiment: phantom cohort -> composites -> nested CV -> saliency."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cohort as co
from .evaluation import (
    NestedCVResult,
    report,
    run_nested_cv,
    save_predictions,
)
from .explain import aggregate_top5, class_overlap_table, explain_sample
from .model import Sample, save_params
from .phantom import PhantomSpec, generate_cohort, geometry_only_spec
from .preprocess import load_composite, preprocess_manifest
from .store import (
    FORMAT_VERSION,
    MANIFEST_VERSION,
    Manifest,
    RunConfig,
    Rng,
    module_seed,
    serialize_config,
    write_tensor,
)

log = logging.getLogger(__name__)


def phantom_spec(config: RunConfig) -> PhantomSpec:
    base = geometry_only_spec() if config.phantom_preset == "geometry" else PhantomSpec()
    return base.with_signal(
        target_layer="IS/OSJ",
        thinning_fraction=config.thinning_fraction,
        region="central_subfield",
        subfield_halfwidth=config.subfield_halfwidth_px,
    )


def load_samples(manifest: Manifest, root) -> list[Sample]:
    root = Path(root)
    out = []
    for r in manifest:
        comp = load_composite(root / r.image_path)
        out.append(Sample(comp.data, int(r.is_ad), r.years_to_diagnosis, comp.contours, r.key))
    return out


def explain_folds(result: NestedCVResult, samples: Sequence[Sample], config: RunConfig,
                  run: int = 0):
    """Grad-CAM for every test scan of one run, using the model of the fold
    that held it out."""
    by_key = {s.key: s for s in samples}
    scale = samples[0].data.shape[-1] / 512.0
    halfwidth = config.subfield_halfwidth_px * scale
    maps = {0: [], 1: []}
    explanations = []
    for fold in result.folds:
        if fold.run != run:
            continue
        for p in fold.predictions:
            s = by_key[(p.subject_id, p.eye, p.instance)]
            sal, ex = explain_sample(fold.model.params, s.data, s.contours, s.label, p.score,
                                     config.threshold_saliency, halfwidth, s.key)
            maps[s.label].append(sal)
            explanations.append(ex)
    explanations.sort(key=lambda e: e.key)
    return maps, explanations


def run_all(config: RunConfig, out_dir, parallel: int = 1) -> NestedCVResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log.info("run-all seed=%d formats=%s,%s", config.seed, FORMAT_VERSION, MANIFEST_VERSION)
    for line in serialize_config(config).splitlines():
        log.info("config %s", line)
    (out / "config.txt").write_text(serialize_config(config), encoding="utf-8")

    raw = generate_cohort(config.n_ad, config.n_cn, phantom_spec(config),
                          Rng(module_seed(config.seed, "phantom")), out / "phantom",
                          config.year_cap)
    spec = co.CohortSpec(year_cap=config.year_cap, match_seed=config.seed)
    selected = co.select_ad(raw, spec)
    co.check_matching(selected, spec)
    manifest = preprocess_manifest(selected, out / "phantom", out / "preprocessed",
                                   config.channel_mode, config.image_size)
    plan = co.plan_folds(manifest, config.n_runs, config.n_outer, config.n_inner,
                         Rng(module_seed(config.seed, "folds")))
    co.save_plan(out / "plan.txt", plan)

    samples = load_samples(manifest, out / "preprocessed")
    result = run_nested_cv(plan, config.lr_grid, samples, config=config,
                           rng=Rng(module_seed(config.seed, "eval")), name=config.channel_mode,
                           parallel=parallel, keep_models=True)
    save_predictions(out / "predictions.csv", result.predictions)
    (out / "report.txt").write_text(report([result.report]), encoding="utf-8")

    maps, explanations = explain_folds(result, samples, config)
    sal_dir = out / "saliency"
    sal_dir.mkdir(exist_ok=True)
    for cls, name in ((0, "CN"), (1, "AD")):
        if maps[cls]:
            write_tensor(sal_dir / f"aggregate_top5_{name}.oct", aggregate_top5(maps[cls]))
    for fold in result.folds:
        if fold.run == 0:
            save_params(out / "params" / f"run0_fold{fold.outer_fold}", fold.model.params)
    (out / "overlaps.txt").write_text(
        class_overlap_table(explanations, config.pooled_overlap, config.threshold_saliency),
        encoding="utf-8",
    )
    log.info("mAUC %.4f ± %.4f", result.report.mean("auc"), result.report.std("auc"))
    return result


def mean_auc(result: NestedCVResult) -> float:
    return float(np.mean(result.report.run_aucs))
