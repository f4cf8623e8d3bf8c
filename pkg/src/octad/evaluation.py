"""Nested cross-validation, classification metrics and report tables."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .cohort import FoldPlan
from .model import Sample, predict_proba, train
from .stats import TTestResult, calibrated_t_test
from .store import OctadError, RunConfig, Rng, ValidationError

log = logging.getLogger(__name__)

PREDICTION_COLUMNS = ("run", "outer_fold", "subject_id", "eye", "instance", "label", "score")
METRIC_NAMES = ("auc", "f1", "precision", "sensitivity", "specificity")


class LeakageError(OctadError):
    pass


@dataclass(frozen=True)
class Prediction:
    subject_id: str
    eye: str
    instance: int
    score: float
    label: int
    run: int = 0
    outer_fold: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score {self.score} outside [0, 1]")


def _scores_labels(preds) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([p.score for p in preds], dtype=np.float64)
    labels = np.array([p.label for p in preds], dtype=np.int64)
    return scores, labels


# --------------------------------------------------------------------------
# metrics


def auc_scores(scores, labels) -> float:
    """Mann-Whitney AUC from average ranks; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC needs both classes")
    uniq, inv, counts = np.unique(scores, return_inverse=True, return_counts=True)
    first = np.concatenate([[0], np.cumsum(counts)[:-1]])
    # doubled average rank keeps everything integral
    rank2 = (2 * first + counts + 1)[inv]
    u2 = int(rank2[labels == 1].sum()) - n_pos * (n_pos + 1)
    return (u2 / 2) / (n_pos * n_neg)


def auc(preds: Sequence[Prediction]) -> float:
    return auc_scores(*_scores_labels(preds))


@dataclass(frozen=True)
class ThresholdMetrics:
    f1: float
    precision: float
    sensitivity: float
    specificity: float
    undefined: tuple[str, ...] = ()


def _ratio(num: int, den: int, name: str, undefined: list) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def threshold_metrics_scores(scores, labels, threshold: float = 0.5) -> ThresholdMetrics:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pred = scores >= threshold
    tp = int((pred & (labels == 1)).sum())
    fp = int((pred & (labels == 0)).sum())
    fn = int((~pred & (labels == 1)).sum())
    tn = int((~pred & (labels == 0)).sum())
    undefined: list[str] = []
    precision = _ratio(tp, tp + fp, "precision", undefined)
    sensitivity = _ratio(tp, tp + fn, "sensitivity", undefined)
    specificity = _ratio(tn, tn + fp, "specificity", undefined)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn, "f1", undefined)
    return ThresholdMetrics(f1, precision, sensitivity, specificity, tuple(undefined))


def threshold_metrics(preds: Sequence[Prediction], threshold: float = 0.5) -> ThresholdMetrics:
    return threshold_metrics_scores(*_scores_labels(preds), threshold)


@dataclass(frozen=True)
class MetricsReport:
    name: str
    per_run: dict  # metric -> tuple of per-run values
    selected_lr: tuple = ()

    def mean(self, metric: str) -> float:
        return float(np.mean(self.per_run[metric]))

    def std(self, metric: str) -> float:
        v = self.per_run[metric]
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    @property
    def run_aucs(self) -> tuple:
        return self.per_run["auc"]


def metrics_report(name: str, preds: Sequence[Prediction], threshold: float = 0.5,
                   selected_lr=()) -> MetricsReport:
    runs = sorted({p.run for p in preds})
    per_run: dict = {m: [] for m in METRIC_NAMES}
    for r in runs:
        rp = [p for p in preds if p.run == r]
        per_run["auc"].append(auc(rp))
        tm = threshold_metrics(rp, threshold)
        for m in METRIC_NAMES[1:]:
            per_run[m].append(getattr(tm, m))
    return MetricsReport(name, {k: tuple(v) for k, v in per_run.items()}, tuple(selected_lr))


# --------------------------------------------------------------------------
# nested cross-validation


class CNNTrainer:
    """Default learner: trains the package CNN, predicts in evaluation mode."""

    def __init__(self, config: RunConfig):
        self.config = config

    def __call__(self, samples: Sequence[Sample], lr: float, rng: Rng) -> "FittedCNN":
        params = train(self.config.replace(learning_rate=lr), samples, rng)
        return FittedCNN(params)


@dataclass
class FittedCNN:
    params: dict

    def predict(self, samples: Sequence[Sample]) -> np.ndarray:
        return predict_proba(self.params, np.stack([s.data for s in samples]))


@dataclass
class FoldResult:
    run: int
    outer_fold: int
    lr: float
    inner_auc: dict
    predictions: list
    model: object = None


@dataclass
class NestedCVResult:
    predictions: list
    report: MetricsReport
    folds: list = field(default_factory=list)


def _subjects(samples) -> set:
    return {s.key[0] for s in samples}


def _assert_disjoint(train_s, test_s, where: str) -> None:
    leaked = _subjects(train_s) & _subjects(test_s)
    if leaked:
        raise LeakageError(f"{where}: subject(s) {sorted(leaked)} in both training and test data")


def _fit_predict(trainer, train_s, test_s, lr, rng, where):
    _assert_disjoint(train_s, test_s, where)
    model = trainer(train_s, lr, rng)
    scores = np.asarray(model.predict(test_s), dtype=np.float64)
    return model, scores


def _run_fold(args) -> FoldResult:
    plan_run, r, k, grid, samples, trainer, rng, keep_model = args
    test_subj = plan_run.outer[k]
    inner = plan_run.inner[k]
    if set().union(*inner) & test_subj:
        raise LeakageError(f"run {r} fold {k}: test subject listed in inner folds")
    train_s = [s for s in samples if s.key[0] in plan_run.train_subjects(k)]
    test_s = [s for s in samples if s.key[0] in test_subj]
    unit = rng.child(r, k)

    inner_auc: dict = {}
    if len(grid) > 1:
        for gi, lr in enumerate(grid):
            vals = []
            for j, val_subj in enumerate(inner):
                fit_s = [s for s in train_s if s.key[0] not in val_subj]
                val_s = [s for s in train_s if s.key[0] in val_subj]
                if len({s.label for s in val_s}) < 2 or len({s.label for s in fit_s}) < 2:
                    continue
                _, sc = _fit_predict(trainer, fit_s, val_s, lr, unit.child(1, gi, j),
                                     f"run {r} fold {k} inner {j}")
                vals.append(auc_scores(sc, [s.label for s in val_s]))
            inner_auc[lr] = float(np.mean(vals)) if vals else -math.inf
        best = max(inner_auc.values())
        lr = min(v for v, a in inner_auc.items() if a == best)
    else:
        lr = grid[0]
    model, scores = _fit_predict(trainer, train_s, test_s, lr, unit.child(2),
                                 f"run {r} fold {k}")
    preds = [
        Prediction(s.key[0], s.key[1], int(s.key[2]), float(np.clip(sc, 0.0, 1.0)), int(s.label),
                   r, k)
        for s, sc in zip(test_s, scores)
    ]
    return FoldResult(r, k, lr, inner_auc, preds, model if keep_model else None)


def run_nested_cv(
    plan: FoldPlan,
    grid: Sequence[float],
    samples: Sequence[Sample],
    trainer: Callable | None = None,
    config: RunConfig | None = None,
    rng: Rng | None = None,
    name: str = "model",
    parallel: int = 1,
    keep_models: bool = False,
) -> NestedCVResult:
    """Outer folds estimate performance; inner folds pick the learning rate.

    ``trainer(samples, lr, rng)`` must return an object with
    ``predict(samples) -> scores``. Test samples are never augmented: the
    default trainer predicts in evaluation mode.
    """
    config = config or RunConfig()
    trainer = trainer or CNNTrainer(config)
    rng = rng or Rng(config.seed)
    grid = tuple(sorted(float(g) for g in grid))
    if not grid:
        raise ValidationError("empty hyperparameter grid")
    samples = sorted(samples, key=lambda s: s.key)
    known = set(plan.labels)
    missing = _subjects(samples) - known
    if missing:
        raise ValidationError(f"samples for subjects not in plan: {sorted(missing)[:5]}")

    jobs = [
        (run, r, k, grid, samples, trainer, rng, keep_models)
        for r, run in enumerate(plan.runs)
        for k in range(len(run.outer))
    ]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            folds = list(ex.map(_run_fold, jobs))
    else:
        folds = [_run_fold(j) for j in jobs]
    folds.sort(key=lambda f: (f.run, f.outer_fold))
    preds = [p for f in folds for p in f.predictions]
    preds.sort(key=lambda p: (p.run, p.outer_fold, p.subject_id, p.eye, p.instance))
    for f in folds:
        log.info("run %d fold %d: lr=%g inner=%s", f.run, f.outer_fold, f.lr, f.inner_auc)
    report = metrics_report(name, preds, selected_lr=[f.lr for f in folds])
    return NestedCVResult(preds, report, folds)


# --------------------------------------------------------------------------
# files and tables


def _fmt(x: float) -> str:
    return repr(float(x))


def serialize_predictions(preds: Sequence[Prediction]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PREDICTION_COLUMNS)
    for p in preds:
        w.writerow([p.run, p.outer_fold, p.subject_id, p.eye, p.instance, p.label, _fmt(p.score)])
    return buf.getvalue()


def parse_predictions(text: str) -> list[Prediction]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != PREDICTION_COLUMNS:
        raise ValidationError(f"predictions header must be {','.join(PREDICTION_COLUMNS)}")
    out = []
    for row in reader:
        try:
            out.append(Prediction(row["subject_id"], row["eye"], int(row["instance"]),
                                  float(row["score"]), int(row["label"]), int(row["run"]),
                                  int(row["outer_fold"])))
        except (TypeError, ValueError) as e:
            raise ValidationError(f"bad predictions row {row}: {e}") from None
    return out


def save_predictions(path, preds) -> None:
    Path(path).write_text(serialize_predictions(preds), encoding="utf-8")


def load_predictions(path) -> list[Prediction]:
    return parse_predictions(Path(path).read_text(encoding="utf-8"))


def default_rho(n_outer: int) -> float:
    """n_test / n_train for k-fold outer cross-validation."""
    return 1.0 / (n_outer - 1)


def compare_reports(ref: MetricsReport, other: MetricsReport, rho: float,
                    df: float | None = None) -> tuple[TTestResult, TTestResult]:
    """(standard, calibrated) paired t-tests on per-run AUCs."""
    a, b = ref.run_aucs, other.run_aucs
    if len(a) != len(b):
        raise ValidationError("reports have different numbers of runs")
    return calibrated_t_test(a, b, 0.0, df), calibrated_t_test(a, b, rho, df)


def _pm(r: MetricsReport, m: str) -> str:
    return f"{r.mean(m):.3f} ± {r.std(m):.3f}"


def _p(t: TTestResult) -> str:
    return f"{t.p_value:.4f}" + ("*" if t.degenerate else "")


def report(reports: Sequence[MetricsReport], ttests: Sequence | None = None) -> str:
    """Fixed-width text table; the first report is the reference model.

    ``ttests[i]`` holds (standard, calibrated) results for ``reports[i + 1]``.
    """
    if not reports:
        raise ValidationError("report needs at least one model")
    with_p = len(reports) > 1
    header = ["Model", "mAUC", "f1-score", "Precision", "Sensitivity", "Specificity"]
    if with_p:
        header += ["t-test p", "corrected p"]
    rows = []
    for i, r in enumerate(reports):
        row = [r.name] + [_pm(r, m) for m in METRIC_NAMES]
        if with_p:
            if i == 0:
                row += ["", ""]
            else:
                std, cal = ttests[i - 1]
                row += [_p(std), _p(cal)]
        rows.append(row)
    widths = [max(len(h), *(len(row[c]) for row in rows)) for c, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
    n_runs = len(reports[0].run_aucs)
    lines.append("")
    lines.append(f"runs={n_runs}")
    for r in reports:
        lines.append(f"{r.name} per-run AUC: " + " ".join(f"{a:.4f}" for a in r.run_aucs))
    if with_p:
        t_df = ttests[0][1].df
        lines.append(f"calibrated t-test: rho={ttests[0][1].variance_correction:.6g} df={t_df:g}")
    return "\n".join(lines) + "\n"


def compare_prediction_files(paths: Sequence, names: Sequence[str] | None = None,
                             df: float | None = None) -> str:
    preds = [load_predictions(p) for p in paths]
    names = list(names or [Path(p).parent.name or Path(p).stem for p in paths])
    reports = [metrics_report(n, p) for n, p in zip(names, preds)]
    n_outer = len({p.outer_fold for p in preds[0]})
    rho = default_rho(n_outer) if n_outer > 1 else 0.0
    ttests = [compare_reports(reports[0], r, rho, df) for r in reports[1:]]
    return report(reports, ttests)
