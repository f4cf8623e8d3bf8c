"""Cohort curation and subject-level nested fold planning."""

from __future__ import annotations

import io
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from .store import (
    Manifest,
    OctadError,
    Rng,
    ValidationError,
    module_seed,
    parse_kv,
)

log = logging.getLogger(__name__)

PLAN_HEADER = "# octad fold plan v1"


class EmptyCohortError(ValidationError):
    pass


class UnmatchedSubjectError(OctadError):
    def __init__(self, subjects):
        self.subjects = tuple(subjects)
        super().__init__(f"no eligible control for AD subject(s): {', '.join(self.subjects)}")


class InfeasibleSplitError(ValidationError):
    pass


class MatchToleranceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CohortSpec:
    year_cap: float = 4.0
    age_tolerance: int = 0
    max_age_tolerance: int = 2
    match_seed: int = 0
    match_ratio: int = 1

    def __post_init__(self):
        if not self.year_cap > 0:
            raise ValidationError("year_cap must be > 0")
        if self.age_tolerance < 0 or self.max_age_tolerance < self.age_tolerance:
            raise ValidationError("need 0 <= age_tolerance <= max_age_tolerance")
        if self.match_ratio < 1:
            raise ValidationError("match_ratio must be >= 1")


def parse_cohort_spec(text: str) -> CohortSpec:
    kinds = {"year_cap": float, "age_tolerance": int, "max_age_tolerance": int,
             "match_seed": int, "match_ratio": int}
    values = {}
    for k, v in parse_kv(text).items():
        if k not in kinds:
            raise ValidationError(f"unknown cohort key {k!r}")
        try:
            values[k] = kinds[k](v)
        except ValueError:
            raise ValidationError(f"bad value for {k}: {v!r}") from None
    return CohortSpec(**values)


def select_ad(m: Manifest, spec: CohortSpec) -> Manifest:
    """Keep AD scans within ``year_cap`` years of diagnosis (inclusive)."""
    out = m.filter(lambda r: not r.is_ad or r.years_to_diagnosis <= spec.year_cap)
    if not any(r.is_ad for r in out):
        raise EmptyCohortError("no AD scans within the year cap")
    return out


def _demographics(records) -> tuple[int, str, int]:
    r = min(records, key=lambda r: (r.instance, r.eye))
    return r.age, r.sex, r.instance


def match_pairs(m: Manifest, spec: CohortSpec, rng: Rng | None = None) -> dict[str, list[str]]:
    """Draw ``match_ratio`` distinct sex/instance/age-matched controls per AD subject.

    Every unmatched AD subject is tried at the exact tolerance first; only
    those left over move to the next tolerance, with a warning.
    """
    if rng is None:
        rng = Rng(module_seed(spec.match_seed, "cohort"))
    groups = m.by_subject()
    ad = sorted(s for s, rows in groups.items() if rows[0].is_ad)
    pool = sorted(s for s, rows in groups.items() if not rows[0].is_ad)
    demo = {s: _demographics(groups[s]) for s in groups}

    need = {s: spec.match_ratio for s in ad}
    pairs: dict[str, list[str]] = {s: [] for s in ad}
    taken: set[str] = set()
    for tol in range(spec.age_tolerance, spec.max_age_tolerance + 1):
        pending = [s for s in ad if need[s] > 0]
        if not pending:
            break
        for s in pending:
            age, sex, inst = demo[s]
            while need[s] > 0:
                eligible = [
                    c for c in pool
                    if c not in taken and demo[c][1] == sex and demo[c][2] == inst
                    and abs(demo[c][0] - age) <= tol
                ]
                if not eligible:
                    break
                pick = eligible[rng.integers(0, len(eligible) - 1)]
                taken.add(pick)
                pairs[s].append(pick)
                need[s] -= 1
                if tol > spec.age_tolerance:
                    msg = f"{s}: matched {pick} at age tolerance {tol}"
                    log.warning(msg)
                    warnings.warn(msg, MatchToleranceWarning, stacklevel=2)
    unmatched = [s for s in ad if need[s] > 0]
    if unmatched:
        raise UnmatchedSubjectError(unmatched)
    return pairs


def match_controls(m: Manifest, spec: CohortSpec, rng: Rng | None = None) -> Manifest:
    """AD subjects plus their matched controls (see ``match_pairs``)."""
    pairs = match_pairs(m, spec, rng)
    keep = set(pairs).union(*pairs.values())
    return m.filter(lambda r: r.subject_id in keep)


def check_matching(m: Manifest, spec: CohortSpec) -> None:
    """Raise unless every AD subject could draw its controls from ``m``."""
    match_controls(m, spec, Rng(0))


# --------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class RunFolds:
    outer: tuple[frozenset, ...]
    inner: tuple[tuple[frozenset, ...], ...]  # inner[k] partitions the training set of outer fold k

    def train_subjects(self, k: int) -> frozenset:
        return frozenset().union(*(f for j, f in enumerate(self.outer) if j != k))


@dataclass(frozen=True)
class FoldPlan:
    runs: tuple[RunFolds, ...]
    seed: int = 0
    labels: dict = field(default_factory=dict)  # subject -> "AD" | "CN"

    @property
    def n_outer(self) -> int:
        return len(self.runs[0].outer)

    @property
    def n_inner(self) -> int:
        return len(self.runs[0].inner[0])


def _subject_labels(m: Manifest) -> dict[str, str]:
    labels = {}
    for s, rows in m.by_subject().items():
        kinds = {r.label for r in rows}
        if len(kinds) != 1:
            raise ValidationError(f"subject {s} has mixed labels {sorted(kinds)}")
        labels[s] = kinds.pop()
    return labels


def _deal(by_class: list[list[str]], n: int) -> list[set]:
    folds: list[set] = [set() for _ in range(n)]
    pos = 0
    for members in by_class:
        for s in members:
            folds[pos % n].add(s)
            pos += 1
    return folds


def plan_folds(
    m: Manifest,
    n_runs: int = 5,
    n_outer: int = 5,
    n_inner: int = 3,
    rng: Rng | None = None,
) -> FoldPlan:
    """Label-stratified subject-level folds; both eyes of a subject travel together."""
    rng = rng or Rng(module_seed(0, "folds"))
    labels = _subject_labels(m)
    classes = [sorted(s for s, lab in labels.items() if lab == c) for c in ("AD", "CN")]
    for c, members in zip(("AD", "CN"), classes):
        if len(members) < n_outer:
            raise InfeasibleSplitError(
                f"{len(members)} {c} subject(s) cannot fill {n_outer} outer folds"
            )
    runs = []
    for r in range(n_runs):
        rr = rng.child(r)
        outer = _deal([rr.shuffle(members) for members in classes], n_outer)
        inner = []
        for k in range(n_outer):
            train = set().union(*(f for j, f in enumerate(outer) if j != k))
            train_classes = [sorted(s for s in members if s in train) for members in classes]
            if min(len(t) for t in train_classes) < n_inner:
                raise InfeasibleSplitError("too few subjects per class for the inner folds")
            ik = rr.child(k)
            inner.append(tuple(
                frozenset(f) for f in _deal([ik.shuffle(t) for t in train_classes], n_inner)
            ))
        runs.append(RunFolds(tuple(frozenset(f) for f in outer), tuple(inner)))
    return FoldPlan(runs=tuple(runs), seed=rng.seed, labels=labels)


def serialize_plan(plan: FoldPlan) -> str:
    buf = io.StringIO()
    buf.write(PLAN_HEADER + "\n")
    buf.write(f"# seed={plan.seed} runs={len(plan.runs)} outer={plan.n_outer} "
              f"inner={plan.n_inner}\n")
    buf.write("run,outer_fold,subject_id,label,role\n")
    subjects = sorted(plan.labels)
    for r, run in enumerate(plan.runs):
        for k in range(len(run.outer)):
            for s in subjects:
                if s in run.outer[k]:
                    role = "TEST"
                else:
                    role = str(next(j for j, f in enumerate(run.inner[k]) if s in f))
                buf.write(f"{r},{k},{s},{plan.labels[s]},{role}\n")
    return buf.getvalue()


def parse_plan(text: str) -> FoldPlan:
    lines = text.splitlines()
    if not lines or lines[0].strip() != PLAN_HEADER:
        raise ValidationError("not a fold plan file")
    meta = {}
    body = []
    for line in lines[1:]:
        if line.startswith("#"):
            for tok in line[1:].split():
                k, _, v = tok.partition("=")
                meta[k] = int(v)
        elif line.strip() and not line.startswith("run,"):
            body.append(line.strip().split(","))
    n_runs, n_outer, n_inner = meta["runs"], meta["outer"], meta["inner"]
    outer = [[set() for _ in range(n_outer)] for _ in range(n_runs)]
    inner = [[[set() for _ in range(n_inner)] for _ in range(n_outer)] for _ in range(n_runs)]
    labels = {}
    for r, k, s, lab, role in body:
        r, k = int(r), int(k)
        labels[s] = lab
        if role == "TEST":
            outer[r][k].add(s)
        else:
            inner[r][k][int(role)].add(s)
    runs = tuple(
        RunFolds(tuple(frozenset(f) for f in outer[r]),
                 tuple(tuple(frozenset(f) for f in inner[r][k]) for k in range(n_outer)))
        for r in range(n_runs)
    )
    return FoldPlan(runs=runs, seed=meta.get("seed", 0), labels=labels)


def save_plan(path, plan: FoldPlan) -> None:
    Path(path).write_text(serialize_plan(plan), encoding="utf-8")


def load_plan(path) -> FoldPlan:
    return parse_plan(Path(path).read_text(encoding="utf-8"))


def check_plan(plan: FoldPlan, m: Manifest | None = None) -> list[str]:
    """Return every violated fold invariant (empty when the plan is sound)."""
    problems = []
    subjects = set(plan.labels)
    if m is not None and set(m.subjects()) != subjects:
        problems.append("plan and manifest list different subjects")
    for r, run in enumerate(plan.runs):
        seen: dict[str, int] = {}
        for k, fold in enumerate(run.outer):
            for s in fold:
                if s in seen:
                    problems.append(f"run {r}: {s} in outer folds {seen[s]} and {k}")
                seen[s] = k
        if set(seen) != subjects:
            problems.append(f"run {r}: outer folds do not cover all subjects")
        for k, parts in enumerate(run.inner):
            train = run.train_subjects(k)
            union = set().union(*parts)
            if union != train or sum(len(p) for p in parts) != len(train):
                problems.append(f"run {r} fold {k}: inner folds do not partition training set")
            if union & run.outer[k]:
                problems.append(f"run {r} fold {k}: test subject inside inner folds")
        n_ad = sum(1 for lab in plan.labels.values() if lab == "AD")
        for k, fold in enumerate(run.outer):
            expect = n_ad / len(run.outer)
            got = sum(1 for s in fold if plan.labels[s] == "AD")
            if abs(got - expect) > 1:
                problems.append(f"run {r} fold {k}: {got} AD subjects, expected ~{expect:.1f}")
    return problems


def fold_rows(m: Manifest, subjects) -> list:
    """Manifest rows (scans) belonging to ``subjects``; all eyes included."""
    subjects = set(subjects)
    return [r for r in m if r.subject_id in subjects]

