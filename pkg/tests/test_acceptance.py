"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``CRITERION n: PASS|FAIL`` line. The long runs
(phantom run-alls and the 100-experiment t-test study) take about 15
minutes on one CPU core.
"""

import itertools
import time
import warnings

import numpy as np
import pytest

from conftest import random_manifest
from octad import cohort as co
from octad.augment import RAW_ONLY, apply_array, sample_op
from octad.cli import run
from octad.evaluation import auc_scores, default_rho, load_predictions, run_nested_cv
from octad.explain import channel_weights, overlap
from octad.model import (
    conv_backward,
    conv_forward,
    head_forward,
    init_params,
    layernorm_backward,
    layernorm_forward,
    loss_and_grads,
    weighted_ce_loss,
)
from octad.phantom import BScan, PhantomSpec, generate_bscan, generate_cohort
from octad.pipeline import load_samples, phantom_spec
from octad.preprocess import crop_center, preprocess_manifest, rectify
from octad.stats import betainc, calibrated_t_test
from octad.store import RunConfig, Rng, module_seed
from scipy import stats as sps

FAST = "--fast"


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return emit


def run_all_cli(out, config_text, *flags):
    cfg = out.parent / f"{out.name}.cfg"
    cfg.write_text(config_text)
    t = time.perf_counter()
    code = run(["run-all", "--config", str(cfg), "--out", str(out), "--parallel", "1", *flags])
    assert code == 0
    preds = load_predictions(out / "predictions.csv")
    aucs = [auc_scores([p.score for p in preds if p.run == r], [p.label for p in preds if p.run == r])
            for r in sorted({p.run for p in preds})]
    return float(np.mean(aucs)), time.perf_counter() - t


@pytest.fixture(scope="session")
def signal_runs(tmp_path_factory):
    d = tmp_path_factory.mktemp("signal")
    first = run_all_cli(d / "a", "seed=0\nthinning_fraction=0.4\n", FAST)
    second = run_all_cli(d / "b", "seed=0\nthinning_fraction=0.4\n", FAST)
    return d, first, second


# --------------------------------------------------------------------------
# 1. signal recovery and null check


def test_criterion_1_signal_recovery(signal_runs, tmp_path, verdict):
    _, (signal_auc, t_signal), _ = signal_runs
    null_auc, t_null = run_all_cli(tmp_path / "null", "seed=0\nthinning_fraction=0\n", FAST)
    ok = signal_auc >= 0.90 and 0.35 <= null_auc <= 0.65 and max(t_signal, t_null) <= 15 * 60
    verdict(1, ok, f"signal mAUC={signal_auc:.3f} (>=0.90) null mAUC={null_auc:.3f} "
                   f"([0.35, 0.65]) time={t_signal:.0f}s/{t_null:.0f}s (<=900s)")


# --------------------------------------------------------------------------
# 2. ablation ordering on a geometry-only phantom

GEOMETRY = """seed=0
phantom_preset=geometry
image_size=64
epochs=30
swa_start_epoch=24
lr_grid=0.001
"""


def test_criterion_2_ablation_ordering(tmp_path, verdict):
    aucs = {mode: run_all_cli(tmp_path / mode, GEOMETRY, "--mode", mode)[0]
            for mode in ("contour3", "raw3", "composite")}
    best_single = max(aucs["contour3"], aucs["raw3"])
    ok = (aucs["contour3"] - aucs["raw3"] >= 0.1
          and aucs["composite"] >= best_single - 0.05)
    verdict(2, ok, " ".join(f"{k}={v:.3f}" for k, v in aucs.items())
            + f" contour3-raw3={aucs['contour3'] - aucs['raw3']:.3f} (>=0.1)")


# --------------------------------------------------------------------------
# 3. oracle equivalence


def pair_count_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def pixel_count(mask, region):
    inter = union = s = r = 0
    for a, b in zip(mask.ravel().tolist(), region.ravel().tolist()):
        inter += a and b
        union += a or b
        s += a
        r += b
    if not s or not r:
        return 0.0, 0.0, 0.0
    return inter / union, 2 * inter / (s + r), inter / r


def test_criterion_3_oracle_equivalence(verdict):
    g = np.random.default_rng(3)
    auc_bad = 0
    for _ in range(1000):
        n = int(g.integers(2, 60))
        labels = g.integers(0, 2, n)
        labels[:2] = (0, 1)
        scores = g.integers(0, 12, n) / 11  # ties are common
        auc_bad += auc_scores(scores, labels) != pair_count_auc(scores, labels)

    mask_bad = 0
    for _ in range(100):
        mask = g.random((16, 16)) < g.random()
        regions = g.random((2, 16, 16)) < g.random((2, 1, 1))
        ov = overlap(mask, regions)
        for k in range(2):
            ref = pixel_count(mask, regions[k])
            got = (ov.iou[k], ov.dice[k], ov.fill[k])
            mask_bad += any(abs(a - b) > 1e-12 for a, b in zip(got, ref))

    # calibrated t-test against the formula written out directly
    t_err = 0.0
    std_err = 0.0
    for _ in range(200):
        n = int(g.integers(2, 11))
        a, b = g.random(n), g.random(n)
        rho = float(g.uniform(0, 1))
        d = a - b
        t = d.mean() / np.sqrt((1 / n + rho) * d.var(ddof=1))
        df = n - 1
        p = betainc(df / 2, 0.5, df / (df + t * t))
        r = calibrated_t_test(a, b, rho)
        t_err = max(t_err, abs(r.t_statistic - t), abs(r.p_value - p))
        p_sp = 2 * sps.t.sf(abs(t), df)
        t_err = max(t_err, abs(r.p_value - p_sp))
        ref = sps.ttest_rel(a, b)
        r0 = calibrated_t_test(a, b, 0.0)
        std_err = max(std_err, abs(r0.t_statistic - ref.statistic) / max(1, abs(ref.statistic)),
                      abs(r0.p_value - ref.pvalue))
    ok = auc_bad == 0 and mask_bad == 0 and t_err < 1e-10 and std_err < 1e-10
    verdict(3, ok, f"auc mismatches={auc_bad}/1000 mask mismatches={mask_bad}/100 "
                   f"t-test max err={t_err:.1e} rho=0 vs paired t max err={std_err:.1e}")


# --------------------------------------------------------------------------
# 4. gradient correctness


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def numeric_grad(f, x, h=1e-6):
    out = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def test_criterion_4_gradients(verdict):
    g = np.random.default_rng(4)
    errs = {}

    x, w, b = g.normal(size=(2, 3, 7, 6)), g.normal(size=(4, 3, 3, 3)), g.normal(size=4)
    up = g.normal(size=(2, 4, 4, 3))
    _, cache = conv_forward(x, w, b)
    grads = conv_backward(up, w, cache)
    f = lambda: float((conv_forward(x, w, b)[0] * up).sum())  # noqa: E731
    errs["conv"] = max(rel_err(gr, numeric_grad(f, v)) for gr, v in zip(grads, (x, w, b)))

    x, gam, bet, up = (g.normal(size=(3, 6)), g.normal(size=6), g.normal(size=6),
                       g.normal(size=(3, 6)))
    _, cache = layernorm_forward(x, gam, bet)
    grads = layernorm_backward(up, gam, cache)
    f = lambda: float((layernorm_forward(x, gam, bet)[0] * up).sum())  # noqa: E731
    errs["layernorm"] = max(rel_err(gr, numeric_grad(f, v)) for gr, v in zip(grads, (x, gam, bet)))

    logits, labels, wts = g.normal(size=(4, 2)), np.array([0, 1, 1, 0]), g.uniform(1, 2, 4)
    _, d = weighted_ce_loss(logits, labels, wts)
    errs["weighted_ce"] = rel_err(d, numeric_grad(lambda: weighted_ce_loss(logits, labels, wts)[0],
                                                  logits))

    for train_mode in (False, True):
        p = init_params(Rng(5), (3, 4, 6, 5, 8), dtype=np.float64)
        for k in p:
            if k.endswith(".b"):
                p[k] = g.normal(0, 0.1, size=p[k].shape)
        x = g.normal(size=(3, 3, 8, 8))
        lab, wt = np.array([1, 0, 1]), np.array([2.0, 1.0, 1.5])
        _, grads = loss_and_grads(p, x, lab, wt, train_mode, Rng(9))
        f = lambda: loss_and_grads(p, x, lab, wt, train_mode, Rng(9))[0]  # noqa: E731
        errs[f"network(train={train_mode})"] = max(rel_err(grads[k], numeric_grad(f, p[k]))
                                                   for k in p)

    cam_err = 0.0
    p = init_params(Rng(3), (3, 4, 6), dtype=np.float64)
    x = g.normal(size=(3, 20, 20))
    for cls in (0, 1):
        A, alpha = channel_weights(p, x, cls)
        num = np.zeros_like(A)
        for i in np.ndindex(A.shape):
            Ap, Am = A.copy(), A.copy()
            Ap[i] += 1e-6
            Am[i] -= 1e-6
            num[i] = (head_forward(p, Ap[None])[0, cls] - head_forward(p, Am[None])[0, cls]) / 2e-6
        cam_err = max(cam_err, rel_err(alpha, num.mean(axis=(1, 2))))

    ok = max(errs.values()) < 1e-4 and cam_err < 1e-3
    verdict(4, ok, " ".join(f"{k}={v:.1e}" for k, v in errs.items())
            + f" (<1e-4) grad-cam alpha={cam_err:.1e} (<1e-3)")


# --------------------------------------------------------------------------
# 5. leakage and matching invariants


def test_criterion_5_leakage_and_matching(verdict):
    violations = []
    instantiations = 0
    spec = co.CohortSpec()
    for seed in range(50):
        m = random_manifest(1000 + seed)
        demo = {r.subject_id: (r.age, r.sex, r.instance) for r in m}
        with warnings.catch_warnings():
            warnings.simplefilter("error", co.MatchToleranceWarning)
            pairs = co.match_pairs(m, co.CohortSpec(match_seed=seed))
        used = [c for cs in pairs.values() for c in cs]
        if len(used) != len(set(used)):
            violations.append(f"manifest {seed}: control reused")
        for a, cs in pairs.items():
            for c in cs:
                if (demo[a][1:] != demo[c][1:]
                        or abs(demo[a][0] - demo[c][0]) > spec.age_tolerance):
                    violations.append(f"manifest {seed}: {a}->{c} breaks matching")
        matched = co.match_controls(m, co.CohortSpec(match_seed=seed))
        plan = co.plan_folds(matched, rng=Rng(seed))
        rows = list(matched)
        for r, run_folds in enumerate(plan.runs):
            for k, test in enumerate(run_folds.outer):
                instantiations += 1
                train = run_folds.train_subjects(k)
                test_rows = {(x.subject_id, x.eye, x.instance) for x in co.fold_rows(matched, test)}
                train_rows = {(x.subject_id, x.eye, x.instance)
                              for x in co.fold_rows(matched, train)}
                if {s for s, _, _ in test_rows} & {s for s, _, _ in train_rows}:
                    violations.append(f"manifest {seed} run {r} fold {k}: subject spans folds")
                for x in rows:
                    key = (x.subject_id, x.eye, x.instance)
                    if (x.subject_id in test) != (key in test_rows):
                        violations.append(f"manifest {seed} run {r} fold {k}: eye split")
                if set().union(*run_folds.inner[k]) & test:
                    violations.append(f"manifest {seed} run {r} fold {k}: test in inner folds")
                if len(test_rows) + len(train_rows) != len(rows):
                    violations.append(f"manifest {seed} run {r} fold {k}: rows lost")
    ok = not violations and instantiations == 50 * 25
    verdict(5, ok, f"{instantiations} fold instantiations, {len(violations)} violations "
                   + "; ".join(violations[:3]))


# --------------------------------------------------------------------------
# 6. determinism


def test_criterion_6_determinism(signal_runs, verdict):
    d, _, _ = signal_runs
    names = ("predictions.csv", "report.txt", "overlaps.txt")
    same = {n: (d / "a" / n).read_bytes() == (d / "b" / n).read_bytes() for n in names}
    tree_a = {p.relative_to(d / "a"): p.read_bytes() for p in (d / "a").rglob("*") if p.is_file()}
    tree_b = {p.relative_to(d / "b"): p.read_bytes() for p in (d / "b").rglob("*") if p.is_file()}
    ok = all(same.values()) and tree_a == tree_b
    verdict(6, ok, " ".join(f"{n}={'identical' if v else 'DIFFERENT'}" for n, v in same.items())
            + f" whole tree ({len(tree_a)} files) {'identical' if tree_a == tree_b else 'DIFFERENT'}")


# --------------------------------------------------------------------------
# 7. preprocessing invariants


def test_criterion_7_preprocessing(verdict):
    g = np.random.default_rng(7)
    spreads = []
    for i in range(100):
        spec = PhantomSpec(curvature_amplitude=float(g.uniform(0, 30)),
                           boundary_jitter=float(g.uniform(0, 3)), label=("CN", "AD")[i % 2])
        if i % 2:
            spec = spec.with_signal(thinning_fraction=float(g.uniform(0, 0.6)))
        r = rectify(generate_bscan(spec, Rng(int(g.integers(2**62)))))
        spreads.append(float(r.contours[-1].max() - r.contours[-1].min()))

    px = np.arange(650, dtype=np.uint16)[:, None].repeat(512, axis=1)
    cropped = crop_center(BScan(px, np.repeat(np.linspace(100, 500, 11)[:, None], 512, axis=1)))
    offset = int(cropped.pixels[0, 0])

    draws = changed = 0
    rng = Rng(77)
    while draws < 1000:
        op = sample_op(rng, 64)
        if op.kind not in RAW_ONLY:
            continue
        draws += 1
        data = np.stack([g.random((64, 64)), g.random((64, 64)),
                         (g.random((64, 64)) > 0.9)]).astype(np.float32)
        out = apply_array(op, data, rng)
        changed += out[1:].tobytes() != data[1:].tobytes()
    ok = max(spreads) <= 1.0 and offset == 69 and changed == 0
    verdict(7, ok, f"max OB_RPE spread={max(spreads):.2f}px over 100 phantoms (<=1) "
                   f"crop offset={offset} (==69) channels 2-3 changed in {changed}/1000 draws")


# --------------------------------------------------------------------------
# 8. statistical sanity of the calibrated test


def test_criterion_8_equal_skill_rejections(tmp_path, verdict):
    cfg = RunConfig(image_size=32, epochs=3, swa_start_epoch=2, lr_grid=(1e-3,))
    raw = generate_cohort(cfg.n_ad, cfg.n_cn, phantom_spec(cfg), Rng(module_seed(0, "phantom")),
                          tmp_path / "ph")
    m = preprocess_manifest(co.select_ad(raw, co.CohortSpec()), tmp_path / "ph", tmp_path / "pp",
                            cfg.channel_mode, cfg.image_size)
    samples = load_samples(m, tmp_path / "pp")
    rejections = 0
    for e in range(100):
        plan = co.plan_folds(m, 5, 5, 3, Rng(module_seed(1000 + e, "folds")))
        a = run_nested_cv(plan, cfg.lr_grid, samples, config=cfg, rng=Rng(2 * e + 1))
        b = run_nested_cv(plan, cfg.lr_grid, samples, config=cfg, rng=Rng(2 * e + 2))
        r = calibrated_t_test(a.report.run_aucs, b.report.run_aucs, default_rho(5))
        rejections += r.p_value < 0.05
    verdict(8, rejections <= 10, f"{rejections}/100 rejections at alpha=0.05 (<=10)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
