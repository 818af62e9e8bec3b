"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line; the lines are printed together in the
terminal summary (see conftest.py).  Run on its own with
``pytest tests/test_acceptance.py -v``.
"""

import json
import time
from fractions import Fraction

import numpy as np
import pytest

from ldcmia.cli import main
from ldcmia.metrics import auc, roc_curve, tpr_at_fpr
from ldcmia.nn import MlpConfig, MlpModel, backward, cross_entropy, predict_proba
from ldcmia.pipeline import AblationSpec, RunConfig, cmd_ablate, run_pipeline
from ldcmia.scores import calibrated_score, enhanced_calibrated_score, neighborhood_info

SEEDS = range(5)
RESULTS: list[str] = []

# 10-class, low-dimensional fixture whose generalization gap responds to the
# target train size; sizes need 5 * 500 + 4000 <= 7000 samples
SIZE_SWEEP_OVERRIDE = {
    "dataset": {"n_classes": 10, "n_features": 5, "samples_per_class": 700, "separation": 2.0},
    "attacks": ["ldc"],
}
SIZE_GRID = (250, 500, 1000, 2000, 4000)


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- independent oracles -----------------------------------------------------


def finite_difference_grads(model, x, y, eps=1e-5):
    out = []
    for p in model.params():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            up = cross_entropy(predict_proba(model, x), y).mean()
            p[idx] = orig - eps
            down = cross_entropy(predict_proba(model, x), y).mean()
            p[idx] = orig
            g[idx] = (up - down) / (2 * eps)
        out.append(g)
    return out


def pairwise_mann_whitney(s, y):
    m, n = s[y], s[~y]
    diff = m[:, None] - n[None, :]
    twice = 2 * int((diff > 0).sum()) + int((diff == 0).sum())
    return Fraction(twice, 2 * len(m) * len(n))


def enumerate_tpr_at_fpr(s, y, target):
    best = 0.0
    n_pos, n_neg = y.sum(), (~y).sum()
    for t in np.r_[np.inf, np.unique(s)]:
        pred = s >= t
        if (pred & ~y).sum() / n_neg <= target:
            best = max(best, (pred & y).sum() / n_pos)
    return best


def loop_neighbor_info(q, aux, theta):
    qn = sum(v * v for v in q) ** 0.5
    count = 0
    for row in aux:
        rn = sum(v * v for v in row) ** 0.5
        sim = 0.0 if qn == 0 or rn == 0 else sum(a * b for a, b in zip(q, row)) / (qn * rn)
        count += sim > theta
    return 1.0 / count if count else 1.0


# -- shared runs ---------------------------------------------------------------


@pytest.fixture(scope="module")
def default_runs():
    start = time.perf_counter()
    runs = [run_pipeline(RunConfig.from_dict({"seed": s})) for s in SEEDS]
    return runs, time.perf_counter() - start


def ablate(tmp_path_factory, override, kind, grid):
    out = tmp_path_factory.mktemp(kind)
    cfg = RunConfig.from_dict(override)
    rows = cmd_ablate(cfg, AblationSpec(kind, grid, repeats=len(SEEDS)), out)
    failed = [r for r in rows if r["status"] != "ok"]
    assert not failed, failed
    table = {}
    for r in rows:
        table[(r["repeat"], r["grid_value"])] = r["auc"]
    return table, out


# -- criteria ------------------------------------------------------------------


def test_criterion_01_gradient_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    n_models = 24
    for i in range(n_models):
        sizes = (int(rng.integers(1, 5)), *map(int, rng.integers(1, 6, int(rng.integers(1, 3)))), int(rng.integers(2, 4)))
        model = MlpModel.init(MlpConfig(sizes, seed=i))
        for b in model.biases:
            b[...] = rng.normal(scale=0.5, size=b.shape)
        x = rng.normal(size=(int(rng.integers(1, 6)), sizes[0]))
        y = rng.integers(0, sizes[-1], len(x))
        for a, b in zip(backward(model, x, y), finite_difference_grads(model, x, y)):
            denom = np.maximum(np.abs(a) + np.abs(b), 1e-8)
            worst = max(worst, float((np.abs(a - b) / denom).max()))
    elapsed = time.perf_counter() - start
    record(1, "gradient oracle", worst < 1e-4 and elapsed < 60, f"{n_models} nets, max rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_02_auc_oracle():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 501))
        s = np.round(rng.normal(size=n), int(rng.integers(0, 4)))  # coarse rounding creates ties
        y = rng.random(n) < rng.uniform(0.1, 0.9)
        y[0], y[-1] = True, False
        worst = max(worst, abs(auc(roc_curve(s, y)) - float(pairwise_mann_whitney(s, y))))
    record(2, "AUC equals Mann-Whitney", worst <= 1e-9, f"200 sets, max |diff| {worst:.1e}")


def test_criterion_03_tpr_at_fpr_oracle():
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(20, 2500))
        s = np.round(rng.normal(size=n) + 0.5 * (rng.random(n) < 0.5), int(rng.integers(1, 4)))
        y = rng.random(n) < 0.5
        y[0], y[-1] = True, False
        roc = roc_curve(s, y)
        for target in (1e-4, 1e-3, 1e-2):
            mismatches += tpr_at_fpr(roc, target) != enumerate_tpr_at_fpr(s, y, target)
    record(3, "TPR@FPR equals enumeration", mismatches == 0, f"100 sets x 3 targets, {mismatches} mismatches")


def test_criterion_04_ni_oracle():
    rng = np.random.default_rng(3)
    worst, checks = 0.0, 0
    for _ in range(100):
        n, d = int(rng.integers(1, 1001)), int(rng.integers(2, 9))
        aux = rng.normal(size=(n, d))
        aux[rng.random(n) < 0.02] = 0.0
        aux_rows = aux.tolist()
        q = rng.normal(size=d)
        for theta in (0.0, 0.25, 0.5):
            worst = max(worst, abs(neighborhood_info(q, aux, theta) - loop_neighbor_info(q.tolist(), aux_rows, theta)))
            checks += 1
    record(4, "NI equals double loop", worst <= 1e-12, f"{checks} checks, max |diff| {worst:.1e}")


def test_criterion_05_calibration_identity(default_runs):
    runs, _ = default_runs
    worst, n_records = 0.0, 0
    for res in runs:
        for table in (res.shadow_records, res.target_records):
            worst = max(worst, float(np.abs(table.s_cal_basic - (table.s_target - table.s_ref)).max()))
            worst = max(worst, float(np.abs(table.s_cal_enhanced - table.s_cal_basic * table.ni).max()))
            n_records += len(table)
    # theta = 1 leaves every sample without neighbors, so ni = 1 throughout
    no_nbr = run_pipeline(RunConfig.from_dict({"theta": 1.0}), attacks=["watson"])
    t = no_nbr.target_records
    forced = np.all(t.ni == 1.0) and np.array_equal(t.s_cal_enhanced, t.s_cal_basic)
    forced &= np.array_equal(enhanced_calibrated_score(t.s_target, t.s_ref, 1.0), calibrated_score(t.s_target, t.s_ref))
    ok = worst <= 1e-12 and bool(forced)
    record(5, "calibration identities", ok, f"{n_records} records, max err {worst:.1e}, ni=1 bit-exact {bool(forced)}")


def test_criterion_06_attack_ordering(default_runs):
    runs, elapsed = default_runs
    wins, notes, overfit = 0, [], True
    for res in runs:
        a = {k: r.auc for k, r in res.reports.items()}
        acc = res.accuracies["target"]
        overfit &= acc["train"] >= 0.95 and acc["test"] <= 0.75
        win = a["ldc"] >= max(a["watson"], a["yeom"], a["salem"])
        wins += win
        notes.append(f"ldc {a['ldc']:.3f}/watson {a['watson']:.3f}/salem {a['salem']:.3f}/yeom {a['yeom']:.3f}")
    ok = wins >= 4 and overfit and elapsed < 600
    record(6, "LDC AUC >= Watson, Yeom, Salem", ok, f"{wins}/5 seeds, overfit {overfit}, {elapsed:.0f}s; " + "; ".join(notes))


def test_criterion_07_overfitting_trend(tmp_path_factory):
    table, _ = ablate(tmp_path_factory, SIZE_SWEEP_OVERRIDE, "train_size_sweep", SIZE_GRID)
    good, notes = 0, []
    for r in SEEDS:
        aucs = [table[(r, n)] for n in SIZE_GRID]
        inversions = sum(b > a for a, b in zip(aucs, aucs[1:]))
        good += inversions <= 1
        notes.append("[" + ", ".join(f"{v:.3f}" for v in aucs) + f"] inv={inversions}")
    record(7, "LDC AUC falls with train size", good >= 4, f"{good}/5 seeds; " + "; ".join(notes))


def test_criterion_08_dp_defense(tmp_path_factory):
    table, out = ablate(tmp_path_factory, {"attacks": ["ldc"]}, "dp_sweep", (0.0, 1.0))
    lower = sum(table[(r, 1.0)] < table[(r, 0.0)] for r in SEEDS)
    max_norm = 0.0
    for manifest_path in sorted(out.glob("cell_001_*/manifest.json")):
        max_norm = max(max_norm, json.loads(manifest_path.read_text())["training"]["target"]["max_clipped_norm"])
    n_cells = len(list(out.glob("cell_001_*/manifest.json")))
    ok = lower >= 4 and n_cells == len(SEEDS) and 0 < max_norm <= 10.0
    pairs = "; ".join(f"{table[(r, 0.0)]:.3f}->{table[(r, 1.0)]:.3f}" for r in SEEDS)
    record(8, "DP sigma=1 lowers LDC AUC", ok, f"{lower}/5 seeds, max clipped norm {max_norm:.6f} <= 10; {pairs}")


def test_criterion_09_feature_ablation(tmp_path_factory):
    grid = ("none", "drop_label", "drop_s_target", "drop_s_cal")
    table, _ = ablate(tmp_path_factory, {}, "feature_removal", grid)
    largest, notes = 0, []
    for r in SEEDS:
        drops = {g: table[(r, "none")] - table[(r, g)] for g in grid[1:]}
        largest += max(drops, key=drops.get) == "drop_s_cal"
        notes.append(" ".join(f"{g[5:]}={d:+.3f}" for g, d in drops.items()))
    record(9, "dropping s_cal hurts most", largest >= 3, f"{largest}/5 seeds; " + "; ".join(notes))


def test_criterion_10_determinism(tmp_path):
    dirs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["run", "--seed", "3", "--out", str(d)]) for d in dirs]
    names = sorted(p.name for p in (dirs[0] / "metrics").glob("*.json"))
    same = all((dirs[0] / "metrics" / n).read_bytes() == (dirs[1] / "metrics" / n).read_bytes() for n in names)
    ok = codes == [0, 0] and len(names) == 4 and same
    record(10, "byte-identical reports", ok, f"{len(names)} metrics JSON files compared, identical {same}")


def test_criterion_11_threshold_rule_equivalence(default_runs):
    runs, _ = default_runs
    watson = runs[0].outputs["watson"]
    s, y = watson.scores, watson.ground_truth
    roc = roc_curve(s, y)
    rng = np.random.default_rng(11)
    taus = np.r_[rng.uniform(s.min() - 0.5, s.max() + 0.5, 15), rng.choice(s, 5)]
    mismatches = 0
    for tau in taus:
        pred = s > tau
        tp, fp = int((pred & y).sum()), int((pred & ~y).sum())
        fn, tn = int((~pred & y).sum()), int((~pred & ~y).sum())
        r_tp, r_fp = roc.point_above(float(tau))
        mismatches += (tp, fp, fn, tn) != (r_tp, r_fp, roc.n_members - r_tp, roc.n_nonmembers - r_fp)
    record(11, "threshold rule matches ROC point", mismatches == 0, f"{len(taus)} thresholds, {mismatches} mismatches")
