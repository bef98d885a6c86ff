"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion.

Criteria 4 to 7 share one session of full-size training: three cohort seeds,
each with the multi-task model and one single-task model per target.  Set
MTMIL_ACCEPTANCE_CACHE to a directory to keep those models between sessions;
the recorded training time is then reused for the runtime check.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from mtmil.analysis import attention_annotation_auc, extract_embeddings, high_attention_fractions, logistic_probe
from mtmil.feature_store import select_targets
from mtmil.mil_net import TrainConfig, grad_check
from mtmil.splitter import make_splits, stratified_kfold
from mtmil.stats import pearson, roc_auc, t_cdf, wilcoxon_signed_rank_one_tailed
from mtmil.synthgen import SynthConfig, generate_cohort
from mtmil.trainer import FoldModels, predict, predict_cv, train_many

from oracles import gradient_instance, pair_count_auc, pearson_direct, t_cdf_quadrature, wilcoxon_enumeration_p
from pipeline import artifacts, full_pipeline

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
MIN_POSITIVES = 20
CORES = os.cpu_count() or 1
# the budget is stated for four cores; fewer cores scale it up proportionally
TRAIN_BUDGET_S = 15 * 60 * 4 / min(CORES, 4)


def report(criterion, ok, value, tolerance):
    line = f"CRITERION {criterion} {'PASS' if ok else 'FAIL'} value={value} tolerance={tolerance}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ------------------------------------------------------------------ 1-3


def test_criterion_1_gradient_fidelity():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        for gated in (False, True):
            params, batch, cw = gradient_instance(seed, gated)
            worst = max(worst, grad_check(params, batch, cw, eps=1e-4))
    elapsed = time.perf_counter() - start
    report(1, worst < 1e-4 and elapsed < 30, f"max_rel_err={worst:.2e},seconds={elapsed:.1f}", "err<1e-4,seconds<30")


def test_criterion_2_statistic_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    auc_mismatch = 0
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        y = rng.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, 6, size=n).astype(float)  # heavy ties
        auc_mismatch += roc_auc(s, y) != float(pair_count_auc(s.tolist(), y.tolist()))
    wil_worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 13))
        d = rng.integers(-4, 5, size=n).astype(float)
        if not np.any(d):
            d[0] = 1.0
        r = wilcoxon_signed_rank_one_tailed(d, np.zeros(n))
        wil_worst = max(wil_worst, abs(r.p_value - float(wilcoxon_enumeration_p(d.tolist()))))
    t_worst = max(abs(t_cdf(t, nu) - t_cdf_quadrature(t, nu)) for nu in range(1, 61) for t in np.linspace(-8, 8, 33))
    r_worst = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 50))
        x = rng.standard_normal(n)
        yv = 0.5 * x + rng.standard_normal(n)
        r_worst = max(r_worst, abs(pearson(x, yv).statistic - pearson_direct(x.tolist(), yv.tolist())))
    elapsed = time.perf_counter() - start
    ok = auc_mismatch == 0 and wil_worst < 1e-15 and t_worst < 1e-9 and r_worst < 1e-12 and elapsed < 60
    report(
        2,
        ok,
        f"auc_mismatches={auc_mismatch},wilcoxon_err={wil_worst:.1e},t_err={t_worst:.1e},pearson_err={r_worst:.1e},seconds={elapsed:.1f}",
        "auc exact,wilcoxon exact,t<1e-9,pearson<1e-12,seconds<60",
    )


def test_criterion_3_splitter_properties():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    failures = []
    for case in range(100):
        n = int(rng.integers(10, 120))
        L = int(rng.integers(1, 6))
        k = int(rng.integers(3, 6))
        if case % 2:
            Y = rng.random((n, L)) < rng.uniform(0.05, 0.5, size=L)
        else:  # each bag positive for at most one label
            which = rng.integers(-1, L, size=n)
            Y = np.stack([which == j for j in range(L)], axis=1)
        ids = [f"bag{i:04d}" for i in rng.permutation(10_000)[:n]]
        a = stratified_kfold(ids, Y, k, seed=case)
        perm = rng.permutation(n)
        b = stratified_kfold([ids[i] for i in perm], Y[perm], k, seed=case)
        if sorted(a.fold) != sorted(ids) or not set(a.fold.values()) <= set(range(k)):
            failures.append((case, "partition"))
        if stratified_kfold(ids, Y, k, seed=case) != a:
            failures.append((case, "determinism"))
        if b.fold != a.fold:
            failures.append((case, "order"))
        if case % 2 == 0:
            folds = np.array([a.fold[x] for x in ids])
            for j in range(L):
                counts = np.bincount(folds[Y[:, j]], minlength=k)
                if counts.max() - counts.min() > 1:
                    failures.append((case, f"spread label {j}"))
    elapsed = time.perf_counter() - start
    report(3, not failures and elapsed < 30, f"failures={failures[:3]},seconds={elapsed:.1f}", "no failures,seconds<30")


# ------------------------------------------------------------------ shared training


def _cached(cache, seed, modes, train):
    if cache is None:
        start = time.perf_counter()
        return train(), time.perf_counter() - start
    root = Path(cache) / f"seed{seed}"
    stamp = root / "seconds.json"
    if stamp.is_file():
        return {m: FoldModels.load(root / m.replace(":", "_")) for m in modes}, json.loads(stamp.read_text())["seconds"]
    start = time.perf_counter()
    models = train()
    seconds = time.perf_counter() - start
    for m, fm in models.items():
        fm.save(root / m.replace(":", "_"))
    stamp.write_text(json.dumps({"seconds": seconds, "cores": CORES}))
    return models, seconds


@pytest.fixture(scope="session")
def trained():
    cache = os.environ.get("MTMIL_ACCEPTANCE_CACHE")
    runs, total = {}, 0.0
    for seed in SEEDS:
        bags, manifest = generate_cohort(SynthConfig(seed=seed))
        data = {b.bag_id: b for b in bags}
        assignment = make_splits(manifest, k=5, seed=seed)
        targets = [s.target_id for s in select_targets(manifest, MIN_POSITIVES) if s.included]
        modes = ["multitask"] + [f"singletask:{t}" for t in targets]
        config = TrainConfig(seed=seed)
        models, seconds = _cached(cache, seed, modes, lambda: train_many(data, manifest, assignment, targets, config, modes, threads=CORES))
        total += seconds
        runs[seed] = dict(data=data, manifest=manifest, assignment=assignment, targets=targets, models=models)
    return runs, total


def _cv_aucs(run, mode):
    fm = run["models"][mode]
    preds = predict_cv(fm, run["data"], run["assignment"])
    ids = run["assignment"].bags_in("dev")
    labels = run["manifest"].label_matrix(ids, fm.targets)
    P = preds.prob_matrix(ids)
    out = {}
    for j, t in enumerate(fm.targets):
        keep = ~np.isnan(labels[:, j])
        out[t] = roc_auc(P[keep, j], labels[keep, j].astype(int))
    return out


def _holdout_mean(run, subset):
    fm = run["models"]["multitask"]
    ids = run["assignment"].bags_in(subset)
    P = predict(fm, run["data"], ids).prob_matrix(ids)
    labels = run["manifest"].label_matrix(ids, fm.targets)
    aucs = []
    for j in range(len(fm.targets)):
        keep = ~np.isnan(labels[:, j])
        y = labels[keep, j].astype(int)
        if 0 < y.sum() < y.size:
            aucs.append(roc_auc(P[keep, j], y))
    return float(np.mean(aucs))


# ------------------------------------------------------------------ 4-7


def test_criterion_4_multitask_benefit(trained):
    runs, seconds = trained
    targets = runs[0]["targets"]
    mt = {t: np.mean([_cv_aucs(runs[s], "multitask")[t] for s in SEEDS]) for t in targets}
    st = {t: np.mean([_cv_aucs(runs[s], f"singletask:{t}")[t] for s in SEEDS]) for t in targets}
    prevalence = {}
    for t in targets:
        col = np.concatenate([runs[s]["manifest"].label_matrix(runs[s]["assignment"].bags_in("dev"), [t])[:, 0] for s in SEEDS])
        prevalence[t] = float(np.nanmean(col))
    rarest = sorted(targets, key=lambda t: prevalence[t])[:2]
    gain_rare = float(np.mean([mt[t] - st[t] for t in rarest]))
    gains = [mt[t] - st[t] for t in targets]
    r = pearson([prevalence[t] for t in targets], gains)
    per_target = ",".join(f"{t}:{mt[t]:.3f}/{st[t]:.3f}" for t in targets)
    print(f"multitask/singletask CV AUC per target: {per_target}")
    report(
        "4a",
        gain_rare >= 0.03 and seconds < TRAIN_BUDGET_S,
        f"rare_gain={gain_rare:.3f}({'+'.join(rarest)}),train_seconds={seconds:.0f},cores={CORES}",
        f"gain>=0.03,seconds<{TRAIN_BUDGET_S:.0f}",
    )
    report(
        "4b",
        r.statistic < 0,
        f"pearson_r={r.statistic:.3f},p={r.p_value:.2g},significant={r.p_value < 0.05}",
        "r<0 (p<0.05 reported)",
    )


def test_criterion_5_holdout_generalization(trained):
    run = trained[0][0]
    dev = float(np.mean(list(_cv_aucs(run, "multitask").values())))
    temporal, external = _holdout_mean(run, "temporal"), _holdout_mean(run, "external")
    gap = max(abs(temporal - dev), abs(external - dev))
    report(5, gap <= 0.05, f"dev={dev:.3f},temporal={temporal:.3f},external={external:.3f},max_gap={gap:.3f}", "gap<=0.05")


@pytest.fixture(scope="session")
def dev_attention(trained):
    run = trained[0][0]
    return run, predict_cv(run["models"]["multitask"], run["data"], run["assignment"])


def test_criterion_6_attention(dev_attention):
    run, preds = dev_attention
    rep = high_attention_fractions(preds, run["data"], 0.10)
    top, every = rep.tumor_pairs()
    auc, (lo, hi), _ = attention_annotation_auc(preds, run["data"], B=10_000, seed=0)
    ok = rep.wilcoxon.p_value < 0.05 and top.mean() > every.mean() and auc > 0.9 and lo > 0.5
    report(
        6,
        ok,
        f"tumor_top={top.mean():.3f},tumor_all={every.mean():.3f},wilcoxon_p={rep.wilcoxon.p_value:.2g},auc={auc:.3f},ci=({lo:.3f},{hi:.3f})",
        "p<0.05,auc>0.9,ci excludes 0.5",
    )


def test_criterion_7_probes(trained):
    run = trained[0][0]
    ids = run["assignment"].bags_in("dev")
    E = extract_embeddings(run["models"]["multitask"], run["data"], ids)
    rows = [run["manifest"].row(b) for b in ids]
    results = {}
    for task, labels in (("grade", [r.grade == "high" for r in rows]), ("primary_site", [bool(r.is_primary_site) for r in rows])):
        results[task] = logistic_probe(E, np.array(labels, dtype=int), task, B=1000).auc
    report(7, min(results.values()) >= 0.75, ",".join(f"{k}={v:.3f}" for k, v in results.items()), "auc>=0.75 each")


# ------------------------------------------------------------------ 8-9


@pytest.fixture(scope="session")
def reduced_pipelines(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    return full_pipeline(root / "run1", threads=1), full_pipeline(root / "run2", threads=1), full_pipeline(root / "run4", threads=4)


def test_criterion_8_determinism(reduced_pipelines):
    a, b, c = (artifacts(r) for r in reduced_pipelines)
    differing = sorted({k for k in a.keys() | b.keys() | c.keys() if not (a.get(k) == b.get(k) == c.get(k))})
    report(8, not differing and len(a) > 50, f"files={len(a)},differing={differing[:3]}", "byte-identical across runs and threads 1 vs 4")


def test_criterion_9_undefined_targets(reduced_pipelines):
    root = reduced_pipelines[0]
    found = {}
    ok = True
    for subset in ("temporal", "external"):
        doc = json.loads((root / f"eval_mt_{subset}.json").read_text())
        undefined = [t for t, v in doc.items() if t != "summary" and v["auc"] == "undefined"]
        defined = [v["auc"] for t, v in doc.items() if t != "summary" and v["auc"] != "undefined"]
        found[subset] = f"{len(defined)}/{len(defined) + len(undefined)}"
        ok &= bool(undefined) or subset == "external"
        ok &= doc["summary"]["n_targets"] == len(defined)
        ok &= math.isclose(doc["summary"]["mean"], float(np.mean(defined)), rel_tol=1e-12)
        ok &= all(doc[t]["n_pos"] == 0 or doc[t]["n_neg"] == 0 for t in undefined)
    report(9, ok, f"defined/total temporal={found['temporal']},external={found['external']}", "undefined reported and excluded, no error")
