import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtmil.analysis import (
    attention_annotation_auc,
    extract_embeddings,
    fit_logistic,
    high_attention_fractions,
    logistic_probe,
    top_attention,
)
from mtmil.errors import DegenerateSplit, MissingTruth, UndefinedAUC
from mtmil.feature_store import FeatureBag
from mtmil.mil_net import TrainConfig, init_params, quantize
from mtmil.stats import _percentile_interval, roc_auc
from mtmil.trainer import BagPrediction, FoldModels, FoldResult, PredictionSet


def preds_for(attn_by_bag):
    return PredictionSet(["t"], {b: BagPrediction(np.zeros(1), np.asarray(a, float), np.arange(len(a)), np.zeros(1)) for b, a in attn_by_bag.items()})


def test_top_attention_ceil_and_ties():
    assert top_attention(np.array([0.1, 0.5, 0.5, 0.2]), 0.5).tolist() == [1, 2]
    assert top_attention(np.array([0.3, 0.3, 0.3]), 0.1).tolist() == [0]
    assert top_attention(np.arange(10.0), 0.1).tolist() == [9]
    assert top_attention(np.arange(11.0), 0.1).tolist() == [9, 10]
    assert top_attention(np.ones(20), 0.1).tolist() == [0, 1]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=40), st.floats(0.01, 1.0), st.floats(1e-3, 1e3))
def test_top_attention_rescale_invariant(levels, frac, c):
    a = np.array(levels, dtype=float) / 7
    assert top_attention(a, frac).tolist() == top_attention(a * c, frac).tolist()


def test_constructed_ten_tile_example():
    classes = np.array([2, 0, 3, 0, 1, 4, 5, 2, 3, 1])
    attn = np.array([0.05, 0.3, 0.05, 0.25, 0.05, 0.05, 0.05, 0.1, 0.05, 0.05])
    bags = {"x": FeatureBag("x", np.zeros((10, 1)), tile_class=classes)}
    rep = high_attention_fractions(preds_for({"x": attn}), bags, 0.1)
    assert rep.top_fractions["x"][0] == 1.0
    assert rep.all_fractions["x"][0] == 0.2
    full = high_attention_fractions(preds_for({"x": attn}), bags, 1.0)
    assert np.array_equal(full.top_fractions["x"], full.all_fractions["x"])
    for fr in (rep.top_fractions["x"], rep.all_fractions["x"]):
        assert abs(fr.sum() - 1) < 1e-12 and np.all((0 <= fr) & (fr <= 1))


def test_wilcoxon_on_attention_focused_cohort():
    rng = np.random.default_rng(0)
    bags, attn = {}, {}
    for i in range(30):
        n = int(rng.integers(20, 40))
        cls = rng.integers(0, 6, size=n)
        cls[:3] = 0
        bags[f"b{i}"] = FeatureBag(f"b{i}", np.zeros((n, 1)), tile_class=cls)
        attn[f"b{i}"] = rng.random(n) + 2.0 * (cls == 0)
    rep = high_attention_fractions(preds_for(attn), bags)
    assert rep.wilcoxon.p_value < 0.05
    d = rep.to_dict()
    assert d["n_bags"] == 30 and d["tumor_fraction_top"]["mean"] > d["tumor_fraction_all"]["mean"]


def test_missing_tile_class():
    with pytest.raises(MissingTruth):
        high_attention_fractions(preds_for({"x": [1.0]}), {"x": FeatureBag("x", np.zeros((1, 1)))})
    with pytest.raises(MissingTruth):
        attention_annotation_auc(preds_for({"x": [1.0]}), {"x": FeatureBag("x", np.zeros((1, 1)))}, B=10)


def _tumor_bags(seed, nb=12):
    rng = np.random.default_rng(seed)
    bags = {}
    for i in range(nb):
        n = int(rng.integers(4, 12))
        lab = rng.integers(0, 2, size=n)
        lab[0], lab[1] = 0, 1
        bags[f"b{i:02d}"] = FeatureBag(f"b{i:02d}", np.zeros((n, 1)), tile_tumor_label=lab)
    return bags, rng


def test_attention_equal_to_label_and_constant():
    bags, _ = _tumor_bags(1)
    exact = preds_for({b: bag.tile_tumor_label.astype(float) for b, bag in bags.items()})
    auc, ci, roc = attention_annotation_auc(exact, bags, B=200)
    assert auc == 1.0 and ci == (1.0, 1.0)
    assert [0.0, 1.0] in [list(p) for p in roc]
    flat = preds_for({b: np.full(bag.n_tiles, 0.3) for b, bag in bags.items()})
    assert attention_annotation_auc(flat, bags, B=50)[0] == 0.5


def test_single_class_pool():
    bags = {"x": FeatureBag("x", np.zeros((3, 1)), tile_tumor_label=np.zeros(3, dtype=int))}
    with pytest.raises(UndefinedAUC):
        attention_annotation_auc(preds_for({"x": [0.1, 0.2, 0.3]}), bags, B=10)


def test_bag_bootstrap_matches_naive_loop():
    bags, rng = _tumor_bags(2)
    attn = {b: rng.random(bag.n_tiles) + 0.5 * bag.tile_tumor_label for b, bag in bags.items()}
    B = 400
    auc, ci, _ = attention_annotation_auc(preds_for(attn), bags, B=B, seed=5)
    ids = sorted(bags)
    draws = np.random.default_rng(5).integers(0, len(ids), size=(B, len(ids)))
    reps = []
    for row in draws:
        s = np.concatenate([attn[ids[i]] for i in row])
        y = np.concatenate([bags[ids[i]].tile_tumor_label for i in row])
        reps.append(roc_auc(s, y))
    assert auc == roc_auc(np.concatenate([attn[b] for b in ids]), np.concatenate([bags[b].tile_tumor_label for b in ids]))
    assert ci == pytest.approx(_percentile_interval(np.array(reps), 0.95), abs=1e-12)


def _models_from(params, k=3):
    folds = [FoldResult(f, params, [0.5], 0, np.full((params.n_tasks, 2), 0.5)) for f in range(k)]
    return FoldModels("multitask", [f"T{j}" for j in range(params.n_tasks)], folds, TrainConfig(hidden=params.h, attention_dim=params.a))


def test_embeddings_single_tile_and_shape():
    p = quantize(init_params(6, 5, 3, 2, seed=2))
    rng = np.random.default_rng(2)
    data = {f"b{i}": FeatureBag(f"b{i}", rng.standard_normal((int(rng.integers(1, 9)), 6)).astype(np.float32)) for i in range(7)}
    data["one"] = FeatureBag("one", rng.standard_normal((1, 6)).astype(np.float32))
    ids = sorted(data)
    E = extract_embeddings(_models_from(p), data, ids)
    assert E.shape == (8, 5)
    x = data["one"].features.astype(np.float64)[0]
    assert np.allclose(E[ids.index("one")], np.maximum(p.W_e @ x + p.b_e, 0), rtol=1e-12, atol=1e-15)
    perm = {b: FeatureBag(b, bag.features[::-1].copy()) for b, bag in data.items()}
    assert np.allclose(extract_embeddings(_models_from(p), perm, ids), E, rtol=1e-6)


def test_probe_separable():
    rng = np.random.default_rng(0)
    y = np.repeat([0, 1], 50)
    X = rng.standard_normal((100, 2)) + 4 * y[:, None]
    res = logistic_probe(X, y, B=200)
    assert res.auc == 1.0 and res.converged
    assert all(a >= b - 1e-12 for a, b in zip(res.loss_trace, res.loss_trace[1:]))


def test_probe_permuted_labels_near_chance():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((500, 8))
    y = rng.permutation(np.repeat([0, 1], 250))
    res = logistic_probe(X, y, B=0)
    assert 0.35 < res.auc < 0.65 and res.ci is None


def test_probe_heavy_shrinkage():
    rng = np.random.default_rng(2)
    y = np.repeat([0, 1], 100)
    X = rng.standard_normal((200, 3)) + y[:, None]
    res = logistic_probe(X, y, l2=1e9, B=0)
    assert np.max(np.abs(res.weights)) < 1e-6
    w, b, *_ = fit_logistic(X, y, l2=1e9)
    scores = X @ w + b
    assert np.ptp(scores) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_probe_loss_non_increasing(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((60, 4))
    y = (X[:, 0] + rng.standard_normal(60) > 0).astype(int)
    _, _, _, _, trace = fit_logistic(X, y, l2=1e-3, max_iter=500)
    assert all(a >= b for a, b in zip(trace, trace[1:]))


def test_probe_degenerate_split():
    with pytest.raises(DegenerateSplit):
        logistic_probe(np.zeros((10, 2)), np.zeros(10, dtype=int), B=0)
    with pytest.raises(DegenerateSplit):
        logistic_probe(np.zeros((3, 2)), np.array([0, 0, 1]), B=0)
