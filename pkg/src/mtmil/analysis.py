"""Attention diagnostics and linear probes on bag embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import DegenerateBootstrap, DegenerateSplit, MissingTruth, ShapeError, UndefinedAUC
from .feature_store import TILE_CLASSES, TUMOR
from .stats import TestResult, _percentile_interval, bootstrap_auc_interval, roc_auc, roc_curve, wilcoxon_signed_rank_one_tailed
from .trainer import FoldModels, PredictionSet, predict


@dataclass
class AttentionReport:
    top_fractions: dict  # bag_id -> per-class fraction among top-attention tiles
    all_fractions: dict  # bag_id -> per-class fraction among all scored tiles
    wilcoxon: Optional[TestResult] = None
    annotation_auc: Optional[float] = None
    annotation_ci: Optional[tuple] = None
    annotation_roc: Optional[list] = field(default=None, repr=False)

    def tumor_pairs(self) -> tuple:
        ids = sorted(self.top_fractions)
        top = np.array([self.top_fractions[b][TUMOR] for b in ids])
        every = np.array([self.all_fractions[b][TUMOR] for b in ids])
        return top, every

    def to_dict(self) -> dict:
        top, every = self.tumor_pairs()
        out = {
            "n_bags": len(self.top_fractions),
            "classes": list(TILE_CLASSES),
            "mean_fraction_all": np.mean([self.all_fractions[b] for b in sorted(self.all_fractions)], axis=0).tolist(),
            "mean_fraction_top": np.mean([self.top_fractions[b] for b in sorted(self.top_fractions)], axis=0).tolist(),
            "tumor_fraction_all": {"mean": float(every.mean()), "sd": float(every.std(ddof=1)) if every.size > 1 else None},
            "tumor_fraction_top": {"mean": float(top.mean()), "sd": float(top.std(ddof=1)) if top.size > 1 else None},
        }
        if self.wilcoxon is not None:
            out["wilcoxon"] = self.wilcoxon.to_dict()
        if self.annotation_auc is not None:
            out["annotation_auc"] = {
                "auc": self.annotation_auc,
                "ci": list(self.annotation_ci) if self.annotation_ci else None,
                "roc": [list(p) for p in self.annotation_roc] if self.annotation_roc is not None else None,
            }
        return out


def top_attention(attention: np.ndarray, top_frac: float) -> np.ndarray:
    """Positions of the ``ceil(top_frac * n)`` largest weights; ties go to the lower position."""
    n = attention.size
    k = max(1, math.ceil(top_frac * n - 1e-9))
    order = np.lexsort((np.arange(n), -attention))
    return np.sort(order[:k])


def _class_fractions(classes: np.ndarray) -> np.ndarray:
    return np.bincount(classes, minlength=len(TILE_CLASSES)) / classes.size


def high_attention_fractions(predictions: PredictionSet, bags: Mapping, top_frac: float = 0.10, bag_ids: Optional[Sequence[str]] = None) -> AttentionReport:
    """Tile-class mix among the top-attention tiles versus all scored tiles, per bag.

    The one-sided Wilcoxon test asks whether the tumor share is higher in the
    top set; it needs at least one bag where the two shares differ.
    """
    if not 0 < top_frac <= 1:
        raise ValueError("top_frac must lie in (0, 1]")
    ids = sorted(predictions) if bag_ids is None else list(bag_ids)
    top, every = {}, {}
    for b in ids:
        bag = bags[b]
        if bag.tile_class is None:
            raise MissingTruth(f"{b} has no tile classes")
        pred = predictions[b]
        classes = bag.tile_class[pred.tile_index]
        sel = top_attention(pred.attention, top_frac)
        top[b] = _class_fractions(classes[sel])
        every[b] = _class_fractions(classes)
    report = AttentionReport(top, every)
    t, a = report.tumor_pairs()
    if np.any(t != a):
        report.wilcoxon = wilcoxon_signed_rank_one_tailed(t, a)
    return report


def _pair_matrix(scores_by_bag: list, labels_by_bag: list) -> np.ndarray:
    """C[i, j] = twice the Mann-Whitney count of positives of bag i over negatives of bag j."""
    nb = len(scores_by_bag)
    C = np.zeros((nb, nb))
    negs = [np.sort(s[~y]) for s, y in zip(scores_by_bag, labels_by_bag)]
    pos_scores = [s[y] for s, y in zip(scores_by_bag, labels_by_bag)]
    pos_all = np.concatenate(pos_scores) if pos_scores else np.zeros(0)
    owner = np.repeat(np.arange(nb), [p.size for p in pos_scores])
    for j, neg in enumerate(negs):
        if neg.size == 0 or pos_all.size == 0:
            continue
        below = np.searchsorted(neg, pos_all, side="left")
        upto = np.searchsorted(neg, pos_all, side="right")
        C[:, j] = np.bincount(owner, weights=below + upto, minlength=nb)
    return C


def attention_annotation_auc(
    predictions: PredictionSet,
    bags: Mapping,
    B: int = 10_000,
    seed: int = 0,
    level: float = 0.95,
    bag_ids: Optional[Sequence[str]] = None,
) -> tuple:
    """Pooled tile AUC of attention against tumor labels, with a slide-level bootstrap.

    Each bootstrap replicate resamples bags with replacement and recomputes
    the pooled AUC; replicates without both classes are redrawn (cap 100*B).
    Returns ``(auc, (lo, hi), roc_points)``.
    """
    ids = sorted(predictions) if bag_ids is None else list(bag_ids)
    scores, labels = [], []
    for b in ids:
        bag = bags[b]
        if bag.tile_tumor_label is None and bag.tile_class is None:
            raise MissingTruth(f"{b} has no tumor labels")
        tumor = bag.tile_tumor_label if bag.tile_tumor_label is not None else (bag.tile_class == TUMOR)
        pred = predictions[b]
        scores.append(np.asarray(pred.attention, dtype=np.float64))
        labels.append(np.asarray(tumor[pred.tile_index], dtype=bool))
    s_all = np.concatenate(scores) if scores else np.zeros(0)
    y_all = np.concatenate(labels) if labels else np.zeros(0, dtype=bool)
    auc = roc_auc(s_all, y_all)
    curve = roc_curve(s_all, y_all)

    C = _pair_matrix(scores, labels)
    n_pos = np.array([y.sum() for y in labels], dtype=np.float64)
    n_neg = np.array([(~y).sum() for y in labels], dtype=np.float64)
    rng = np.random.default_rng(seed)
    nb = len(ids)
    kept, have, drawn = [], 0, 0
    chunk = min(B, 1000)
    while have < B:
        if drawn >= 100 * B:
            raise DegenerateBootstrap(f"only {have} of {B} bag resamples contained both classes")
        m = min(chunk, 100 * B - drawn)
        idx = rng.integers(0, nb, size=(m, nb))
        drawn += m
        counts = np.zeros((m, nb))
        np.add.at(counts, (np.repeat(np.arange(m), nb), idx.ravel()), 1.0)
        twice_u = np.einsum("ri,ri->r", counts @ C, counts)
        denom = 2.0 * (counts @ n_pos) * (counts @ n_neg)
        ok = denom > 0
        vals = twice_u[ok] / denom[ok]
        kept.append(vals[: B - have])
        have += kept[-1].size
    return auc, _percentile_interval(np.concatenate(kept), level), curve


def extract_embeddings(models: FoldModels, bags: Mapping, bag_ids: Sequence[str]) -> np.ndarray:
    """Attention-pooled embeddings averaged over the fold models, one row per bag."""
    preds = predict(models, bags, bag_ids, ensemble=True)
    if not bag_ids:
        return np.zeros((0, models.folds[0].params.h))
    return np.stack([preds[b].embedding for b in bag_ids])


@dataclass
class ProbeResult:
    task: str
    auc: float
    ci: Optional[tuple]
    weights: np.ndarray
    bias: float
    converged: bool
    iterations: int
    loss_trace: list = field(default_factory=list, repr=False)
    roc: Optional[list] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "auc": self.auc,
            "ci": list(self.ci) if self.ci is not None else None,
            "converged": self.converged,
            "iterations": self.iterations,
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "roc": [list(p) for p in self.roc] if self.roc is not None else None,
        }


def stratified_holdout(labels: np.ndarray, test_fraction: float, seed: int) -> tuple:
    """Seeded per-class split; returns (train_idx, test_idx), both sorted."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        n_test = int(round(test_fraction * idx.size))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def _logistic_objective(w, b, X, y, l2):
    z = X @ w + b
    # log(1 + exp(z)) - y z, computed stably
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * (w @ w)
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    r = (p - y) / y.size
    return loss, X.T @ r + l2 * w, r.sum()


def fit_logistic(X: np.ndarray, y: np.ndarray, l2: float = 1e-2, tol: float = 1e-6, max_iter: int = 10_000) -> tuple:
    """L2 logistic regression by gradient descent with Armijo backtracking.

    Returns ``(weights, bias, converged, iterations, loss_trace)``; the bias
    is not penalized.
    """
    if l2 < 0:
        raise ValueError("l2 must be nonnegative")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.zeros(X.shape[1])
    b = 0.0
    step = 1.0
    loss, gw, gb = _logistic_objective(w, b, X, y, l2)
    trace = [loss]
    for it in range(1, max_iter + 1):
        gnorm2 = gw @ gw + gb * gb
        if math.sqrt(gnorm2) < tol:
            return w, b, True, it - 1, trace
        step = min(step * 2.0, 1e6)
        while True:
            w_new, b_new = w - step * gw, b - step * gb
            new_loss, new_gw, new_gb = _logistic_objective(w_new, b_new, X, y, l2)
            if new_loss <= loss - 0.5 * step * gnorm2 or step < 1e-16:
                break
            step *= 0.5
        if new_loss > loss:
            return w, b, False, it, trace
        w, b, loss, gw, gb = w_new, b_new, new_loss, new_gw, new_gb
        trace.append(loss)
    converged = math.sqrt(gw @ gw + gb * gb) < tol
    return w, b, converged, max_iter, trace


def logistic_probe(
    embeddings: np.ndarray,
    labels,
    task: str = "probe",
    l2: float = 1e-2,
    seed: int = 0,
    B: int = 10_000,
    test_fraction: float = 0.2,
) -> ProbeResult:
    """Fit a logistic probe on a stratified 80/20 split and score the held-out bags."""
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ShapeError(f"embeddings {X.shape} do not match {y.size} labels")
    train, test = stratified_holdout(y, test_fraction, seed)
    for name, part in (("train", train), ("test", test)):
        if part.size == 0 or len(np.unique(y[part])) < 2:
            raise DegenerateSplit(f"{name} split of the probe lacks a class")
    # standardize with training statistics so one l2 value fits any embedding scale
    mu = X[train].mean(axis=0)
    sd = X[train].std(axis=0)
    sd[sd == 0] = 1.0
    Z = (X - mu) / sd
    w, b, converged, iters, trace = fit_logistic(Z[train], y[train], l2)
    scores = Z[test] @ w + b
    try:
        auc = roc_auc(scores, y[test])
        ci = bootstrap_auc_interval(scores, y[test], B=B, seed=seed) if B else None
        curve = roc_curve(scores, y[test])
    except UndefinedAUC:
        raise DegenerateSplit("probe test split lacks a class") from None
    return ProbeResult(task, auc, ci, w / sd, float(b - (w / sd) @ mu), converged, iters, trace, curve)
