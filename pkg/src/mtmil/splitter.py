"""Holdout carving and iterative multi-label stratified k-fold assignment."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyCohort, FormatError, InfeasibleRoles, InfeasibleSplit
from .feature_store import CohortManifest

SUBSETS = ("dev", "temporal", "external")
STRAT_CATEGORIES = ("scanner", "tissue_site", "procedure")


@dataclass(frozen=True)
class SplitAssignment:
    subset: dict  # bag_id -> "dev" | "temporal" | "external"
    fold: dict  # bag_id -> fold index, dev bags only
    k: int = 5
    seed: int = 0

    def bags_in(self, subset: str) -> list:
        return sorted(b for b, s in self.subset.items() if s == subset)

    def fold_bags(self, folds) -> list:
        folds = {folds} if isinstance(folds, int) else set(folds)
        return sorted(b for b, f in self.fold.items() if f in folds)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bag_id", "subset", "fold"])
        for b in sorted(self.subset):
            f = self.fold.get(b)
            w.writerow([b, self.subset[b], "" if f is None else f])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, k: Optional[int] = None, seed: int = 0) -> "SplitAssignment":
        reader = csv.reader(io.StringIO(text))
        if next(reader, None) != ["bag_id", "subset", "fold"]:
            raise FormatError("split file header must be bag_id,subset,fold")
        subset, fold = {}, {}
        for rec in reader:
            if len(rec) != 3 or rec[1] not in SUBSETS:
                raise FormatError(f"malformed split row {rec}")
            if rec[0] in subset:
                raise FormatError(f"duplicate bag_id {rec[0]} in split file")
            subset[rec[0]] = rec[1]
            if rec[1] == "dev":
                if rec[2] == "":
                    raise FormatError(f"dev bag {rec[0]} has no fold")
                fold[rec[0]] = int(rec[2])
            elif rec[2] != "":
                raise FormatError(f"holdout bag {rec[0]} has a fold")
        if k is None:
            k = max(fold.values()) + 1 if fold else 5
        return cls(subset, fold, k, seed)


def carve_holdouts(manifest: CohortManifest, temporal_fraction: float = 0.20) -> SplitAssignment:
    """External-stain bags, then the latest ``ceil(fraction * n)`` internal bags, are held out."""
    if len(manifest) == 0:
        raise EmptyCohort("manifest has no bags")
    if not 0 <= temporal_fraction <= 1:
        raise ValueError("temporal_fraction must lie in [0, 1]")
    subset = {}
    internal = []
    for r in manifest.rows:
        if r.stain_origin == "external":
            subset[r.bag_id] = "external"
        else:
            internal.append(r)
    n_temporal = math.ceil(temporal_fraction * len(internal) - 1e-9)
    # latest first; on equal timestamps the smaller bag_id is taken first
    internal.sort(key=lambda r: r.bag_id)
    internal.sort(key=lambda r: r.timestamp, reverse=True)
    for i, r in enumerate(internal):
        subset[r.bag_id] = "temporal" if i < n_temporal else "dev"
    return SplitAssignment(subset, {})


def stratification_matrix(manifest: CohortManifest, bag_ids: Sequence[str], categories=STRAT_CATEGORIES) -> tuple:
    """Binary indicator matrix: target labels (NA -> 0) then one-hot categorical columns."""
    labels = manifest.label_matrix(bag_ids)
    labels = np.nan_to_num(labels, nan=0.0).astype(bool)
    names = list(manifest.targets)
    cols = [labels]
    for cat in categories:
        values = [getattr(manifest.row(b), cat) for b in bag_ids]
        levels = sorted(set(values))
        names += [f"{cat}={lv}" for lv in levels]
        cols.append(np.array([[v == lv for lv in levels] for v in values], dtype=bool).reshape(len(values), len(levels)))
    return np.concatenate(cols, axis=1), names


def stratified_kfold(bag_ids: Sequence[str], strat_labels, k: int = 5, seed: int = 0, label_ids: Optional[Sequence[str]] = None) -> SplitAssignment:
    """Iterative stratification over a binary label matrix.

    The label with the fewest remaining positives is handled first; each of
    its unassigned bags goes to the fold with the largest remaining demand
    for that label, then the largest remaining capacity, then a seeded draw.
    Bags positive on no remaining label fill the folds with most capacity.
    """
    if k < 2:
        raise InfeasibleSplit("k must be at least 2")
    n = len(bag_ids)
    if k > n:
        raise InfeasibleSplit(f"cannot split {n} bags into {k} folds")
    Y = np.asarray(strat_labels, dtype=bool).reshape(n, -1)
    if label_ids is None:
        width = len(str(Y.shape[1]))
        label_ids = [f"label{j:0{width}d}" for j in range(Y.shape[1])]
    if len(set(bag_ids)) != n:
        raise InfeasibleSplit("duplicate bag ids")

    # canonical order makes the result independent of input row order
    order = sorted(range(n), key=lambda i: bag_ids[i])
    ids = [bag_ids[i] for i in order]
    Y = Y[order]
    label_order = sorted(range(Y.shape[1]), key=lambda j: label_ids[j])
    rng = np.random.default_rng(seed)

    demand = np.tile(Y.sum(axis=0) / k, (k, 1)).astype(np.float64)  # k x L
    capacity = np.full(k, n / k)
    assigned = np.full(n, -1)
    remaining = Y.copy()

    def pick(candidates: np.ndarray) -> int:
        best = candidates[capacity[candidates] == capacity[candidates].max()]
        if best.size == 1:
            return int(best[0])
        return int(best[rng.integers(best.size)])

    def place(i: int, f: int):
        assigned[i] = f
        demand[f] -= Y[i]
        capacity[f] -= 1
        remaining[i] = False

    while True:
        counts = remaining.sum(axis=0)
        live = [j for j in label_order if counts[j] > 0]
        if not live:
            break
        j = min(live, key=lambda c: counts[c])  # min keeps the first (lexicographic) on ties
        for i in np.flatnonzero(remaining[:, j]):
            col = demand[:, j]
            candidates = np.flatnonzero(col == col.max())
            place(i, pick(candidates))

    for i in np.flatnonzero(assigned < 0):
        place(i, pick(np.arange(k)))

    return SplitAssignment({b: "dev" for b in ids}, {b: int(f) for b, f in zip(ids, assigned)}, k, seed)


def make_splits(manifest: CohortManifest, k: int = 5, seed: int = 0, temporal_fraction: float = 0.20) -> SplitAssignment:
    """carve_holdouts followed by stratified folds over the dev bags."""
    holdout = carve_holdouts(manifest, temporal_fraction)
    dev = holdout.bags_in("dev")
    if not dev:
        return SplitAssignment(holdout.subset, {}, k, seed)
    Y, names = stratification_matrix(manifest, dev)
    folds = stratified_kfold(dev, Y, k, seed, names)
    return SplitAssignment(holdout.subset, folds.fold, k, seed)


def fold_roles(assignment: SplitAssignment, test_fold: int) -> tuple:
    """(train folds, selection fold, test fold); selection is the fold after test."""
    k = assignment.k
    if k < 3:
        raise InfeasibleRoles("train/selection/test roles need k >= 3")
    if not 0 <= test_fold < k:
        raise InfeasibleRoles(f"test fold {test_fold} outside 0..{k - 1}")
    selection = (test_fold + 1) % k
    train = tuple(f for f in range(k) if f not in (test_fold, selection))
    return train, selection, test_fold
