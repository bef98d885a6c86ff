"""Cross-validated training of multi-task and single-task MIL models."""

from __future__ import annotations

import json
import logging
import multiprocessing
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import EmptyDev, FormatError, SelectionInfeasible, ShapeError, StoreIo
from .feature_store import CohortManifest
from .mil_net import (
    AdamState,
    ModelParams,
    TrainConfig,
    adam_step,
    checkpoint_bytes,
    forward_many,
    init_params,
    loss_and_grad,
    params_from_checkpoint,
    quantize,
    weights_from_prevalence,
)
from .splitter import SplitAssignment, fold_roles
from .stats import roc_auc

log = logging.getLogger(__name__)

MULTITASK = "multitask"
INFER_CHUNK = 32


def parse_mode(mode: str) -> tuple:
    """``"multitask"`` or ``"singletask:<target>"`` -> (kind, target or None)."""
    if mode == MULTITASK:
        return MULTITASK, None
    if mode.startswith("singletask:") and len(mode) > len("singletask:"):
        return "singletask", mode.split(":", 1)[1]
    raise ValueError(f"mode must be 'multitask' or 'singletask:<target>', got {mode!r}")


def mode_targets(mode: str, targets: Sequence[str]) -> list:
    kind, target = parse_mode(mode)
    if kind == MULTITASK:
        return list(targets)
    if target not in targets:
        raise ValueError(f"single-task target {target!r} is not among the selected targets")
    return [target]


def _key(*parts) -> list:
    return [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]


def sample_bag(n_tiles: int, bag_size: int, rng: np.random.Generator) -> np.ndarray:
    """All tiles in order when the bag is small enough, else ``bag_size`` distinct tiles (sorted)."""
    if n_tiles < 1:
        raise ValueError("bag has no tiles")
    if n_tiles <= bag_size:
        return np.arange(n_tiles)
    return np.sort(rng.choice(n_tiles, size=bag_size, replace=False))


def inference_tiles(bag_id: str, n_tiles: int, config: TrainConfig) -> np.ndarray:
    return sample_bag(n_tiles, config.infer_bag_size, np.random.default_rng(_key(config.seed, "infer", bag_id)))


@dataclass
class FoldResult:
    test_fold: int
    params: ModelParams
    trace: list  # selection-fold mean AUC per epoch
    best_epoch: int
    class_weights: np.ndarray


@dataclass
class FoldModels:
    mode: str
    targets: list
    folds: list  # FoldResult per test fold, in fold order
    config: TrainConfig = field(default_factory=TrainConfig)

    @property
    def k(self) -> int:
        return len(self.folds)

    def save(self, path) -> None:
        root = Path(path)
        try:
            root.mkdir(parents=True, exist_ok=True)
            for f in self.folds:
                (root / f"fold_{f.test_fold}.milm").write_bytes(checkpoint_bytes(f.params))
            meta = {
                "mode": self.mode,
                "targets": self.targets,
                "train_config": self.config.to_dict(),
                "folds": [
                    {
                        "test_fold": f.test_fold,
                        "best_epoch": f.best_epoch,
                        "trace": f.trace,
                        "class_weights": f.class_weights.tolist(),
                    }
                    for f in self.folds
                ],
            }
            (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise StoreIo(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "FoldModels":
        root = Path(path)
        try:
            meta = json.loads((root / "meta.json").read_text())
            folds = []
            for f in meta["folds"]:
                params = params_from_checkpoint((root / f"fold_{f['test_fold']}.milm").read_bytes())
                folds.append(FoldResult(f["test_fold"], params, f["trace"], f["best_epoch"], np.array(f["class_weights"])))
        except OSError as exc:
            raise StoreIo(str(exc)) from exc
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad model directory: {exc}") from None
        models = cls(meta["mode"], meta["targets"], folds, TrainConfig.from_mapping(meta["train_config"]))
        dims = {(f.params.dim, f.params.h, f.params.a, f.params.n_tasks, f.params.gated) for f in folds}
        if len(dims) != 1:
            raise ShapeError("fold checkpoints have inconsistent dimensions")
        return models


@dataclass
class BagPrediction:
    probs: np.ndarray  # per task, positive-class probability
    attention: np.ndarray
    tile_index: np.ndarray  # tiles the attention refers to
    embedding: np.ndarray


class PredictionSet(dict):
    """bag_id -> BagPrediction, plus the task order."""

    def __init__(self, targets: Sequence[str], items=()):
        super().__init__(items)
        self.targets = list(targets)

    def prob_matrix(self, bag_ids: Sequence[str]) -> np.ndarray:
        return np.stack([self[b].probs for b in bag_ids]) if bag_ids else np.zeros((0, len(self.targets)))

    def to_csv(self) -> str:
        lines = ["bag_id,target_id,prob"]
        for b in sorted(self):
            for t, p in zip(self.targets, self[b].probs):
                lines.append(f"{b},{t},{float(p)!r}")
        return "\n".join(lines) + "\n"

    def attention_csv(self, bag_id: str) -> str:
        pred = self[bag_id]
        lines = ["tile_index,attention"]
        lines += [f"{int(i)},{float(a)!r}" for i, a in zip(pred.tile_index, pred.attention)]
        return "\n".join(lines) + "\n"


def _run_inference(params: ModelParams, data: Mapping, bag_ids: Sequence[str], config: TrainConfig) -> dict:
    """Forward each bag on its bag_id-seeded inference tiles."""
    out = {}
    for start in range(0, len(bag_ids), INFER_CHUNK):
        chunk = bag_ids[start : start + INFER_CHUNK]
        tiles, xs = [], []
        for b in chunk:
            bag = data[b]
            if bag.dim != params.dim:
                raise ShapeError(f"{b} has dim {bag.dim}, model expects {params.dim}")
            idx = inference_tiles(b, bag.n_tiles, config)
            tiles.append(idx)
            xs.append(bag.features[idx])
        for b, idx, r in zip(chunk, tiles, forward_many(params, xs)):
            out[b] = BagPrediction(r.probs[:, 1].copy(), r.attention, idx, r.embedding)
    return out


def _selection_score(probs: np.ndarray, labels: np.ndarray) -> Optional[float]:
    aucs = []
    for j in range(labels.shape[1]):
        keep = ~np.isnan(labels[:, j])
        y = labels[keep, j]
        if 0 < y.sum() < y.size:
            aucs.append(roc_auc(probs[keep, j], y.astype(int)))
    return float(np.mean(aucs)) if aucs else None


def class_weights_for(manifest: CohortManifest, bag_ids: Sequence[str], targets: Sequence[str]) -> np.ndarray:
    labels = manifest.label_matrix(bag_ids, targets)
    rows = []
    for j in range(len(targets)):
        col = labels[:, j]
        col = col[~np.isnan(col)]
        rows.append(weights_from_prevalence(col.mean() if col.size else 0.0))
    return np.array(rows)


def train_fold(
    data: Mapping,
    manifest: CohortManifest,
    assignment: SplitAssignment,
    test_fold: int,
    targets: Sequence[str],
    config: TrainConfig,
    mode: str = MULTITASK,
) -> FoldResult:
    """Train on the train folds, keep the epoch that scores best on the selection fold."""
    tasks = mode_targets(mode, targets)
    if not tasks:
        raise ValueError("no targets to train")
    train_folds, selection_fold, _ = fold_roles(assignment, test_fold)
    train_ids = assignment.fold_bags(train_folds)
    sel_ids = assignment.fold_bags(selection_fold)
    if not train_ids:
        raise EmptyDev("no training bags")
    sel_labels = manifest.label_matrix(sel_ids, tasks)
    if not any(0 < np.nansum(c) < np.sum(~np.isnan(c)) for c in sel_labels.T):
        raise SelectionInfeasible(f"no target has both classes on selection fold {selection_fold}")
    train_labels = dict(zip(train_ids, manifest.label_matrix(train_ids, tasks)))
    cw = class_weights_for(manifest, train_ids, tasks)

    dim = data[train_ids[0]].dim
    params = init_params(dim, config.hidden, config.attention_dim, len(tasks), _key(config.seed, test_fold, mode, "init"), config.gated_attention)
    state = AdamState.zeros(params)
    best, best_score, best_epoch = None, -np.inf, -1
    trace = []
    with threadpool_limits(limits=1):
        for epoch in range(config.max_epochs):
            order_rng = np.random.default_rng(_key(config.seed, test_fold, mode, epoch, "shuffle"))
            tile_rng = np.random.default_rng(_key(config.seed, test_fold, mode, epoch, "tiles"))
            order = [train_ids[i] for i in order_rng.permutation(len(train_ids))]
            for start in range(0, len(order), config.batch_size):
                batch = []
                for b in order[start : start + config.batch_size]:
                    bag = data[b]
                    idx = sample_bag(bag.n_tiles, config.train_bag_size, tile_rng)
                    batch.append((bag.features[idx], train_labels[b]))
                _, grads = loss_and_grad(params, batch, cw)
                params, state = adam_step(params, grads, state, config)
            preds = _run_inference(params, data, sel_ids, config)
            score = _selection_score(np.stack([preds[b].probs for b in sel_ids]), sel_labels)
            trace.append(score)
            log.debug("fold %d %s epoch %d selection auc %.4f", test_fold, mode, epoch, score)
            if score > best_score:
                best, best_score, best_epoch = quantize(params), score, epoch
            if epoch - best_epoch >= config.patience:
                break
    return FoldResult(test_fold, best, trace, best_epoch, cw)


_WORKER_STATE = {}


def _init_worker(data, manifest, assignment, targets, config):
    _WORKER_STATE.update(data=data, manifest=manifest, assignment=assignment, targets=targets, config=config)


def _worker_fold(job):
    test_fold, mode = job
    s = _WORKER_STATE
    return train_fold(s["data"], s["manifest"], s["assignment"], test_fold, s["targets"], s["config"], mode)


def train_many(
    data: Mapping,
    manifest: CohortManifest,
    assignment: SplitAssignment,
    targets: Sequence[str],
    config: TrainConfig,
    modes: Sequence[str],
    threads: int = 1,
) -> dict:
    """train_cv for several modes, fanning all (mode, fold) jobs out over ``threads`` processes."""
    if not assignment.fold:
        raise EmptyDev("development set is empty")
    for m in modes:
        mode_targets(m, targets)
    jobs = [(f, m) for m in modes for f in range(assignment.k)]
    if threads <= 1:
        results = [train_fold(data, manifest, assignment, f, targets, config, m) for f, m in jobs]
    else:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(threads, mp_context=ctx, initializer=_init_worker, initargs=(data, manifest, assignment, targets, config)) as pool:
            results = list(pool.map(_worker_fold, jobs))
    out = {}
    for m in modes:
        folds = [r for (f, mm), r in zip(jobs, results) if mm == m]
        out[m] = FoldModels(m, mode_targets(m, targets), folds, config)
    return out


def train_cv(data, manifest, assignment, targets, config, mode: str = MULTITASK, threads: int = 1) -> FoldModels:
    return train_many(data, manifest, assignment, targets, config, [mode], threads)[mode]


def predict(models: FoldModels, data: Mapping, bag_ids: Sequence[str], ensemble: bool = True, fold: int = 0) -> PredictionSet:
    """Fold-ensemble (or single fold) predictions.

    With ``ensemble`` the probabilities and embeddings are averaged over the
    fold models; attention always comes from ``fold``.
    """
    config = models.config
    bag_ids = list(bag_ids)
    with threadpool_limits(limits=1):
        if not ensemble:
            runs = [_run_inference(models.folds[fold].params, data, bag_ids, config)]
            lead = runs[0]
        else:
            runs = [_run_inference(f.params, data, bag_ids, config) for f in models.folds]
            lead = runs[fold]
    out = PredictionSet(models.targets)
    for b in bag_ids:
        stack = np.stack([r[b].probs for r in runs])
        # clipping keeps the mean inside the member range despite rounding
        probs = np.clip(stack.mean(axis=0), stack.min(axis=0), stack.max(axis=0))
        emb = np.mean([r[b].embedding for r in runs], axis=0)
        out[b] = BagPrediction(probs, lead[b].attention, lead[b].tile_index, emb)
    return out


def predict_cv(models: FoldModels, data: Mapping, assignment: SplitAssignment) -> PredictionSet:
    """Out-of-fold predictions: each dev bag is scored by the model that held it out."""
    out = PredictionSet(models.targets)
    with threadpool_limits(limits=1):
        for f in models.folds:
            ids = assignment.fold_bags(f.test_fold)
            out.update(_run_inference(f.params, data, ids, models.config))
    return PredictionSet(models.targets, sorted(out.items()))
