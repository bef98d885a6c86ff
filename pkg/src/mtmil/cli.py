"""Command-line entry point: ``mtmil <command> ...``.

Every command reads the same TOML run configuration (``--config``) with
``--set section.key=value`` overrides. Failures exit nonzero and print a single
``error: code=<Name> message=<text>`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .analysis import attention_annotation_auc, extract_embeddings, high_attention_fractions, logistic_probe
from .config import RunConfig, SplitConfig, describe_defaults, load_config
from .errors import ConfigError, DataError, FormatError, MtmilError, StoreIo, TargetMismatch, UnknownTarget
from .feature_store import read_feature_store, select_targets, write_feature_store
from .plotting import roc_svg, scatter_svg
from .splitter import SUBSETS, SplitAssignment, make_splits
from .stats import MetricsReport, compare_reports, metrics_report
from .synthgen import generate_cohort
from .trainer import MULTITASK, FoldModels, PredictionSet, parse_mode, predict, predict_cv, train_many

log = logging.getLogger("mtmil")

SPLITS_NAME = "splits.csv"
TARGETS_NAME = "targets.csv"
MAX_CURVE_POINTS = 2000
PROBE_TASKS = ("grade", "primary_site")


class UsageError(ConfigError):
    """Bad command-line arguments."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- helpers


def _write_text(path, text: str) -> None:
    p = Path(path)
    try:
        if p.parent != Path(""):
            p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise StoreIo(f"cannot write {p}: {exc}") from None


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise StoreIo(f"cannot read {path}: {exc}") from None


def _dump_json(obj) -> str:
    try:
        return json.dumps(obj, indent=2, allow_nan=False) + "\n"
    except ValueError as exc:
        raise DataError(f"non-finite value in report: {exc}") from None


def _read_json(path) -> dict:
    try:
        return json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not JSON: {exc}") from None


def _threads(arg: Optional[int]) -> int:
    if arg is not None:
        value = arg
    else:
        raw = os.environ.get("MTMIL_THREADS", "1")
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"MTMIL_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError("thread count must be >= 1")
    return value


def _load_store(path):
    bags, manifest = read_feature_store(path)
    return {b.bag_id: b for b in bags}, manifest


def _thin(points: list, limit: int = MAX_CURVE_POINTS) -> list:
    """Evenly spaced subset of a curve that keeps both endpoints."""
    if len(points) <= limit:
        return points
    idx = np.unique(np.linspace(0, len(points) - 1, limit).round().astype(int))
    return [points[i] for i in idx]


def _model_dirs(path) -> list:
    root = Path(path)
    if (root / "meta.json").is_file():
        return [root]
    subs = sorted(p for p in root.iterdir() if (p / "meta.json").is_file()) if root.is_dir() else []
    if not subs:
        raise StoreIo(f"no trained models under {root}")
    return subs


def _load_models(path) -> list:
    models = [FoldModels.load(d) for d in _model_dirs(path)]
    seen = set()
    for m in models:
        overlap = seen & set(m.targets)
        if overlap:
            raise TargetMismatch(f"targets {sorted(overlap)} are covered by more than one model under {path}")
        seen |= set(m.targets)
    return models


def _single_model(path) -> FoldModels:
    models = _load_models(path)
    if len(models) != 1:
        raise ConfigError(f"{path} holds {len(models)} models; point at one model directory")
    return models[0]


def _splits_for(models_path, override: Optional[str]) -> SplitAssignment:
    path = Path(override) if override else _find_upwards(Path(models_path), SPLITS_NAME)
    return SplitAssignment.from_csv(_read_text(path))


def _find_upwards(start: Path, name: str) -> Path:
    for d in (start, start.parent):
        if (d / name).is_file():
            return d / name
    raise StoreIo(f"no {name} next to {start}; pass --splits")


def _predictions(models: FoldModels, data, assignment: SplitAssignment, subset: str, fold: int) -> tuple:
    """Out-of-fold predictions on dev, fold-ensemble predictions on the holdouts."""
    ids = assignment.bags_in(subset)
    missing = [b for b in ids if b not in data]
    if missing:
        raise DataError(f"split names bags missing from the store: {missing[:5]}")
    if subset == "dev":
        if set(assignment.fold) != set(ids):
            raise DataError("dev bags and fold assignment disagree")
        return predict_cv(models, data, assignment), ids
    if not 0 <= fold < models.k:
        raise ConfigError(f"attention_fold {fold} outside 0..{models.k - 1}")
    return predict(models, data, ids, ensemble=True, fold=fold), ids


# ---------------------------------------------------------------- commands


def cmd_gen(args, cfg: RunConfig) -> None:
    bags, manifest = generate_cohort(cfg.synth)
    write_feature_store(bags, manifest, args.out)
    log.info("wrote %d bags to %s", len(bags), args.out)


def cmd_split(args, cfg: RunConfig) -> None:
    k = cfg.split.k if args.k is None else args.k
    seed = cfg.split.seed if args.seed is None else args.seed
    SplitConfig(k, seed, cfg.split.temporal_fraction)
    _, manifest = _load_store(args.store)
    assignment = make_splits(manifest, k, seed, cfg.split.temporal_fraction)
    _write_text(args.out, assignment.to_csv())


def _targets_csv(specs) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target_id", "positive_count", "labeled_count", "prevalence", "included", "override"])
    for s in specs:
        w.writerow([s.target_id, s.positive_count, s.labeled_count, repr(float(s.prevalence)), str(s.included).lower(), str(s.override).lower()])
    return buf.getvalue()


def cmd_train(args, cfg: RunConfig) -> None:
    data, manifest = _load_store(args.store)
    splits_text = _read_text(args.splits)
    assignment = SplitAssignment.from_csv(splits_text, k=cfg.split.k)
    unknown = set(assignment.subset) - set(data)
    if unknown:
        raise DataError(f"split names bags missing from the store: {sorted(unknown)[:5]}")
    specs = select_targets(manifest, cfg.targets.min_positives, cfg.targets.overrides)
    targets = [s.target_id for s in specs if s.included]
    if not targets:
        raise ConfigError("no target passes the min_positives rule")
    modes = []
    for mode in args.mode:
        if mode == "singletask:all":
            modes += [f"singletask:{t}" for t in targets]
            continue
        try:
            kind, target = parse_mode(mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if target is not None and target not in targets:
            raise UnknownTarget(f"{target} is not an included target")
        modes.append(mode)
    if len(set(modes)) != len(modes):
        raise ConfigError("a mode is listed twice")
    results = train_many(data, manifest, assignment, targets, cfg.train, modes, _threads(args.threads))
    out = Path(args.out)
    nested = len(modes) > 1 or args.mode == ["singletask:all"]
    for mode in modes:
        results[mode].save(out / mode.replace(":", "_") if nested else out)
    _write_text(out / TARGETS_NAME, _targets_csv(specs))
    _write_text(out / SPLITS_NAME, splits_text)


def cmd_eval(args, cfg: RunConfig) -> None:
    data, manifest = _load_store(args.store)
    assignment = _splits_for(args.models, args.splits)
    combined = PredictionSet([])
    targets: list = []
    ids: list = []
    for models in _load_models(args.models):
        preds, ids = _predictions(models, data, assignment, args.subset, cfg.analysis.attention_fold)
        targets += models.targets
        for b in ids:
            p = preds[b]
            if b in combined:
                prev = combined[b]
                p = type(p)(np.concatenate([prev.probs, p.probs]), prev.attention, prev.tile_index, prev.embedding)
            combined[b] = p
    combined.targets = targets
    for t in targets:
        manifest.target_index(t)
    scores = combined.prob_matrix(ids)
    labels = manifest.label_matrix(ids, targets)
    report = metrics_report(scores, labels, targets, B=cfg.stats.bootstrap, level=cfg.stats.level, seed=cfg.stats.seed)
    out = report.to_dict()
    out["summary"].update({"subset": args.subset, "n_bags": len(ids), "level": cfg.stats.level, "bootstrap": cfg.stats.bootstrap})
    _write_text(args.out, _dump_json(out))
    if args.predictions:
        _write_text(args.predictions, combined.to_csv())


def _read_prevalences(path) -> dict:
    reader = csv.DictReader(io.StringIO(_read_text(path)))
    if not reader.fieldnames or not {"target_id", "prevalence"} <= set(reader.fieldnames):
        raise FormatError(f"{path} needs target_id and prevalence columns")
    try:
        return {r["target_id"]: float(r["prevalence"]) for r in reader}
    except ValueError as exc:
        raise FormatError(f"bad prevalence in {path}: {exc}") from None


def cmd_compare(args, cfg: RunConfig) -> None:
    try:
        a = MetricsReport.from_dict(_read_json(args.a))
        b = MetricsReport.from_dict(_read_json(args.b))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"not a metrics report: {exc}") from None
    prevalences = _read_prevalences(args.prevalences) if args.prevalences else None
    cmp = compare_reports(a, b, args.test, prevalences)
    out = cmp.to_dict()
    out["alpha"] = cfg.stats.alpha
    if cmp.result is not None:
        out["significant"] = bool(cmp.result.p_value < cfg.stats.alpha)
    _write_text(args.out, _dump_json(out))


def cmd_attn(args, cfg: RunConfig) -> None:
    data, _ = _load_store(args.store)
    models = _single_model(args.models)
    assignment = _splits_for(args.models, args.splits)
    preds, ids = _predictions(models, data, assignment, args.subset, cfg.analysis.attention_fold)
    report = high_attention_fractions(preds, data, cfg.analysis.top_fraction, ids)
    auc, ci, curve = attention_annotation_auc(preds, data, B=cfg.stats.bootstrap, seed=cfg.stats.seed, level=cfg.stats.level, bag_ids=ids)
    report.annotation_auc, report.annotation_ci, report.annotation_roc = auc, ci, _thin(curve)
    out = report.to_dict()
    out.update({"subset": args.subset, "top_fraction": cfg.analysis.top_fraction, "alpha": cfg.stats.alpha})
    root = Path(args.out)
    _write_text(root / "report.json", _dump_json(out))
    for b in ids:
        _write_text(root / "heatmaps" / f"{b}.csv", _heatmap_csv(preds, data, b))


def _heatmap_csv(preds: PredictionSet, data, bag_id: str) -> str:
    pred = preds[bag_id]
    coords = data[bag_id].tile_coords
    lines = ["tile_index,x,y,attention"]
    for i, a in zip(pred.tile_index.tolist(), pred.attention.tolist()):
        x, y = (int(coords[i, 0]), int(coords[i, 1])) if coords is not None else ("", "")
        lines.append(f"{i},{x},{y},{a!r}")
    return "\n".join(lines) + "\n"


def cmd_probe(args, cfg: RunConfig) -> None:
    data, manifest = _load_store(args.store)
    models = _single_model(args.models)
    assignment = _splits_for(args.models, args.splits)
    ids = assignment.bags_in(args.subset)
    labels = []
    kept = []
    for b in ids:
        row = manifest.row(b)
        value = (None if row.grade is None else row.grade == "high") if args.task == "grade" else row.is_primary_site
        if value is not None:
            kept.append(b)
            labels.append(int(value))
    E = extract_embeddings(models, data, kept)
    a = cfg.analysis
    result = logistic_probe(E, np.array(labels, dtype=int), args.task, a.probe_l2, a.probe_seed, cfg.stats.bootstrap, a.probe_test_fraction)
    out = result.to_dict()
    out.update({"subset": args.subset, "n_bags": len(kept), "l2": a.probe_l2})
    _write_text(args.out, _dump_json(out))


def cmd_plot(args, cfg: RunConfig) -> None:
    doc = _read_json(args.input)
    meta = not args.no_meta
    if "deltas" in doc:
        svg = _plot_comparison(doc, args.kind, meta)
    elif "task" in doc and "auc" in doc:
        if args.kind != "roc":
            raise ConfigError("probe results only support --kind roc")
        svg = roc_svg([(f"{doc['task']} (AUC {doc['auc']:.3f})", doc["roc"] or [])], "embedding probe", meta)
    elif "annotation_auc" in doc:
        if args.kind != "roc":
            raise ConfigError("attention reports only support --kind roc")
        ann = doc["annotation_auc"]
        svg = roc_svg([(f"tumor (AUC {ann['auc']:.3f})", ann.get("roc") or [])], "attention vs tumor annotation", meta)
    elif "summary" in doc:
        svg = _plot_report(doc, args.kind, meta)
    else:
        raise FormatError(f"{args.input} is not a report, comparison, attention or probe file")
    _write_text(args.out, svg)


def _plot_report(doc: dict, kind: str, meta: bool) -> str:
    entries = [(t, e) for t, e in doc.items() if t != "summary" and e["auc"] != "undefined"]
    if kind == "roc":
        curves = [(f"{t} ({e['auc']:.3f})", e.get("roc") or []) for t, e in entries]
        return roc_svg(curves, "ROC by target", meta)
    prevalence = [e["n_pos"] / (e["n_pos"] + e["n_neg"]) for _, e in entries]
    return scatter_svg(
        prevalence,
        [e["auc"] for _, e in entries],
        [t for t, _ in entries],
        "AUC by target",
        "prevalence in evaluated set",
        "ROC-AUC",
        intervals=[e.get("ci") for _, e in entries],
        meta=meta,
    )


def _plot_comparison(doc: dict, kind: str, meta: bool) -> str:
    if kind != "scatter":
        raise ConfigError("comparisons only support --kind scatter")
    d = doc["deltas"]
    labels = [e["target_id"] for e in d]
    if d and all("prevalence" in e for e in d):
        return scatter_svg([e["prevalence"] for e in d], [e["delta"] for e in d], labels, "AUC gain vs prevalence", "prevalence", "AUC gain (a - b)", meta=meta)
    if d and all("auc_a" in e for e in d):
        return scatter_svg([e["auc_b"] for e in d], [e["auc_a"] for e in d], labels, "per-target AUC", "AUC (b)", "AUC (a)", diagonal=True, meta=meta)
    return scatter_svg(list(range(len(d))), [e["delta"] for e in d], labels, "AUC gain by target", "target", "AUC gain (a - b)", meta=meta)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    epilog = describe_defaults()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="mtmil", description="Multi-task attention MIL toolkit.", epilog=epilog, formatter_class=fmt)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text, epilog=epilog, formatter_class=fmt)

    p = add("gen", "generate a synthetic feature store")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = add("split", "carve holdouts and assign stratified folds")
    p.add_argument("--store", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = add("train", "cross-validated training")
    p.add_argument("--store", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--mode", action="append", default=None, help="multitask, singletask:TARGET or singletask:all (repeatable)")
    p.add_argument("--threads", type=int, help="worker processes (default: MTMIL_THREADS or 1)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = add("eval", "per-target ROC-AUC with bootstrap intervals")
    p.add_argument("--models", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--subset", choices=SUBSETS, default="dev")
    p.add_argument("--splits", help="defaults to the splits saved with the models")
    p.add_argument("--predictions", help="also write bag_id,target_id,prob CSV here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = add("compare", "paired test of two reports and gain-vs-prevalence correlation")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--test", choices=("t", "wilcoxon"), default="t")
    p.add_argument("--prevalences", help="CSV with target_id and prevalence columns, e.g. targets.csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = add("attn", "attention enrichment and attention-vs-annotation analyses")
    p.add_argument("--models", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--subset", choices=SUBSETS, default="dev")
    p.add_argument("--splits")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn)

    p = add("probe", "logistic probe on slide embeddings")
    p.add_argument("--models", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--task", choices=PROBE_TASKS, required=True)
    p.add_argument("--subset", choices=SUBSETS, default="dev")
    p.add_argument("--splits")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = add("plot", "static SVG figure from a report, comparison, attention or probe JSON")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--kind", choices=("scatter", "roc"), required=True)
    p.add_argument("--no-meta", action="store_true", help="omit the generation timestamp comment")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        if getattr(args, "mode", False) is None:
            args.mode = [MULTITASK]
        cfg = load_config(args.config, args.set)
        args.func(args, cfg)
    except MtmilError as exc:
        return _fail(exc.code, str(exc), exc.exit_code)
    except ValueError as exc:
        return _fail("InvalidArgument", str(exc), ConfigError.exit_code)
    except OSError as exc:
        return _fail("StoreIo", str(exc), StoreIo.exit_code)
    return 0


def _fail(code: str, message: str, exit_code: int) -> int:
    message = " ".join(message.split())
    print(f"error: code={code} message={message}", file=sys.stderr)
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
