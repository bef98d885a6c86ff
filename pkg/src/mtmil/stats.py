"""ROC-AUC, bootstrap intervals and the paired tests used to compare models."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import special
from scipy.stats import rankdata

from .errors import (
    AllZero,
    DegenerateBootstrap,
    TargetMismatch,
    TooFew,
    UndefinedAUC,
    ZeroVariance,
)

ALPHA = 0.05
EXACT_WILCOXON_MAX_N = 20


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    n: int
    tail: str  # "one_sided_greater" or "two_sided"
    method: str

    __test__ = False  # keep pytest from collecting this class

    def to_dict(self) -> dict:
        return {"test": self.method, "statistic": self.statistic, "p": self.p_value, "n": self.n, "tail": self.tail}


def _binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores for {y.size} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0/1")
    return s, y.astype(bool)


def _auc_numerator(s: np.ndarray, y: np.ndarray) -> tuple:
    """Twice the Mann-Whitney U (an exact integer) and the pos/neg counts."""
    order = np.argsort(s, kind="mergesort")
    s, y = s[order], y[order]
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUC(f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    pos_g = np.add.reduceat(y.astype(np.int64), starts)
    size_g = np.diff(np.r_[starts, s.size])
    neg_g = size_g - pos_g
    neg_below = np.cumsum(neg_g) - neg_g
    twice_u = int(np.sum(2 * pos_g * neg_below + pos_g * neg_g))
    return twice_u, n_pos, n_neg


def roc_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via one sort."""
    s, y = _binary(scores, labels)
    twice_u, n_pos, n_neg = _auc_numerator(s, y)
    return twice_u / (2 * n_pos * n_neg)


def roc_curve(scores, labels) -> list:
    """(fpr, tpr) points from (0, 0) to (1, 1), one per distinct threshold."""
    s, y = _binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUC(f"ROC undefined with {n_pos} positives and {n_neg} negatives")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    points = [(0.0, 0.0)]
    points += [(fp_i / n_neg, tp_i / n_pos) for fp_i, tp_i in zip(fp.tolist(), tp.tolist())]
    return points


def trapezoid_area(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2))


def _weighted_auc_rows(codes: np.ndarray, y: np.ndarray, n_codes: int, idx: np.ndarray) -> np.ndarray:
    """AUC of each resample row; ``codes`` are dense ranks of the original scores."""
    B, n = idx.shape
    c = codes[idx]
    pos = y[idx]
    flat = (np.arange(B)[:, None] * n_codes + c).ravel()
    pos_counts = np.bincount(flat[pos.ravel()], minlength=B * n_codes).reshape(B, n_codes)
    neg_counts = np.bincount(flat[~pos.ravel()], minlength=B * n_codes).reshape(B, n_codes)
    neg_below = np.cumsum(neg_counts, axis=1) - neg_counts
    twice_u = np.sum(pos_counts * (2 * neg_below + neg_counts), axis=1)
    n_pos = pos.sum(axis=1)
    n_neg = n - n_pos
    with np.errstate(divide="ignore", invalid="ignore"):
        return twice_u / (2.0 * n_pos * n_neg)


def _percentile_interval(values: np.ndarray, level: float) -> tuple:
    """Nearest-rank percentiles bounding the central ``level`` mass."""
    v = np.sort(values)
    B = v.size
    lo_q = (1 - level) / 2
    # the 1e-9 keeps e.g. 0.025 * 400 = 10.000000000000002 from rounding up a rank
    lo = v[min(max(math.ceil(lo_q * B - 1e-9) - 1, 0), B - 1)]
    hi = v[min(max(math.ceil((1 - lo_q) * B - 1e-9) - 1, 0), B - 1)]
    return float(lo), float(hi)


def bootstrap_auc_interval(scores, labels, B: int = 10_000, level: float = 0.95, seed: int = 0) -> tuple:
    """Percentile interval of the AUC over ``B`` resamples with replacement.

    Resamples lacking a class are discarded and redrawn, up to ``100 * B``
    draws in total.
    """
    s, y = _binary(scores, labels)
    roc_auc(s, y)
    _, codes = np.unique(s, return_inverse=True)
    n_codes = int(codes.max()) + 1
    rng = np.random.default_rng(seed)
    n = s.size
    kept = []
    drawn = 0
    have = 0
    chunk = min(B, max(1, 2_000_000 // max(n, 1)))
    while have < B:
        if drawn >= 100 * B:
            raise DegenerateBootstrap(f"only {have} of {B} resamples contained both classes")
        m = min(chunk, 100 * B - drawn)
        idx = rng.integers(0, n, size=(m, n))
        drawn += m
        aucs = _weighted_auc_rows(codes, y, n_codes, idx)
        aucs = aucs[np.isfinite(aucs)]
        kept.append(aucs[: B - have])
        have += kept[-1].size
    return _percentile_interval(np.concatenate(kept), level)


def _t_sf(t: float, df: float) -> float:
    """Upper tail P(T > t) of Student's t through the regularized incomplete beta."""
    x = df / (df + t * t)
    tail = 0.5 * special.betainc(df / 2, 0.5, x)
    return float(tail if t >= 0 else 1 - tail)


def t_cdf(t: float, df: float) -> float:
    return 1.0 - _t_sf(t, df)


def paired_t_one_tailed(a, b) -> TestResult:
    """Paired t-test for mean(a - b) > 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    n = a.size
    if n < 2:
        raise TooFew("paired t-test needs at least two pairs")
    d = a - b
    if np.all(d == d[0]):
        raise ZeroVariance("all paired differences are identical")
    sd = d.std(ddof=1)
    t = d.mean() / (sd / math.sqrt(n))
    return TestResult(float(t), _t_sf(t, n - 1), n, "one_sided_greater", "paired_t")


def _signed_ranks(d: np.ndarray):
    d = d[d != 0]
    if d.size == 0:
        raise AllZero("all paired differences are zero")
    return d, rankdata(np.abs(d))  # midranks


def _exact_upper_tail(twice_ranks: np.ndarray, twice_w: int) -> float:
    """P(W+ >= w) under random signs, by counting sign patterns over integer doubled ranks."""
    total = int(twice_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    reach = 0
    for r in twice_ranks.tolist():
        shifted = np.zeros_like(counts)
        shifted[r : reach + r + 1] = counts[: reach + 1]
        counts = counts + shifted
        reach += r
    hits = int(counts[twice_w:].sum())
    return hits / 2 ** len(twice_ranks)


def wilcoxon_signed_rank_one_tailed(a, b) -> TestResult:
    """Wilcoxon signed-rank test for a > b; zero differences dropped, midranks for ties.

    Exact when at most 20 nonzero differences remain, otherwise a normal
    approximation with tie and continuity corrections.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    d, ranks = _signed_ranks(a - b)
    n = d.size
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_WILCOXON_MAX_N:
        twice = np.rint(2 * ranks).astype(np.int64)
        p = _exact_upper_tail(twice, int(round(2 * w_plus)))
        return TestResult(w_plus, min(p, 1.0), n, "one_sided_greater", "wilcoxon_exact")
    mean = n * (n + 1) / 4
    _, tie_sizes = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - np.sum(tie_sizes**3 - tie_sizes) / 48
    if var <= 0:
        raise ZeroVariance("signed-rank variance is zero")
    z = (w_plus - mean - 0.5) / math.sqrt(var)
    p = float(special.ndtr(-z))
    return TestResult(w_plus, p, n, "one_sided_greater", "wilcoxon_normal")


def pearson(x, y) -> TestResult:
    """Pearson r with a two-sided t-test on n - 2 degrees of freedom."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("x and y must have equal length")
    n = x.size
    if n < 3:
        raise TooFew("pearson test needs at least three points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ZeroVariance("pearson correlation undefined for constant input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        p = 0.0
    else:
        t = r * math.sqrt((n - 2) / (1 - r * r))
        p = min(1.0, 2 * _t_sf(abs(t), n - 2))
    return TestResult(r, p, n, "two_sided", "pearson")


@dataclass
class TargetMetrics:
    auc: Optional[float]
    n_pos: int
    n_neg: int
    ci: Optional[tuple] = None
    roc: Optional[list] = None

    @property
    def defined(self) -> bool:
        return self.auc is not None


@dataclass
class MetricsReport:
    targets: dict = field(default_factory=dict)  # target_id -> TargetMetrics

    @property
    def defined_targets(self) -> list:
        return [t for t, m in self.targets.items() if m.defined]

    @property
    def mean(self) -> Optional[float]:
        vals = [self.targets[t].auc for t in self.defined_targets]
        return float(np.mean(vals)) if vals else None

    @property
    def sd(self) -> Optional[float]:
        vals = [self.targets[t].auc for t in self.defined_targets]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else None

    def to_dict(self, include_roc: bool = True) -> dict:
        out = {}
        for t, m in self.targets.items():
            entry = {
                "auc": m.auc if m.defined else "undefined",
                "n_pos": m.n_pos,
                "n_neg": m.n_neg,
                "ci": list(m.ci) if m.ci is not None else None,
            }
            if include_roc and m.roc is not None:
                entry["roc"] = [list(p) for p in m.roc]
            out[t] = entry
        out["summary"] = {"mean": self.mean, "sd": self.sd, "n_targets": len(self.defined_targets)}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        rep = cls()
        for t, e in d.items():
            if t == "summary":
                continue
            auc = None if e["auc"] == "undefined" else float(e["auc"])
            ci = tuple(e["ci"]) if e.get("ci") is not None else None
            roc = [tuple(p) for p in e["roc"]] if e.get("roc") else None
            rep.targets[t] = TargetMetrics(auc, int(e["n_pos"]), int(e["n_neg"]), ci, roc)
        return rep


def metrics_report(
    scores: np.ndarray,
    labels: np.ndarray,
    target_ids: Sequence[str],
    B: Optional[int] = 10_000,
    level: float = 0.95,
    seed: int = 0,
    with_roc: bool = True,
) -> MetricsReport:
    """Per-target AUC (NaN labels ignored); single-class targets are marked undefined.

    ``B=None`` skips the bootstrap intervals.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    rep = MetricsReport()
    for j, t in enumerate(target_ids):
        keep = ~np.isnan(labels[:, j])
        s, y = scores[keep, j], labels[keep, j].astype(int)
        n_pos = int(y.sum())
        n_neg = int(y.size - n_pos)
        if n_pos == 0 or n_neg == 0:
            rep.targets[t] = TargetMetrics(None, n_pos, n_neg)
            continue
        auc = roc_auc(s, y)
        ci = bootstrap_auc_interval(s, y, B=B, level=level, seed=seed + j) if B else None
        roc = roc_curve(s, y) if with_roc else None
        rep.targets[t] = TargetMetrics(auc, n_pos, n_neg, ci, roc)
    return rep


@dataclass
class Comparison:
    result: Optional[TestResult]
    deltas: dict  # target -> auc_a - auc_b
    note: Optional[str] = None
    prevalence_correlation: Optional[TestResult] = None
    pairs: dict = field(default_factory=dict)  # target -> (auc_a, auc_b)
    prevalences: Optional[dict] = None

    def to_dict(self) -> dict:
        out = {
            "test": self.result.method if self.result else None,
            "statistic": self.result.statistic if self.result else None,
            "p": self.result.p_value if self.result else None,
            "n": len(self.deltas),
            "deltas": [self._delta_entry(t, d) for t, d in self.deltas.items()],
        }
        if self.note:
            out["note"] = self.note
        if self.prevalence_correlation is not None:
            out["gain_vs_prevalence"] = self.prevalence_correlation.to_dict()
        return out

    def _delta_entry(self, target: str, delta: float) -> dict:
        entry = {"target_id": target, "delta": delta}
        if target in self.pairs:
            entry["auc_a"], entry["auc_b"] = self.pairs[target]
        if self.prevalences is not None and target in self.prevalences:
            entry["prevalence"] = self.prevalences[target]
        return entry


def compare_reports(report_a: MetricsReport, report_b: MetricsReport, test: str = "t", prevalences: Optional[dict] = None) -> Comparison:
    """Pair per-target AUCs of two reports and test whether ``a`` beats ``b``.

    Targets undefined in either report are dropped.  With ``prevalences`` the
    gain (a - b) is also correlated against prevalence.
    """
    if set(report_a.targets) != set(report_b.targets):
        raise TargetMismatch("reports cover different target sets")
    shared = [t for t in report_a.targets if report_a.targets[t].defined and report_b.targets[t].defined]
    deltas = {t: report_a.targets[t].auc - report_b.targets[t].auc for t in shared}
    a = [report_a.targets[t].auc for t in shared]
    b = [report_b.targets[t].auc for t in shared]
    note = None
    result = None
    try:
        if test == "t":
            result = paired_t_one_tailed(a, b)
        elif test == "wilcoxon":
            result = wilcoxon_signed_rank_one_tailed(a, b)
        else:
            raise ValueError(f"unknown test {test!r}")
    except (ZeroVariance, AllZero):
        note = "identical"
    except TooFew:
        note = "too_few_targets"
    corr = None
    if prevalences is not None:
        missing = set(shared) - set(prevalences)
        if missing:
            raise TargetMismatch(f"no prevalence for {sorted(missing)}")
        try:
            corr = pearson([deltas[t] for t in shared], [prevalences[t] for t in shared])
        except (ZeroVariance, TooFew):
            corr = None
    pairs = {t: (x, y) for t, x, y in zip(shared, a, b)}
    prev = {t: prevalences[t] for t in shared} if prevalences is not None else None
    return Comparison(result, deltas, note, corr, pairs, prev)
