"""Evaluation metrics and the statistics used to compare models.

Dice for segmentation, Mann-Whitney AUROC for classification, percentile
bootstrap CIs, DeLong's test for correlated AUCs and the paired t-test.
"""

from __future__ import annotations

import csv
import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy import special, stats


class MetricKind(str, enum.Enum):
    DICE = "DICE"
    AUROC = "AUROC"


class TestKind(str, enum.Enum):
    PAIRED_T = "PAIRED_T"
    DELONG = "DELONG"
    BOOTSTRAP = "BOOTSTRAP"


class UndefinedMetric(ValueError):
    """Raised by a metric that has no value on the given sample."""


def stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


@dataclass(frozen=True)
class MetricReport:
    metric: MetricKind
    point: float
    ci_low: float
    ci_high: float
    n_resamples: int = 1000
    seed: int = 0


@dataclass(frozen=True)
class ComparisonResult:
    test: TestKind
    statistic: float
    p_value: float
    degenerate: bool = False

    @property
    def stars(self) -> str:
        return stars(self.p_value)


# -- segmentation --------------------------------------------------------------

@dataclass(frozen=True)
class DiceResult:
    per_class: np.ndarray
    mean: float


def dice_score(pred, gt, n_classes: int, include_background: bool = False) -> DiceResult:
    """Per-class Dice ``2|P∩G| / (|P|+|G|)``; a class absent from both scores 1."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if pred.size and (pred.max() >= n_classes or gt.max() >= n_classes or pred.min() < 0 or gt.min() < 0):
        raise ValueError(f"class index outside [0, {n_classes})")
    per = np.empty(n_classes)
    for k in range(n_classes):
        p, g = pred == k, gt == k
        denom = int(p.sum()) + int(g.sum())
        per[k] = 1.0 if denom == 0 else 2.0 * int((p & g).sum()) / denom
    used = per if include_background or n_classes == 1 else per[1:]
    return DiceResult(per, float(used.mean()))


# -- AUROC -------------------------------------------------------------------

def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties given their average rank."""
    return stats.rankdata(x, method="average")


def _split_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    pos, neg = scores[labels == 1], scores[labels == 0]
    if len(pos) + len(neg) != len(labels):
        raise ValueError("binary labels must be 0 or 1")
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetric("AUROC needs both classes present")
    return pos, neg


def _auc_from_ranks(rank_pos_sum: float, m: int, n: int) -> float:
    return (rank_pos_sum - m * (m + 1) / 2.0) / (m * n)


def auroc_rows(scores, labels) -> np.ndarray:
    """Binary AUROC of every row of ``scores`` (shape ``(R, n)``) against shared ``labels``."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.asarray(labels)
    if scores.shape[1:] != labels.shape:
        raise ValueError("scores and labels must have the same length")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("binary labels must be 0 or 1")
    m = int((labels == 1).sum())
    n = len(labels) - m
    if m == 0 or n == 0:
        raise UndefinedMetric("AUROC needs both classes present")
    ranks = stats.rankdata(scores, method="average", axis=1)
    return _auc_from_ranks(ranks[:, labels == 1].sum(axis=1), m, n)


def binary_auroc(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.shape != np.shape(labels):
        raise ValueError("scores and labels must have the same length")
    return float(auroc_rows(scores[None], labels)[0])


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC (ties count one half).

    With 2-D ``scores`` of shape ``(n, K)`` and integer labels, returns the
    macro one-vs-rest mean over the classes that occur in ``labels``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        return binary_auroc(scores, labels)
    present = np.unique(labels)
    if len(present) < 2:
        raise UndefinedMetric("AUROC needs at least two classes present")
    return float(np.mean([binary_auroc(scores[:, k], (labels == k).astype(int)) for k in present]))


# -- bootstrap ---------------------------------------------------------------

def _replicate(metric: Callable[[np.ndarray], float], n: int, seed: int, r: int) -> float:
    for attempt in range(10 * n):
        idx = np.random.default_rng([seed, r, attempt]).integers(0, n, size=n)
        try:
            v = metric(idx)
        except UndefinedMetric:
            continue
        if np.isfinite(v):
            return float(v)
    raise UndefinedMetric(f"bootstrap replicate {r}: metric undefined after {10 * n} draws")


def bootstrap_values(metric, n: int, n_resamples: int = 1000, seed: int = 0, workers: int = 1) -> np.ndarray:
    """Metric on ``n_resamples`` with-replacement resamples of ``range(n)``.

    Replicate ``r`` draws from a generator seeded by ``(seed, r)``, so the
    result does not depend on ``workers``.
    """
    if n < 2:
        raise ValueError("bootstrap needs n >= 2")
    if workers <= 1:
        return np.array([_replicate(metric, n, seed, r) for r in range(n_resamples)])
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.array(list(pool.map(lambda r: _replicate(metric, n, seed, r), range(n_resamples))))


def bootstrap_ci(metric, n: int, n_resamples: int = 1000, seed: int = 0, workers: int = 1,
                 level: float = 0.95) -> tuple[float, float]:
    vals = bootstrap_values(metric, n, n_resamples, seed, workers)
    tail = 100 * (1 - level) / 2
    lo, hi = np.percentile(vals, [tail, 100 - tail])
    return float(lo), float(hi)


def metric_report(kind: MetricKind, metric, n: int, n_resamples: int = 1000, seed: int = 0,
                  workers: int = 1) -> MetricReport:
    point = float(metric(np.arange(n)))
    lo, hi = bootstrap_ci(metric, n, n_resamples, seed, workers)
    # percentile intervals can miss a skewed point estimate; widen to keep it inside
    return MetricReport(kind, point, min(lo, point), max(hi, point), n_resamples, seed)


def mean_report(values, n_resamples: int = 1000, seed: int = 0, kind: MetricKind = MetricKind.DICE) -> MetricReport:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        x = float(v.mean()) if len(v) else float("nan")
        return MetricReport(kind, x, x, x, 0, seed)
    return metric_report(kind, lambda idx: v[idx].mean(), len(v), n_resamples, seed)


def bootstrap_compare(metric_a, metric_b, n: int, n_resamples: int = 1000, seed: int = 0) -> ComparisonResult:
    """Two-sided bootstrap p-value for ``metric_a - metric_b`` on paired cases."""
    diffs = bootstrap_values(lambda idx: metric_a(idx) - metric_b(idx), n, n_resamples, seed)
    observed = float(metric_a(np.arange(n)) - metric_b(np.arange(n)))
    if np.all(diffs == 0):
        return ComparisonResult(TestKind.BOOTSTRAP, observed, 1.0, True)
    p = 2 * min(np.mean(diffs <= 0), np.mean(diffs >= 0))
    return ComparisonResult(TestKind.BOOTSTRAP, observed, float(min(1.0, p)))


# -- DeLong ------------------------------------------------------------------

@dataclass(frozen=True)
class DelongResult:
    comparison: ComparisonResult
    auc_a: float
    auc_b: float
    var_a: float
    var_b: float
    cov_ab: float
    ci_a: tuple[float, float]
    ci_b: tuple[float, float]

    @property
    def p_value(self) -> float:
        return self.comparison.p_value


def delong_components(scores, labels):
    """AUC and its structural components for one score vector.

    Returns ``(auc, v10, v01)`` with ``v10`` over positives and ``v01`` over negatives.
    """
    pos, neg = _split_binary(scores, labels)
    m, n = len(pos), len(neg)
    tz = midranks(np.concatenate([pos, neg]))
    tx, ty = midranks(pos), midranks(neg)
    v10 = (tz[:m] - tx) / n
    v01 = 1.0 - (tz[m:] - ty) / m
    return _auc_from_ranks(tz[:m].sum(), m, n), v10, v01


def delong_variance(scores, labels) -> float:
    _, v10, v01 = delong_components(scores, labels)
    return float(np.var(v10, ddof=1) / len(v10) + np.var(v01, ddof=1) / len(v01))


def _normal_ci(auc: float, var: float, z: float = 1.959963984540054) -> tuple[float, float]:
    half = z * math.sqrt(max(var, 0.0))
    return max(0.0, auc - half), min(1.0, auc + half)


def delong_test(scores_a, scores_b, labels) -> DelongResult:
    """DeLong's test for two correlated AUCs on the same cases (two-sided)."""
    auc_a, a10, a01 = delong_components(scores_a, labels)
    auc_b, b10, b01 = delong_components(scores_b, labels)
    m, n = len(a10), len(a01)
    s10 = np.cov(np.vstack([a10, b10]), ddof=1)
    s01 = np.cov(np.vstack([a01, b01]), ddof=1)
    s = s10 / m + s01 / n
    var_diff = float(s[0, 0] + s[1, 1] - 2 * s[0, 1])
    delta = auc_a - auc_b
    if var_diff <= 1e-300:
        degenerate = True
        z = 0.0 if delta == 0 else math.copysign(math.inf, delta)
        p = 1.0 if delta == 0 else 0.0
    else:
        degenerate = False
        z = delta / math.sqrt(var_diff)
        p = float(min(1.0, 2.0 * special.ndtr(-abs(z))))
    comp = ComparisonResult(TestKind.DELONG, z, p, degenerate)
    return DelongResult(comp, auc_a, auc_b, float(s[0, 0]), float(s[1, 1]), float(s[0, 1]),
                        _normal_ci(auc_a, s[0, 0]), _normal_ci(auc_b, s[1, 1]))


# -- paired t-test -----------------------------------------------------------

def student_t_sf2(t: float, dof: int) -> float:
    """Two-sided tail probability P(|T| >= |t|) via the regularized incomplete beta."""
    if math.isinf(t):
        return 0.0
    return float(special.betainc(dof / 2.0, 0.5, dof / (dof + t * t)))


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> ComparisonResult:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("paired t-test needs two equal-length samples of size >= 2")
    d = a - b
    if np.all(d == 0):
        return ComparisonResult(TestKind.PAIRED_T, 0.0, 1.0, True)
    n = len(d)
    sd = d.std(ddof=1)
    if sd == 0:
        t = math.copysign(math.inf, d.mean())
    else:
        t = d.mean() / (sd / math.sqrt(n))
    return ComparisonResult(TestKind.PAIRED_T, float(t), student_t_sf2(t, n - 1))


# -- cross-validation --------------------------------------------------------

class CrossValError(RuntimeError):
    pass


@dataclass
class CrossValResult:
    fold_reports: list[MetricReport]
    pooled: MetricReport
    per_case: dict[str, float] = field(default_factory=dict)
    fold_of: dict[str, int] = field(default_factory=dict)


def crossval_run(split, trainer: Callable[[int, object], Mapping[str, float]],
                 metric: MetricKind = MetricKind.DICE, n_resamples: int = 1000, seed: int = 0) -> CrossValResult:
    """Run ``trainer(fold_index, fold)`` per fold; it returns per-case scores
    keyed by the fold's test ids. Per-fold and pooled means get bootstrap CIs."""
    reports, per_case, fold_of = [], {}, {}
    for k, fold in enumerate(split.folds):
        try:
            scores = dict(trainer(k, fold))
        except Exception as exc:
            raise CrossValError(f"fold {k}: {exc}") from exc
        if set(scores) != set(fold.test):
            raise CrossValError(f"fold {k}: trainer must score exactly the fold's test ids")
        for cid in fold.test:
            if cid in per_case:
                raise CrossValError(f"id {cid!r} tested in more than one fold")
            per_case[cid] = float(scores[cid])
            fold_of[cid] = k
        reports.append(mean_report([scores[c] for c in fold.test], n_resamples, seed, metric))
    pooled = mean_report(list(per_case.values()), n_resamples, seed, metric)
    return CrossValResult(reports, pooled, per_case, fold_of)


RESULT_FIELDS = ["task", "model", "fold", "metric", "point", "ci_low", "ci_high", "p_vs_reference", "stars"]


def result_rows(task: str, model: str, cv: CrossValResult, p_vs_reference: Optional[float] = None) -> list[dict]:
    rows = []
    for k, rep in enumerate(cv.fold_reports):
        rows.append(_row(task, model, str(k), rep, None))
    rows.append(_row(task, model, "pooled", cv.pooled, p_vs_reference))
    return rows


def _row(task, model, fold, rep: MetricReport, p) -> dict:
    return {
        "task": task, "model": model, "fold": fold, "metric": rep.metric.value,
        "point": f"{rep.point:.6f}", "ci_low": f"{rep.ci_low:.6f}", "ci_high": f"{rep.ci_high:.6f}",
        "p_vs_reference": "" if p is None else f"{p:.6g}", "stars": "" if p is None else stars(p),
    }


def write_results_csv(rows: list[dict], path, comment: Optional[str] = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        if comment:
            f.write(f"# {comment}\n")
        w = csv.DictWriter(f, fieldnames=RESULT_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
