"""Detection metrics and evaluation protocols.

Metrics treat MALICIOUS as the positive class. Three study designs are
provided: stratified k-fold cross-validation, a stratified holdout split, and
train-once/test-later "span" evaluation for detection over time.
"""

from __future__ import annotations

import csv
import enum
import math
from collections import defaultdict
from dataclasses import dataclass, field
from statistics import fmean
from typing import Callable, Hashable, Iterable, Optional, Sequence, TextIO

import numpy as np
from scipy import stats

from .classifier import ForestParams, LabeledSample, train, tree_seed
from .errors import GroupTooSmall, SingleClassTrainingSet, TooFewSamples
from .sad_extractor import FEATURE_NAMES, N_FEATURES, SadProfile
from .trace_model import Label


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


@dataclass(frozen=True)
class MetricTriple:
    precision: float
    recall: float
    f1: float
    # set when some ratio had a zero denominator and was defined as 0
    degenerate: bool = False


def confusion_from_pairs(pairs: Iterable[tuple[Label, Label]]) -> ConfusionCounts:
    """Tally (true label, predicted label) pairs."""
    tp = fp = tn = fn = 0
    for truth, pred in pairs:
        actual = truth is Label.MALICIOUS
        flagged = pred is Label.MALICIOUS
        if actual and flagged:
            tp += 1
        elif flagged:
            fp += 1
        elif actual:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, tn, fn)


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def compute_metrics(c: ConfusionCounts) -> MetricTriple:
    degenerate = False
    if c.tp + c.fp:
        precision = c.tp / (c.tp + c.fp)
    else:
        precision, degenerate = 0.0, True
    if c.tp + c.fn:
        recall = c.tp / (c.tp + c.fn)
    else:
        recall, degenerate = 0.0, True
    if precision + recall == 0:
        degenerate = True
    return MetricTriple(precision, recall, f1_score(precision, recall), degenerate)


class Study(enum.Enum):
    CV = "CV"
    HOLDOUT = "HOLDOUT"
    SPAN = "SPAN"


@dataclass(frozen=True)
class ReportRow:
    train_tag: str
    test_tag: str
    span_years: Optional[int]
    metrics: MetricTriple
    counts: ConfusionCounts


@dataclass
class EvalReport:
    study: Study
    rows: list[ReportRow]
    folds: list[ReportRow] = field(default_factory=list)
    fold_assignment: list[int] = field(default_factory=list)

    @property
    def f1(self) -> float:
        return self.rows[0].metrics.f1


def _evaluate(model, samples: Sequence[LabeledSample]) -> ConfusionCounts:
    X = np.asarray([s.features for s in samples], dtype=np.float64)
    preds = model.predict_many(X)
    return confusion_from_pairs((s.label, p) for s, p in zip(samples, preds))


def _by_class(samples: Sequence[LabeledSample]) -> dict[Label, list[int]]:
    groups: dict[Label, list[int]] = {Label.BENIGN: [], Label.MALICIOUS: []}
    for i, s in enumerate(samples):
        if s.label not in groups:
            raise ValueError(f"sample {s.app_id!r} is {s.label.value}; evaluation needs labeled samples")
        groups[s.label].append(i)
    return groups


def _derived_seed(seed: int, stream: int) -> int:
    return tree_seed(seed, stream)


def stratified_folds(samples: Sequence[LabeledSample], k: int, seed: int) -> list[int]:
    """Fold number for every sample.

    Each class is shuffled and the classes are laid end to end; position ``j``
    in that sequence goes to fold ``j % k``. Fold sizes then differ by at most
    one, and so does each class's count per fold.
    """
    rng = np.random.default_rng(_derived_seed(seed, 0))
    assignment = [0] * len(samples)
    pos = 0
    for label in (Label.BENIGN, Label.MALICIOUS):
        members = _by_class(samples)[label]
        for i in rng.permutation(len(members)):
            assignment[members[i]] = pos % k
            pos += 1
    return assignment


def cross_validate(
    samples: Sequence[LabeledSample],
    params: ForestParams = ForestParams(),
    k: int = 10,
    seed: int = 0,
    tag: str = "all",
) -> EvalReport:
    """Stratified k-fold CV; the aggregate row averages per-fold metrics."""
    if k < 2:
        raise ValueError("k must be at least 2")
    by_class = _by_class(samples)
    for label, members in by_class.items():
        if len(members) < k:
            raise TooFewSamples(f"{len(members)} {label.value} samples for {k} folds")
    assignment = stratified_folds(samples, k, seed)

    folds = []
    for fold in range(k):
        train_set = [s for s, a in zip(samples, assignment) if a != fold]
        test_set = [s for s, a in zip(samples, assignment) if a == fold]
        fold_params = _with_seed(params, _derived_seed(seed, fold + 1))
        model = train(train_set, fold_params)
        counts = _evaluate(model, test_set)
        folds.append(ReportRow(tag, f"fold{fold + 1}", None, compute_metrics(counts), counts))

    aggregate = MetricTriple(
        precision=fmean(r.metrics.precision for r in folds),
        recall=fmean(r.metrics.recall for r in folds),
        f1=fmean(r.metrics.f1 for r in folds),
        degenerate=any(r.metrics.degenerate for r in folds),
    )
    total = sum((r.counts for r in folds), ConfusionCounts())
    return EvalReport(Study.CV, [ReportRow(tag, "mean", None, aggregate, total)], folds, assignment)


def _with_seed(params: ForestParams, seed: int) -> ForestParams:
    return ForestParams(
        n_trees=params.n_trees,
        max_depth=params.max_depth,
        min_samples_split=params.min_samples_split,
        features_per_split=params.features_per_split,
        bootstrap=params.bootstrap,
        seed=seed,
    )


def holdout_split(
    samples: Sequence[LabeledSample], test_fraction: float = 0.30, seed: int = 0
) -> tuple[list[int], list[int]]:
    """Stratified split: ``round(test_fraction * n_class)`` per class go to test."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(_derived_seed(seed, 0))
    train_idx: list[int] = []
    test_idx: list[int] = []
    for label, members in _by_class(samples).items():
        n_test = round(test_fraction * len(members))
        if n_test < 1 or n_test >= len(members):
            raise TooFewSamples(
                f"{len(members)} {label.value} samples cannot be split {1 - test_fraction:.0%}/{test_fraction:.0%}"
            )
        shuffled = [members[i] for i in rng.permutation(len(members))]
        test_idx += shuffled[:n_test]
        train_idx += shuffled[n_test:]
    return sorted(train_idx), sorted(test_idx)


def holdout_eval(
    samples: Sequence[LabeledSample],
    params: ForestParams = ForestParams(),
    test_fraction: float = 0.30,
    seed: int = 0,
    tag: str = "all",
) -> EvalReport:
    train_idx, test_idx = holdout_split(samples, test_fraction, seed)
    model = train([samples[i] for i in train_idx], _with_seed(params, _derived_seed(seed, 1)))
    counts = _evaluate(model, [samples[i] for i in test_idx])
    row = ReportRow(f"{tag}:train", f"{tag}:test", None, compute_metrics(counts), counts)
    return EvalReport(Study.HOLDOUT, [row])


def span_eval(
    train_samples: Sequence[LabeledSample],
    test_sets: Sequence[tuple],
    params: ForestParams = ForestParams(),
    seed: int = 0,
    train_tag: str = "train",
) -> EvalReport:
    """Train once, then test against each later set.

    ``test_sets`` items are ``(tag, samples)`` or ``(tag, samples, span_years)``.
    Without an explicit span, it is the earliest test year minus the latest
    training year.
    """
    labels = {s.label for s in train_samples}
    if labels != {Label.BENIGN, Label.MALICIOUS}:
        raise SingleClassTrainingSet("span training set needs both BENIGN and MALICIOUS samples")
    train_year = max(s.year for s in train_samples)
    resolved = []
    for item in test_sets:
        tag, samples = item[0], item[1]
        if not samples:
            raise TooFewSamples(f"test set {tag!r} is empty")
        span = item[2] if len(item) > 2 else min(s.year for s in samples) - train_year
        resolved.append((span, tag, samples))

    model = train(train_samples, _with_seed(params, _derived_seed(seed, 1)))
    rows = []
    for span, tag, samples in sorted(resolved, key=lambda r: r[0]):
        counts = _evaluate(model, samples)
        rows.append(ReportRow(train_tag, tag, span, compute_metrics(counts), counts))
    return EvalReport(Study.SPAN, rows)


# -- summary statistics -----------------------------------------------------


@dataclass(frozen=True)
class SummaryStat:
    feature: int  # 1-based
    group: tuple[str, str]  # (dataset tag, label)
    n: int
    mean: float
    ci_low: float
    ci_high: float

    @property
    def half_width(self) -> float:
        return (self.ci_high - self.ci_low) / 2


def mean_ci(values: Sequence[float], confidence: float = 0.95) -> tuple[float, float]:
    """Mean and two-sided Student-t half-width."""
    n = len(values)
    if n < 2:
        raise GroupTooSmall(f"need at least 2 values for a confidence interval, got {n}")
    if min(values) == max(values):
        return float(values[0]), 0.0
    mean = math.fsum(values) / n
    sd = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1))
    t = float(stats.t.ppf(0.5 + confidence / 2, n - 1))
    return mean, t * sd / math.sqrt(n)


def summarize(
    profiles: Iterable[SadProfile],
    tag_of: Callable[[SadProfile], Hashable] = lambda p: str(p.year),
    confidence: float = 0.95,
) -> list[SummaryStat]:
    """Per-feature mean and CI for every (tag, label) group."""
    groups: dict[tuple[str, str], list[SadProfile]] = defaultdict(list)
    for p in profiles:
        groups[(str(tag_of(p)), p.label.value)].append(p)
    out = []
    for key in sorted(groups):
        members = groups[key]
        if len(members) < 2:
            raise GroupTooSmall(f"group {key} has {len(members)} profile(s)")
        for j in range(N_FEATURES):
            mean, hw = mean_ci([float(p.values[j]) for p in members], confidence)
            out.append(SummaryStat(j + 1, key, len(members), mean, mean - hw, mean + hw))
    return out


# -- output -------------------------------------------------------------------

REPORT_HEADER = ("study", "train_tag", "test_tag", "span_years", "precision", "recall", "f1", "tp", "fp", "tn", "fn")


def _report_rows(report: EvalReport) -> list[ReportRow]:
    return report.folds + report.rows if report.study is Study.CV else report.rows


def write_report_csv(report: EvalReport, fh: TextIO) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for r in _report_rows(report):
        m, c = r.metrics, r.counts
        writer.writerow([
            report.study.value, r.train_tag, r.test_tag, "" if r.span_years is None else r.span_years,
            f"{m.precision:.6f}", f"{m.recall:.6f}", f"{m.f1:.6f}", c.tp, c.fp, c.tn, c.fn,
        ])


def format_report(report: EvalReport) -> str:
    lines = [f"{report.study.value} report"]
    lines.append(f"{'train':<16} {'test':<16} {'span':>4} {'P':>6} {'R':>6} {'F1':>6}   tp   fp   tn   fn")
    for r in _report_rows(report):
        m, c = r.metrics, r.counts
        span = "" if r.span_years is None else str(r.span_years)
        flag = " *" if m.degenerate else ""
        lines.append(
            f"{r.train_tag:<16} {r.test_tag:<16} {span:>4} {m.precision:6.3f} {m.recall:6.3f} {m.f1:6.3f}"
            f" {c.tp:4d} {c.fp:4d} {c.tn:4d} {c.fn:4d}{flag}"
        )
    if any(r.metrics.degenerate for r in _report_rows(report)):
        lines.append("* a zero-denominator ratio was taken as 0")
    return "\n".join(lines)


SUMMARY_HEADER = ("feature", "name", "group", "label", "n", "mean", "ci_low", "ci_high")


def write_summary_csv(summary: Iterable[SummaryStat], fh: TextIO) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(SUMMARY_HEADER)
    for s in summary:
        writer.writerow([
            f"f{s.feature}", FEATURE_NAMES[s.feature - 1], s.group[0], s.group[1], s.n,
            f"{s.mean:.9g}", f"{s.ci_low:.9g}", f"{s.ci_high:.9g}",
        ])


__all__ = [
    "ConfusionCounts",
    "EvalReport",
    "MetricTriple",
    "ReportRow",
    "Study",
    "SummaryStat",
    "compute_metrics",
    "confusion_from_pairs",
    "cross_validate",
    "f1_score",
    "format_report",
    "holdout_eval",
    "holdout_split",
    "mean_ci",
    "span_eval",
    "stratified_folds",
    "summarize",
    "write_report_csv",
    "write_summary_csv",
]
