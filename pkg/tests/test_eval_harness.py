import io
import math
import random
import statistics

import pytest
from hypothesis import given
from hypothesis import strategies as st

import sadspan.eval_harness as eh
from sadspan.classifier import ForestParams, LabeledSample
from sadspan.errors import GroupTooSmall, SingleClassTrainingSet, TooFewSamples
from sadspan.eval_harness import (
    ConfusionCounts,
    Study,
    compute_metrics,
    confusion_from_pairs,
    cross_validate,
    f1_score,
    format_report,
    holdout_eval,
    holdout_split,
    mean_ci,
    span_eval,
    stratified_folds,
    summarize,
    write_report_csv,
    write_summary_csv,
)
from sadspan.sad_extractor import N_FEATURES
from sadspan.trace_model import Label

from conftest import profile_with

SMALL = ForestParams(n_trees=10)
labels = st.sampled_from([Label.BENIGN, Label.MALICIOUS])


def separable(n_mal, n_ben, year=2012, prefix=""):
    rng = random.Random(f"{prefix}{n_mal}{n_ben}{year}")
    out = []
    for i in range(n_mal):
        x = (0.7 + 0.3 * rng.random(),) + (0.0,) * (N_FEATURES - 1)
        out.append(LabeledSample(x, Label.MALICIOUS, f"{prefix}m{i}", year))
    for i in range(n_ben):
        x = (0.3 * rng.random(),) + (0.0,) * (N_FEATURES - 1)
        out.append(LabeledSample(x, Label.BENIGN, f"{prefix}b{i}", year))
    return out


# -- metrics --------------------------------------------------------------------

def test_metrics_worked_example():
    m = compute_metrics(ConfusionCounts(tp=3, fp=1, tn=0, fn=1))
    assert (m.precision, m.recall, m.f1, m.degenerate) == (0.75, 0.75, 0.75, False)


def test_metrics_degenerate():
    m = compute_metrics(ConfusionCounts(tp=0, fp=0, tn=5, fn=0))
    assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)
    assert m.degenerate


def test_f1_of_equal_precision_recall():
    assert f1_score(0.937, 0.937) == pytest.approx(0.937, abs=1e-12)


@given(st.lists(st.tuples(labels, labels), max_size=60))
def test_confusion_matches_recount(pairs):
    c = confusion_from_pairs(pairs)
    assert c.total == len(pairs)
    tp = sum(1 for t, p in pairs if t is p is Label.MALICIOUS)
    fp = sum(1 for t, p in pairs if t is Label.BENIGN and p is Label.MALICIOUS)
    fn = sum(1 for t, p in pairs if t is Label.MALICIOUS and p is Label.BENIGN)
    assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, len(pairs) - tp - fp - fn)
    m = compute_metrics(c)
    if tp:
        p, r = tp / (tp + fp), tp / (tp + fn)
        assert m.f1 == pytest.approx(2 * p * r / (p + r))
        assert min(m.precision, m.recall) - 1e-12 <= m.f1 <= max(m.precision, m.recall) + 1e-12
    else:
        assert m.f1 == 0.0


# -- cross-validation ------------------------------------------------------------

def test_fold_sizes_103():
    samples = separable(50, 53)
    folds = stratified_folds(samples, 10, seed=1)
    sizes = sorted(folds.count(k) for k in range(10))
    assert sizes == [10] * 7 + [11] * 3
    for label in Label.BENIGN, Label.MALICIOUS:
        per = [sum(1 for s, f in zip(samples, folds) if f == k and s.label is label) for k in range(10)]
        assert max(per) - min(per) <= 1


@given(st.integers(2, 40), st.integers(2, 40), st.integers(2, 6), st.integers(0, 1000))
def test_folds_are_balanced(n_mal, n_ben, k, seed):
    samples = separable(n_mal, n_ben)
    folds = stratified_folds(samples, k, seed)
    sizes = [folds.count(j) for j in range(k)]
    assert sum(sizes) == len(samples) and max(sizes) - min(sizes) <= 1


def test_cv_separable_data():
    samples = separable(50, 50)
    report = cross_validate(samples, SMALL, k=10, seed=3)
    assert report.study is Study.CV
    assert report.f1 == 1.0
    assert len(report.folds) == 10
    assert report.rows[0].metrics.f1 == pytest.approx(statistics.fmean(r.metrics.f1 for r in report.folds))
    assert report.rows[0].counts.total == 100


def test_cv_aggregate_is_mean_of_folds():
    rng = random.Random(1)
    # noisy labels so folds differ
    samples = [
        LabeledSample(tuple(rng.random() for _ in range(N_FEATURES)), rng.choice(list(Label)[:2]), f"x{i}")
        for i in range(80)
    ]
    report = cross_validate(samples, SMALL, k=5, seed=2)
    for attr in ("precision", "recall", "f1"):
        assert getattr(report.rows[0].metrics, attr) == pytest.approx(
            statistics.fmean(getattr(r.metrics, attr) for r in report.folds)
        )


def test_cv_deterministic():
    samples = separable(30, 30)
    a, b = (cross_validate(samples, SMALL, k=5, seed=7) for _ in range(2))
    assert a.folds == b.folds and a.fold_assignment == b.fold_assignment


def test_cv_too_few():
    with pytest.raises(TooFewSamples):
        cross_validate(separable(9, 30), SMALL, k=10)


# -- holdout ---------------------------------------------------------------------

def test_holdout_sizes():
    samples = separable(500, 500)
    train_idx, test_idx = holdout_split(samples, 0.3, seed=4)
    assert (len(train_idx), len(test_idx)) == (700, 300)
    assert not set(train_idx) & set(test_idx)
    assert sum(samples[i].label is Label.MALICIOUS for i in test_idx) == 150
    ids_train = {samples[i].app_id for i in train_idx}
    assert not ids_train & {samples[i].app_id for i in test_idx}


def test_holdout_eval():
    report = holdout_eval(separable(50, 50), SMALL, seed=1)
    assert report.study is Study.HOLDOUT and report.f1 == 1.0
    assert report.rows[0].counts.total == 30


def test_holdout_too_few():
    with pytest.raises(TooFewSamples):
        holdout_split(separable(1, 10))


# -- span ------------------------------------------------------------------------

def test_span_trains_once(monkeypatch):
    calls = []
    real = eh.train

    def counting(*args, **kwargs):
        calls.append(1)
        return real(*args, **kwargs)

    monkeypatch.setattr(eh, "train", counting)
    train_set = separable(20, 20, 2012, "tr")
    tests = [(f"y{y}", separable(5, 5, y, f"te{y}")) for y in (2017, 2013, 2015, 2014, 2016)]
    report = span_eval(train_set, tests, SMALL)
    assert len(calls) == 1
    assert [r.span_years for r in report.rows] == [1, 2, 3, 4, 5]
    assert [r.test_tag for r in report.rows] == ["y2013", "y2014", "y2015", "y2016", "y2017"]


def test_span_explicit_and_single_class():
    train_set = separable(10, 10)
    report = span_eval(train_set, [("later", separable(3, 3, 2015), 7)], SMALL)
    assert report.rows[0].span_years == 7
    with pytest.raises(SingleClassTrainingSet):
        span_eval(separable(10, 0), [("t", separable(2, 2))], SMALL)


def test_report_outputs():
    report = cross_validate(separable(20, 20), SMALL, k=4)
    buf = io.StringIO()
    write_report_csv(report, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "study,train_tag,test_tag,span_years,precision,recall,f1,tp,fp,tn,fn"
    assert len(lines) == 6 and lines[-1].startswith("CV,all,mean,,")
    assert "fold4" in format_report(report)


# -- summary statistics -----------------------------------------------------------

def test_mean_ci_worked_example():
    mean, hw = mean_ci([0.1, 0.2, 0.3])
    assert mean == pytest.approx(0.2, abs=1e-12)
    assert hw == pytest.approx(4.3027 * 0.1 / math.sqrt(3), abs=1e-3)


def test_mean_ci_constant_and_small():
    assert mean_ci([0.4, 0.4, 0.4]) == (pytest.approx(0.4), 0.0)
    with pytest.raises(GroupTooSmall):
        mean_ci([0.5])


def test_summarize_groups():
    profiles = [profile_with({1: v}, app_id=f"a{i}", year=2012) for i, v in enumerate((0.1, 0.2, 0.3))]
    profiles += [profile_with({1: 0.5}, app_id=f"m{i}", label=Label.MALICIOUS, year=2012) for i in range(2)]
    stats = summarize(profiles)
    f1 = {s.group: s for s in stats if s.feature == 1}
    assert f1[("2012", "BENIGN")].mean == pytest.approx(0.2)
    assert f1[("2012", "BENIGN")].half_width == pytest.approx(0.248414, abs=1e-5)
    assert f1[("2012", "MALICIOUS")].half_width == 0.0
    assert len(stats) == 2 * N_FEATURES
    buf = io.StringIO()
    write_summary_csv(stats, buf)
    assert buf.getvalue().splitlines()[0] == "feature,name,group,label,n,mean,ci_low,ci_high"
    with pytest.raises(GroupTooSmall):
        summarize(profiles[:1])


@given(st.lists(st.floats(0, 1), min_size=2, max_size=30))
def test_summary_mean_matches_brute_force(values):
    profiles = [profile_with({5: v}, app_id=str(i)) for i, v in enumerate(values)]
    stat = next(s for s in summarize(profiles) if s.feature == 5)
    assert abs(stat.mean - sum(values) / len(values)) <= 1e-12
    assert stat.ci_low <= stat.mean <= stat.ci_high
