import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsiblend.annotations import CLASS_ORDER, ArtifactClass
from wsiblend.errors import AllZeroDifferences, LengthMismatch, MalformedTable, SingleClassInput, TooFewPairs
from wsiblend.metrics import (
    CONFUSION_LABELS,
    PredictionTable,
    compare_models,
    confusion_with_threshold,
    per_class_report,
    read_predictions,
    roc_auc,
    wilcoxon_signed_rank,
    write_predictions,
)


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def enumerate_p(d):
    """Two-sided exact p by listing every sign assignment of the ranked |d|."""
    a = np.abs(d)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(len(a))
    sa = a[order]
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and sa[j + 1] == sa[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    w_obs = min(ranks[d > 0].sum(), ranks[d < 0].sum())
    hits = 0
    total = 0
    for signs in itertools.product((0, 1), repeat=len(a)):
        wp = sum(r for r, s in zip(ranks, signs) if s)
        wm = ranks.sum() - wp
        hits += min(wp, wm) <= w_obs + 1e-9
        total += 1
    return hits / total


def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.4, 0.3], [1, 1, 0, 0]).auc == 1.0
    assert roc_auc([0.9, 0.3, 0.8, 0.4], [1, 1, 0, 0]).auc == 0.5
    with pytest.raises(SingleClassInput):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(LengthMismatch):
        roc_auc([0.1, 0.2], [1])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 200), st.integers(0, 10**6))
def test_auc_equals_pairwise_and_monotone_invariant(n, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # coarse rounding forces ties
    auc = roc_auc(scores, labels).auc
    assert abs(auc - pairwise_auc(scores, labels)) < 1e-12
    assert abs(roc_auc(np.exp(3 * scores) - 7, labels).auc - auc) < 1e-12
    curve = roc_auc(scores, labels)
    assert curve.fpr[0] == 0 and curve.tpr[-1] == 1 and curve.fpr[-1] == 1


def table(scores, truth, ids=None):
    ids = ids or [f"p{i}" for i in range(len(truth))]
    return PredictionTable(ids, np.asarray(scores, float), truth)


def test_confusion_rules():
    air, dust, ink = ArtifactClass.AIR, ArtifactClass.DUST, ArtifactClass.INK
    t = table([[0.9, 0, 0, 0, 0, 0]], [air])
    assert confusion_with_threshold(t)[0, 0] == 1
    t = table(np.full((3, 6), 0.1), [air, None, ink])
    cm = confusion_with_threshold(t)
    assert cm[:, 6].sum() == 3
    t = table([[0, 0.8, 0, 0.8, 0, 0]], [ink])
    cm = confusion_with_threshold(t)
    assert cm[ink.index, dust.index] == 1
    rng = np.random.default_rng(0)
    truth = [None if k == 6 else CLASS_ORDER[k] for k in rng.integers(0, 7, 50)]
    cm = confusion_with_threshold(table(rng.random((50, 6)), truth), 0.7)
    for i, lab in enumerate(CONFUSION_LABELS):
        want = sum(1 for t in truth if (t.value if t else "background") == lab)
        assert cm[i].sum() == want


def test_wilcoxon_examples():
    r = wilcoxon_signed_rank([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
    assert r.statistic == 0 and r.pvalue == 0.0625 and r.method == "exact"
    r = wilcoxon_signed_rank([1, -1, 2, -2, 3, -3], [0] * 6)
    assert r.w_plus == r.w_minus and r.pvalue == 1.0
    with pytest.raises(AllZeroDifferences):
        wilcoxon_signed_rank([1, 2, 3], [1, 2, 3])
    with pytest.raises(TooFewPairs):
        wilcoxon_signed_rank([1, 2, 3, 4, 5], [1, 2, 3, 0, 0])
    with pytest.raises(LengthMismatch):
        wilcoxon_signed_rank([1, 2], [1])


@settings(max_examples=25, deadline=None)
@given(st.integers(5, 11), st.integers(0, 10**6))
def test_exact_p_equals_enumeration(n, seed):
    rng = np.random.default_rng(seed)
    d = rng.integers(-4, 5, n).astype(float)
    d[d == 0] = 1.0
    assert wilcoxon_signed_rank(d, np.zeros(n), "exact").pvalue == pytest.approx(enumerate_p(d), abs=1e-12)


def max_exact_approx_gap(n):
    """Largest |exact - approx| over every attainable W for untied ranks 1..n."""
    ranks = np.arange(1, n + 1, dtype=float)
    gaps = []
    for w_plus in range(0, n * (n + 1) // 4 + 1):
        d = -ranks.copy()
        rest = w_plus
        for k in range(n - 1, -1, -1):  # greedy subset of ranks summing to w_plus
            if ranks[k] <= rest:
                d[k] = ranks[k]
                rest -= ranks[k]
        e = wilcoxon_signed_rank(d, np.zeros(n), "exact").pvalue
        a = wilcoxon_signed_rank(d, np.zeros(n), "approx").pvalue
        gaps.append(abs(e - a))
    return max(gaps)


def test_exact_vs_approx_gap_profile():
    # the continuity-corrected normal approximation overshoots 0.01 only near p ~ 0.45 for n = 15, 16
    gaps = {n: max_exact_approx_gap(n) for n in range(15, 21)}
    assert all(gaps[n] < 0.01 for n in range(17, 21))
    assert 0.01 < gaps[15] < 0.0115 and 0.01 < gaps[16] < 0.0105
    assert all(gaps[n] > gaps[n + 1] for n in range(15, 20))


def test_approx_against_scipy():
    from scipy import stats
    rng = np.random.default_rng(2)
    d = np.round(rng.normal(0.2, 1, 60), 1)
    d = d[d != 0]
    r = wilcoxon_signed_rank(d, np.zeros(d.size))
    ref = stats.wilcoxon(d, correction=True, method="approx")
    assert r.statistic == ref.statistic
    assert abs(r.pvalue - ref.pvalue) < 1e-9


def test_per_class_report():
    rng = np.random.default_rng(3)
    truth = [CLASS_ORDER[k] for k in rng.integers(0, 6, 60)]
    truth[0] = None
    perfect = table(np.zeros((60, 6)), truth)
    perfect.scores[:] = perfect.indicators()
    rep = per_class_report(perfect)
    assert all(v == 1.0 for v in rep.values())
    no_ink = [t if t is not ArtifactClass.INK else ArtifactClass.AIR for t in truth]
    assert per_class_report(table(rng.random((60, 6)), no_ink))["ink"] is None
    big = [CLASS_ORDER[k] for k in rng.integers(0, 6, 10_000)]
    rep = per_class_report(table(rng.random((10_000, 6)), big))
    assert all(abs(v - 0.5) < 0.02 for v in rep.values())


def test_table_io_and_validation(tmp_path):
    t = table([[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], [1, 0, 0, 0, 0, 0]], [ArtifactClass.FOCUS, None])
    write_predictions(t, tmp_path / "p.csv")
    back = read_predictions(tmp_path / "p.csv")
    assert back.patch_ids == t.patch_ids and back.truth == t.truth
    np.testing.assert_array_equal(back.scores, t.scores)
    with pytest.raises(MalformedTable):
        table([[1.5, 0, 0, 0, 0, 0]], [None])
    with pytest.raises(MalformedTable):
        table(np.zeros((2, 6)), [None, None], ids=["a", "a"])
    (tmp_path / "bad.csv").write_text("patch_id,air\nx,0.1\n")
    with pytest.raises(MalformedTable):
        read_predictions(tmp_path / "bad.csv")


def test_compare_models_modes():
    rng = np.random.default_rng(4)
    n = 40
    truth = [CLASS_ORDER[k] for k in rng.integers(0, 6, n)]
    a = table(rng.random((n, 6)), truth)
    good = a.indicators() * 0.9 + 0.05
    b = table(good[::-1], truth[::-1], ids=a.patch_ids[::-1])
    res = compare_models(a, b)["all"]
    assert res.pvalue < 1e-6 and res.w_minus < res.w_plus  # a errs more than b
    per = compare_models(a, b, "per_class")
    assert set(per) == {c.value for c in CLASS_ORDER}
    c = table(rng.random((n - 1, 6)), truth[:-1])
    with pytest.raises(LengthMismatch):
        compare_models(a, c)
    same = compare_models(a, a, "per_class")
    assert all(isinstance(v, str) and "AllZeroDifferences" in v for v in same.values())
