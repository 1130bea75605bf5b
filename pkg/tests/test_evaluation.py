import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tabadv.evaluation import (
    MetricError,
    evaluate,
    operating_threshold,
    pairwise_auc,
    pauc_at_fpr,
    recall_at_fpr,
    roc_curve,
    write_reports,
    report_row,
)


def brute_roc(scores, labels):
    """Every threshold between and beyond distinct scores, flag score >= t."""
    s = np.asarray(scores, float)
    y = np.asarray(labels) == 1
    pts = [(0.0, 0.0)]
    for t in sorted(set(s), reverse=True):
        f = s >= t
        pts.append(((f & ~y).sum() / (~y).sum(), (f & y).sum() / y.sum()))
    return pts


def brute_pauc(scores, labels, alpha):
    pts = brute_roc(scores, labels)
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        if x0 >= alpha:
            break
        if x1 > alpha:
            y1 = y0 + (y1 - y0) * (alpha - x0) / (x1 - x0)
            x1 = alpha
        area += (x1 - x0) * (y0 + y1) / 2
    return area / alpha


HAND = ([0.9, 0.8, 0.7, 0.4, 0.3, 0.1], [1, 1, 0, 1, 0, 0])


def test_hand_case():
    # ROC: (0,0) (0,1/3) (0,2/3) (1/3,2/3) (1/3,1) (2/3,1) (1,1); area up to 0.5 = 2/9 + 1/6 = 7/18
    assert pauc_at_fpr(*HAND, alpha=0.5) == pytest.approx((7 / 18) / 0.5, abs=1e-12)
    assert pauc_at_fpr(*HAND, alpha=0.5) == pytest.approx(brute_pauc(*HAND, 0.5), abs=1e-12)
    assert recall_at_fpr(*HAND, alpha=0.5) == pytest.approx(1.0)
    assert recall_at_fpr(*HAND, alpha=0.2) == pytest.approx(2 / 3)


def test_perfect_and_tied():
    y = np.r_[np.ones(50), np.zeros(500)]
    assert pauc_at_fpr(np.r_[np.ones(50), np.zeros(500)], y) == pytest.approx(1.0)
    assert recall_at_fpr(np.r_[np.ones(50), np.zeros(500)], y) == 1.0
    flat = np.full(550, 0.3)
    assert pauc_at_fpr(flat, y, 0.01) == pytest.approx(0.005, abs=1e-12)
    assert recall_at_fpr(flat, y) == 0.0


def test_mcclish():
    y = np.r_[np.ones(50), np.zeros(500)]
    assert pauc_at_fpr(np.full(550, 0.3), y, 0.01, "mcclish") == pytest.approx(0.5)
    assert pauc_at_fpr(np.r_[np.ones(50), np.zeros(500)], y, 0.01, "mcclish") == pytest.approx(1.0)
    with pytest.raises(MetricError):
        pauc_at_fpr(np.r_[np.ones(50), np.zeros(500)], y, 0.01, "other")


def test_full_alpha_equals_pairwise_auc():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(5, 200))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = np.round(rng.normal(size=n) + y, int(rng.integers(0, 3)))  # rounding creates ties
        assert pauc_at_fpr(s, y, 1.0) == pytest.approx(pairwise_auc(s, y), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.booleans()), min_size=4, max_size=40), st.sampled_from([0.05, 0.1, 0.3, 0.5, 1.0]))
def test_pauc_matches_brute_force(pairs, alpha):
    s = [p[0] for p in pairs]
    y = [int(p[1]) for p in pairs]
    if len(set(y)) < 2:
        return
    assert pauc_at_fpr(s, y, alpha) == pytest.approx(brute_pauc(s, y, alpha), abs=1e-12)
    fpr, tpr, _ = roc_curve(s, y)
    assert list(zip(fpr, tpr)) == pytest.approx(brute_roc(s, y))


def test_monotone_transform_invariance():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, 500)
    s = rng.normal(size=500) + y
    for f in (np.exp, lambda x: 3 * x + 1, np.tanh):
        assert pauc_at_fpr(f(s), y, 0.05) == pytest.approx(pauc_at_fpr(s, y, 0.05), abs=1e-12)
        assert recall_at_fpr(f(s), y, 0.05) == recall_at_fpr(s, y, 0.05)


def test_single_class_rejected():
    with pytest.raises(MetricError):
        pauc_at_fpr([0.1, 0.2], [0, 0])


def test_operating_threshold_respects_fpr():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 2, 2000)
    s = rng.normal(size=2000) + 2 * y
    t = operating_threshold(s, y, 0.01)
    assert np.mean(s[y == 0] >= t) <= 0.01
    assert np.mean(s[y == 1] >= t) == pytest.approx(recall_at_fpr(s, y, 0.01))


def test_evaluate_reports():
    rng = np.random.default_rng(3)
    y = np.r_[np.ones(100), np.zeros(2000)].astype(int)
    clean = np.r_[rng.uniform(0.5, 1, 100), rng.uniform(0, 0.6, 2000)]
    same = evaluate(clean, clean, y, 0.01)
    assert same.adversarial_pauc == same.clean_pauc and same.success_rate == 0.0
    adv = clean.copy()
    adv[:100] = 0.0
    rep = evaluate(clean, adv, y, 0.01)
    assert rep.success_rate == 1.0 and rep.adversarial_recall == 0.0
    assert rep.adversarial_pauc <= rep.clean_pauc + 1e-12
    bad = clean.copy()
    bad[500] = 0.99
    with pytest.raises(MetricError):
        evaluate(clean, bad, y)


def test_write_reports(tmp_path):
    y = np.array([1, 0, 0, 1])
    rep = evaluate([0.9, 0.1, 0.2, 0.8], [0.9, 0.1, 0.2, 0.1], y, 0.5, norm_cap=30)
    p = tmp_path / "r.csv"
    write_reports(p, [report_row(rep, model="baseline")])
    head, row = p.read_text().splitlines()
    assert head.startswith("model,clean_pauc") and row.startswith("baseline,")
