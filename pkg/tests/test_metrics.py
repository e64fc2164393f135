import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from magnets.metrics import (
    MetricsReport,
    explanation_auc,
    explanation_f1,
    magnets_mask_scores,
    normalize_attribution,
    pool_channels,
    r2,
    rmse,
    score_explanations,
)


def pairwise_auc(score, gt):
    """Count positive/negative pairs directly; ties earn half credit."""
    pos = score[gt.astype(bool)]
    neg = score[~gt.astype(bool)]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def test_regression_metrics():
    y = np.array([1.0, 3.0, 2.0, 5.0])
    assert rmse(y, y) == 0 and r2(y, y) == 1
    assert r2(y, np.full(4, y.mean())) == pytest.approx(0.0, abs=1e-15)
    assert rmse([0, 2], [1, 1]) == 1.0
    assert r2([0, 2], [1, 1]) == 0.0
    with pytest.raises(ValueError):
        r2([1.0, 1.0], [1.0, 2.0])


def test_pool_channels():
    a = np.array([[0.2, 0.7, 0.1]])
    np.testing.assert_array_equal(pool_channels(a), a[0])
    np.testing.assert_array_equal(pool_channels(np.array([[1, 0, 0], [0, 0, 1]])), [1, 0, 1])


def test_normalize_attribution():
    np.testing.assert_array_equal(normalize_attribution(np.array([-2.0, 1.0])), [1.0, 0.5])
    assert not normalize_attribution(np.zeros((2, 3))).any()
    with pytest.raises(ValueError):
        normalize_attribution(np.array([np.nan, 1.0]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=40))
def test_normalized_range(values):
    out = normalize_attribution(np.array(values))
    assert np.all((out >= 0) & (out <= 1))


def test_mask_scores():
    masks = np.zeros((1, 2, 6))
    masks[0, 0, :3] = 1
    masks[0, 1, 3:] = 1
    single = magnets_mask_scores(masks[:, :1], np.array([[0.4]]))
    np.testing.assert_array_equal(single, masks[:, 0])
    scores = magnets_mask_scores(masks, np.array([[1.0, -0.5]]))
    np.testing.assert_allclose(scores, [[1, 1, 1, 0.5, 0.5, 0.5]])
    assert not magnets_mask_scores(masks, np.zeros((1, 2))).any()
    union = magnets_mask_scores(masks, np.array([[1.0, -0.5]]), pool="union")
    np.testing.assert_array_equal(union, [[1, 1, 1, 1, 1, 1]])
    # dead masks (relative weight below 1e-6) are ignored
    dead = magnets_mask_scores(masks, np.array([[1.0, 1e-9]]), pool="union")
    np.testing.assert_array_equal(dead, [[1, 1, 1, 0, 0, 0]])


def test_auc_and_f1_reference_cases():
    gt = np.array([0, 1, 1, 0, 1])
    assert explanation_auc(gt.astype(float), gt) == 1.0
    assert explanation_f1(gt.astype(float), gt) == 1.0
    const = np.full(5, 0.3)
    assert explanation_auc(const, gt) == 0.5
    assert explanation_f1(const, gt) == 0.0
    assert explanation_f1(np.zeros(4), np.zeros(4)) == 1.0
    assert np.isnan(explanation_auc(np.ones(3), np.ones(3)))
    # threshold is strict
    assert explanation_f1(np.array([0.5, 0.5]), np.array([1, 1])) == 0.0


def test_auc_matches_pair_counting():
    rng = np.random.default_rng(7)
    for _ in range(200):
        n = rng.integers(2, 30)
        gt = rng.integers(0, 2, size=n)
        if gt.min() == gt.max():
            continue
        score = rng.integers(0, 5, size=n) / 4.0  # many ties
        assert explanation_auc(score, gt) == pytest.approx(pairwise_auc(score, gt), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_auc_invariant_to_monotone_maps(seed):
    rng = np.random.default_rng(seed)
    n = 32
    gt = rng.integers(0, 2, size=n)
    gt[0], gt[1] = 0, 1
    score = rng.uniform(size=n)
    a, b = rng.uniform(0.1, 5.0), rng.uniform(-3, 3)
    for f in (lambda s: a * s + b, np.exp, lambda s: s ** 3, lambda s: np.arctan(a * s)):
        assert explanation_auc(f(score), gt) == pytest.approx(explanation_auc(score, gt), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_f1_drops_when_true_positives_fall_below_threshold(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 2, size=20)
    score = rng.uniform(size=20)
    before = explanation_f1(score, gt)
    hits = np.flatnonzero((score > 0.5) & (gt == 1))
    if hits.size:
        lowered = score.copy()
        lowered[hits[: rng.integers(1, hits.size + 1)]] = 0.2
        assert explanation_f1(lowered, gt) <= before


def test_pool_identity_for_single_channel():
    rng = np.random.default_rng(0)
    s = rng.uniform(size=(1, 1, 16))
    g = (rng.uniform(size=(1, 1, 16)) > 0.5).astype(int)
    res = score_explanations(s, g)
    assert res.auc[0] == explanation_auc(s[0, 0], g[0, 0])
    assert res.f1[0] == explanation_f1(s[0, 0], g[0, 0])


def test_score_explanations_skips_empty_truth():
    scores = np.zeros((3, 2, 4))
    gt = np.zeros((3, 2, 4), dtype=int)
    gt[0, 1, 2] = 1
    gt[2] = 1  # all ones: AUC undefined, F1 still counted
    scores[0, 0, 2] = 0.9
    res = score_explanations(scores, gt)
    assert res.n_evaluated == 2 and res.n_skipped == 1
    assert res.n_evaluated + res.n_skipped == 3
    assert res.auc_mean == 1.0
    assert res.f1_mean == pytest.approx(0.5)


def test_report_omits_explanation_fields_when_absent():
    rep = MetricsReport(dataset="univariate", model="mean", rmse_raw=1.0, r2=0.0, seed=1)
    assert "expl_f1_mean" not in rep.to_dict()
    rep.expl_f1_mean, rep.expl_auc_mean = 0.9, 0.95
    assert rep.to_dict()["expl_f1_mean"] == 0.9
