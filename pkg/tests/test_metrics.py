import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from viewgen.metrics import (FeatureStats, bleu4, frechet_distance, image_features, paired_compare,
                             token_accuracy)


# -- BLEU -------------------------------------------------------------------------------

def test_bleu_identity():
    rep = bleu4("large disc upper left ; small bar", "large disc upper left ; small bar")
    assert rep.bleu4 == 1.0 and rep.brevity_penalty == 1.0


def test_bleu_short_candidate():
    rep = bleu4("a b c d", "a b c d e")
    assert rep.precisions == (1.0, 1.0, 1.0, 1.0)
    assert rep.brevity_penalty == pytest.approx(math.exp(1 - 5 / 4), abs=1e-15)
    assert abs(rep.bleu4 - math.exp(-0.25)) < 1e-8


def test_bleu_without_four_gram_overlap_is_zero():
    rep = bleu4("a b c x d", "a b c d e")
    assert rep.precisions[3] == 0.0 and rep.bleu4 == 0.0
    assert bleu4("a b c x d", "a b c d e", smooth=True).bleu4 > 0.0


def test_bleu_clips_repeated_words():
    assert bleu4("the the the the", "the cat").precisions[0] == 0.25


def test_bleu_empty_candidate_flagged():
    rep = bleu4("", "a b c d")
    assert rep.empty and rep.bleu4 == 0.0


def test_bleu_hand_count():
    # candidate 6 words, reference 6 words, one substitution in the middle
    rep = bleu4("a b c x e f", "a b c d e f")
    assert rep.precisions == pytest.approx((5 / 6, 3 / 5, 1 / 4, 0.0))
    smooth = bleu4("a b c x e f", "a b c d e f", smooth=True)
    expected = (5 / 6 * 4 / 6 * 2 / 5 * 1 / 4) ** 0.25
    assert abs(smooth.bleu4 - expected) < 1e-12


def test_bleu_order_sensitive():
    assert bleu4("d c b a", "a b c d").bleu4 < bleu4("a b c d", "a b c d").bleu4


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from("abcde"), min_size=1, max_size=12),
       st.lists(st.sampled_from("abcde"), min_size=1, max_size=12))
def test_bleu_in_unit_interval(cand, ref):
    for smooth in (False, True):
        rep = bleu4(cand, ref, smooth=smooth)
        assert 0.0 <= rep.bleu4 <= 1.0


# -- Frechet ---------------------------------------------------------------------------------

def stats(mean, cov, count=10):
    return FeatureStats(np.asarray(mean, float), np.asarray(cov, float), count)


def test_frechet_identical_is_zero():
    feats = np.random.default_rng(0).normal(size=(50, 4))
    a = FeatureStats.from_features(feats)
    assert abs(frechet_distance(a, a)) < 1e-8


def test_frechet_mean_shift_only():
    assert frechet_distance(stats([0, 0], np.eye(2)), stats([2, 0], np.eye(2))) == pytest.approx(4.0, abs=1e-8)


def test_frechet_diagonal_case():
    a, b = stats([0, 0], np.diag([1.0, 4.0])), stats([0, 0], np.diag([9.0, 16.0]))
    assert abs(frechet_distance(a, b) - 8.0) < 1e-8


def test_frechet_matches_scipy_sqrtm():
    from scipy.linalg import sqrtm

    rng = np.random.default_rng(1)
    a = FeatureStats.from_features(rng.normal(size=(40, 5)))
    b = FeatureStats.from_features(rng.normal(size=(40, 5)) @ rng.normal(size=(5, 5)) + 1.0)
    cross = np.real(sqrtm(a.cov @ b.cov))
    ref = np.sum((a.mean - b.mean) ** 2) + np.trace(a.cov + b.cov - 2 * cross)
    assert abs(frechet_distance(a, b) - ref) < 1e-8


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_frechet_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = FeatureStats.from_features(rng.normal(size=(12, 3)))
    b = FeatureStats.from_features(rng.normal(size=(9, 3)) * 2.0)
    assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-8
    assert frechet_distance(a, b) >= 0.0


def test_frechet_errors():
    with pytest.raises(ValueError):
        frechet_distance(stats([0, 0], np.eye(2)), stats([0], np.eye(1)))
    with pytest.raises(ValueError):
        frechet_distance(stats([0, 0], np.diag([1.0, -1.0])), stats([0, 0], np.eye(2)))
    with pytest.raises(ValueError):
        stats([0, 0], [[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ValueError):
        stats([0, 0], np.eye(2), count=1)


def test_unbiased_covariance():
    feats = np.array([[0.0], [2.0]])
    assert FeatureStats.from_features(feats).cov[0, 0] == 2.0


def test_image_features_pool():
    imgs = np.arange(2 * 16 * 16, dtype=float).reshape(2, 16, 16)
    feats = image_features(imgs)
    assert feats.shape == (2, 64)
    assert feats[0, 0] == imgs[0, :2, :2].mean()


# -- token accuracy and paired comparison -----------------------------------------------------

def test_token_accuracy_cases():
    g = np.array([[1, 2], [3, 4]])
    assert token_accuracy(g, g) == 1.0
    assert token_accuracy(g, g + 10) == 0.0
    assert token_accuracy(g, np.array([[1, 2], [0, 0]])) == 0.5
    with pytest.raises(ValueError):
        token_accuracy(g, np.zeros((3, 3)))


def test_paired_identical():
    x = np.random.default_rng(0).random(30)
    res = paired_compare(x, x)
    assert (res.mean_difference, res.ci_low, res.ci_high) == (0.0, 0.0, 0.0)


def test_paired_constant_shift():
    x = np.random.default_rng(0).random(30)
    res = paired_compare(x + 0.5, x)
    assert res.mean_difference == pytest.approx(0.5, abs=1e-12)
    assert res.ci_low == pytest.approx(0.5, abs=1e-12) and res.ci_high == pytest.approx(0.5, abs=1e-12)


def test_paired_refuses_small_samples():
    with pytest.raises(ValueError):
        paired_compare(np.ones(9), np.ones(9))
    with pytest.raises(ValueError):
        paired_compare(np.ones(10), np.ones(11))


def test_paired_seeded_reproducible():
    rng = np.random.default_rng(1)
    a, b = rng.random(25), rng.random(25)
    assert paired_compare(a, b, seed=3) == paired_compare(a, b, seed=3)


def test_bootstrap_coverage():
    rng = np.random.default_rng(2)
    hits = 0
    for trial in range(100):
        diff = rng.normal(0.3, 1.0, size=60)
        res = paired_compare(diff, np.zeros(60), seed=trial)
        hits += res.ci_low <= 0.3 <= res.ci_high
    assert hits >= 93
