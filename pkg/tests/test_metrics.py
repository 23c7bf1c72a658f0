from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from splatexpr.classifier import EMOTIONS, EmotionDistribution, predict
from splatexpr.losses import emotion_loss
from splatexpr.metrics import (FEATURE_DIM, FeatureStats, MetricsError, features, frechet_distance, id_similarity,
                               nps)
from splatexpr.rasterizer import render
from splatexpr.scene import init_scene
from splatexpr.toy import toy_mesh

from conftest import random_scene


def scipy_frechet(a: FeatureStats, b: FeatureStats) -> float:
    """Independent route: general matrix square root of the (non-symmetric) product."""
    root = scipy.linalg.sqrtm(a.cov @ b.cov).real
    d = a.mean - b.mean
    return float(d @ d + np.trace(a.cov + b.cov - 2 * root))


def random_stats(rng, d=5, n=40):
    return FeatureStats.from_features(rng.normal(size=(n, d)) @ rng.normal(size=(d, d)) + rng.normal(size=d))


def test_features_shape_and_constant_image():
    img = np.random.default_rng(0).uniform(0, 1, (32, 32, 3))
    f = features(img)
    assert f.shape == (FEATURE_DIM,) and abs(np.linalg.norm(f) - 1) < 1e-12 and abs(f.sum()) < 1e-12
    assert (features(np.full((32, 32, 3), 0.4)) == 0).all()
    with pytest.raises(MetricsError):
        features(np.full((16, 16, 3), np.nan))


def test_id_similarity_identity_and_negative():
    img = np.random.default_rng(1).uniform(0, 1, (24, 24, 3))
    assert id_similarity(img, img) == pytest.approx(1.0, abs=1e-12)
    assert id_similarity(img, 1 - img) == pytest.approx(-1.0, abs=1e-12)
    assert id_similarity(img, np.full_like(img, 0.5)) == 0.0


def test_id_similarity_noise_pairs_unrelated():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        assert abs(id_similarity(rng.uniform(0, 1, (32, 32, 3)), rng.uniform(0, 1, (32, 32, 3)))) < 0.5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.05, 1.0))
def test_id_similarity_brightness_invariant(seed, k):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0, 1, (16, 16, 3)), rng.uniform(0, 1, (16, 16, 3))
    assert abs(id_similarity(k * a, k * b) - id_similarity(a, b)) <= 1e-6


def test_frechet_identity_and_mean_shift():
    rng = np.random.default_rng(0)
    s = random_stats(rng)
    assert abs(frechet_distance(s, s)) <= 1e-6
    v = rng.normal(size=5)
    moved = FeatureStats(s.mean + v, s.cov, s.n)
    assert abs(frechet_distance(s, moved) - v @ v) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.0, 4.0), min_size=3, max_size=3), st.lists(st.floats(0.0, 4.0), min_size=3, max_size=3))
def test_frechet_diagonal_closed_form(a, b):
    mean = np.zeros(3)
    got = frechet_distance(FeatureStats(mean, np.diag(a), 10), FeatureStats(mean, np.diag(b), 10))
    expected = sum((math.sqrt(x) - math.sqrt(y)) ** 2 for x, y in zip(a, b))
    assert abs(got - expected) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_frechet_matches_scipy_and_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = random_stats(rng), random_stats(rng)
    d = frechet_distance(a, b)
    assert d >= 0
    assert abs(d - frechet_distance(b, a)) <= 1e-6 * max(1.0, d)
    assert abs(d - scipy_frechet(a, b)) <= 1e-6 * max(1.0, d)


def test_frechet_rank_deficient_covariance():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(4, 8))
    s = FeatureStats.from_features(f)
    assert np.linalg.matrix_rank(s.cov) < 8
    assert abs(frechet_distance(s, s)) <= 1e-6


def test_stats_validation():
    with pytest.raises(MetricsError):
        FeatureStats(np.zeros(2), np.eye(3), 5)
    with pytest.raises(MetricsError):
        FeatureStats(np.zeros(2), np.eye(2), 1)
    with pytest.raises(MetricsError):
        FeatureStats(np.array([0.0, np.inf]), np.eye(2), 5)
    with pytest.raises(MetricsError):
        FeatureStats(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]), 5)
    with pytest.raises(MetricsError):
        frechet_distance(FeatureStats(np.zeros(2), np.eye(2), 3), FeatureStats(np.zeros(3), np.eye(3), 3))


def test_unbiased_covariance():
    f = np.array([[0.0, 1.0], [2.0, 3.0], [4.0, 8.0]])
    s = FeatureStats.from_features(f)
    assert np.allclose(s.cov, np.cov(f, rowvar=False), atol=1e-15)


def test_nps_equals_emotion_loss(classifier):
    mesh = toy_mesh(16)
    for scene in (init_scene(mesh), random_scene(np.random.default_rng(0), 4, spread=0.3)):
        probs = predict(classifier, render(scene, mesh.frontal_camera.with_size(16)).pixels)
        value = nps(scene, classifier, mesh, 16)
        assert value == emotion_loss(probs, "neutral")[0]
        assert value >= 0


def test_nps_reference_values():
    assert emotion_loss(EmotionDistribution(np.full(7, 1 / 7), EMOTIONS), "neutral")[0] == pytest.approx(math.log(7))
    assert emotion_loss(EmotionDistribution(np.eye(7)[EMOTIONS.index("neutral")], EMOTIONS), "neutral")[0] == 0.0
