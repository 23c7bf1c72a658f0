from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatexpr.classifier import EMOTIONS, EmotionDistribution
from splatexpr.errors import MeshError, NumericError
from splatexpr.losses import (LossTerm, LossWeights, emotion_loss, laplacian_loss, pos_loss, total_loss)
from splatexpr.rasterizer import SplatGradients
from splatexpr.scene import GaussianScene, build_mesh, init_scene, make_template

from conftest import single_splat


def shifted(scene: GaussianScene, offset) -> GaussianScene:
    out = scene.copy()
    out.positions = out.positions + np.asarray(offset, dtype=float)
    return out


def moved_mesh(mesh, offset):
    return build_mesh(mesh.vertices + np.asarray(offset), mesh.faces)


def brute_force_laplacian(scene: GaussianScene, mesh) -> float:
    """Direct double loop over splats and the adjacency lists of their bound vertices."""
    n = len(scene)
    total = 0.0
    for i in range(n):
        nbr_vertices = mesh.adjacency[scene.binding[i]]
        members = [j for j in range(n) if scene.binding[j] in nbr_vertices]
        if not members:
            continue
        d = scene.positions[i] - sum(scene.positions[j] for j in members) / len(members)
        ref = mesh.vertices[scene.binding[i]] - sum(mesh.vertices[scene.binding[j]] for j in members) / len(members)
        total += float(((d - ref) ** 2).sum())
    return total / n


def test_zero_at_initialization(ico1):
    scene = init_scene(ico1)
    pos, lap = pos_loss(scene, ico1), laplacian_loss(scene, ico1)
    assert pos.value == 0.0 and lap.value == 0.0
    assert pos.gradients.norm() == 0.0 and lap.gradients.norm() == 0.0


def test_pos_single_displaced_splat():
    mesh = build_mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    s = single_splat(position=(0.3, 0.0, 0.0))
    term = pos_loss(s, mesh)
    assert term.value == pytest.approx(0.09, abs=1e-12)
    assert np.allclose(term.gradients.positions[0], [0.6, 0.0, 0.0], atol=1e-12)
    assert term.gradients.colors.sum() == 0.0


def test_pos_translation_invariant(ico1):
    rng = np.random.default_rng(0)
    scene = init_scene(ico1)
    scene.positions += rng.normal(scale=0.05, size=scene.positions.shape)
    offset = (0.25, -0.5, 0.125)
    a = pos_loss(scene, ico1).value
    b = pos_loss(shifted(scene, offset), moved_mesh(ico1, offset)).value
    assert abs(a - b) <= 1e-9


def test_pos_rejects_bad_binding(ico1):
    s = single_splat()
    s.binding[0] = ico1.n_vertices
    with pytest.raises(MeshError):
        pos_loss(s, ico1)


def test_laplacian_single_displaced_splat_matches_brute_force():
    mesh = make_template("icosphere", 0)
    scene = init_scene(mesh)
    scene.positions[3] += [0.1, -0.2, 0.05]
    term = laplacian_loss(scene, mesh)
    assert term.value > 0
    assert abs(term.value - brute_force_laplacian(scene, mesh)) <= 1e-12
    # hand count: splat 3 and its five neighbors are the only ones with a nonzero deviation
    d = np.array([0.1, -0.2, 0.05])
    expected = (d @ d + 5 * (d / 5) @ (d / 5)) / 12
    assert abs(term.value - expected) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.tuples(*[st.floats(-5, 5)] * 3))
def test_laplacian_translation_invariant(seed, offset):
    mesh = make_template("icosphere", 1)
    rng = np.random.default_rng(seed)
    scene = init_scene(mesh)
    scene.positions += rng.normal(scale=0.05, size=scene.positions.shape)
    base = laplacian_loss(scene, mesh).value
    assert abs(laplacian_loss(shifted(scene, offset), mesh).value - base) <= 1e-9
    assert abs(laplacian_loss(shifted(init_scene(mesh), offset), mesh).value) <= 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 3))
def test_laplacian_random_scenes_match_brute_force_and_gradient(seed, per_vertex):
    mesh = make_template("icosphere", 0)
    rng = np.random.default_rng(seed)
    scene = init_scene(mesh, per_vertex, rng_seed=seed)
    scene.positions += rng.normal(scale=0.1, size=scene.positions.shape)
    term = laplacian_loss(scene, mesh)
    assert abs(term.value - brute_force_laplacian(scene, mesh)) <= 1e-12
    h = 1e-6
    for _ in range(5):
        i, k = rng.integers(len(scene)), rng.integers(3)
        up, dn = scene.copy(), scene.copy()
        up.positions[i, k] += h
        dn.positions[i, k] -= h
        fd = (laplacian_loss(up, mesh).value - laplacian_loss(dn, mesh).value) / (2 * h)
        assert abs(term.gradients.positions[i, k] - fd) <= 1e-6


def test_laplacian_skips_splat_without_neighbors():
    mesh = make_template("icosphere", 0)
    s = single_splat(position=tuple(mesh.vertices[0] + 0.1))
    term = laplacian_loss(s, mesh)
    assert term.skipped == 1 and term.value == 0.0


def test_jointly_zero_only_at_template(ico1):
    scene = init_scene(ico1)
    moved = shifted(scene, (0.1, 0.0, 0.0))
    assert laplacian_loss(moved, ico1).value <= 1e-18
    assert pos_loss(moved, ico1).value > 0


def uniform(k=7):
    return EmotionDistribution(np.full(k, 1.0 / k), EMOTIONS[:k])


def test_emotion_loss_uniform_is_log_k():
    value, grad = emotion_loss(uniform(), "happy")
    assert abs(value - math.log(7)) <= 1e-9
    idx = EMOTIONS.index("happy")
    assert grad[idx] == pytest.approx(-7.0) and np.count_nonzero(grad) == 1


def test_emotion_loss_perfect_and_clamped():
    onehot = np.eye(7)[2]
    assert emotion_loss(EmotionDistribution(onehot, EMOTIONS), 2)[0] == 0.0
    value, grad = emotion_loss(EmotionDistribution(onehot, EMOTIONS), 3)
    assert value == pytest.approx(-math.log(1e-8)) and value == pytest.approx(18.420680743952367)
    assert np.isfinite(grad).all()
    with pytest.raises(ValueError):
        emotion_loss(uniform(), 7)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6))
def test_emotion_loss_decreasing_in_target_probability(p, q):
    def dist(x):
        rest = np.full(6, (1 - x) / 6)
        return EmotionDistribution(np.concatenate([[x], rest]), EMOTIONS)

    lo, hi = sorted((p, q))
    assert emotion_loss(dist(hi), 0)[0] <= emotion_loss(dist(lo), 0)[0]
    assert emotion_loss(dist(p), 0)[0] >= 0


def random_term(rng, n, scale=1.0):
    return LossTerm(float(rng.uniform(0, 2)), SplatGradients.from_flat(rng.normal(size=14 * n) * scale, n))


def test_total_reconstruction_and_linearity():
    rng = np.random.default_rng(0)
    n = 6
    ism = SplatGradients.from_flat(rng.normal(size=14 * n), n)
    diag = {"residual_norm": 1.5, "weighted_residual_norm": 0.75}
    pos, lap, emo = random_term(rng, n), random_term(rng, n), random_term(rng, n)
    w = LossWeights(0.1, 0.2, 0.05)
    rep = total_loss(diag, ism, pos, lap, emo, w)
    recon = 0.75 + 0.1 * pos.value + 0.2 * lap.value + 0.05 * emo.value
    assert abs(rep.total - recon) <= 1e-9
    manual = ism.flatten() + 0.1 * pos.gradients.flatten() + 0.2 * lap.gradients.flatten() \
        + 0.05 * emo.gradients.flatten()
    assert np.abs(rep.gradients.flatten() - manual).max() <= 1e-9
    doubled = total_loss(diag, ism, pos, lap, emo, LossWeights(0.1, 0.2, 0.1))
    contrib = rep.gradients.flatten() - total_loss(diag, ism, pos, lap, None, w).gradients.flatten()
    contrib2 = doubled.gradients.flatten() - total_loss(diag, ism, pos, lap, None, w).gradients.flatten()
    assert np.abs(contrib2 - 2 * contrib).max() <= 1e-12
    zero = total_loss(diag, ism, pos, lap, emo, LossWeights(0.0, 0.0, 0.0))
    assert np.array_equal(zero.gradients.flatten(), ism.flatten())
    assert set(rep.to_json()) == {"ism_residual_norm", "pos", "lap", "total", "emotion"}
    assert "emotion" not in total_loss(diag, ism, pos, lap, None, w).to_json()


@pytest.mark.parametrize("bad", ["pos", "lap", "emotion", "ism"])
def test_nonfinite_term_is_named(bad):
    rng = np.random.default_rng(1)
    n = 3
    ism = SplatGradients.from_flat(rng.normal(size=14 * n), n)
    terms = {k: random_term(rng, n) for k in ("pos", "lap", "emotion")}
    diag = {"residual_norm": 1.0}
    if bad == "ism":
        diag = {"residual_norm": float("nan")}
    else:
        terms[bad].value = float("nan")
    with pytest.raises(NumericError) as info:
        total_loss(diag, ism, terms["pos"], terms["lap"], terms["emotion"], LossWeights())
    assert info.value.term == bad and bad in str(info.value)


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_pos=-1.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_emotion=float("inf"))
