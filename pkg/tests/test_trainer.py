from __future__ import annotations

import json

import numpy as np
import pytest

from splatexpr.classifier import predict
from splatexpr.errors import CheckpointError, ConfigError, NumericError
from splatexpr.metrics import nps
from splatexpr.rasterizer import render
from splatexpr.scene import load_ply
from splatexpr.toy import glyph_image, toy_components, toy_config
from splatexpr.trainer import (AdamHyper, AdamState, Checkpoint, TrainConfig, TrainingAborted, adam_step, fit,
                               frontal_camera, group_lr_scale, resume, run_hash, write_outputs)

IMAGE = b"toy input photo"


@pytest.fixture(scope="module")
def components(classifier):
    return toy_components(IMAGE, toy_config(), classifier)


def scripted_adam(params, grads_seq, lr, b1, b2, eps):
    """Textbook Adam written element by element."""
    p = list(params)
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t, g in enumerate(grads_seq, start=1):
        for i in range(len(p)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            p[i] -= lr * mh / (vh ** 0.5 + eps)
    return np.array(p)


def test_adam_matches_scripted_reference():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=6)
    grads = [rng.normal(size=6) for _ in range(5)]
    hyper = AdamHyper(0.01, 0.9, 0.999, 1e-8)
    x, state = x0, AdamState.zeros(6)
    for g in grads:
        x, state = adam_step(x, g, state, hyper)
    assert np.allclose(x, scripted_adam(x0, grads, 0.01, 0.9, 0.999, 1e-8), atol=1e-14, rtol=0)
    # first step moves every coordinate by lr against the gradient sign
    one, _ = adam_step(x0, grads[0], AdamState.zeros(6), hyper)
    assert np.allclose(one - x0, -0.01 * np.sign(grads[0]), atol=1e-8)


def test_adam_zero_gradient_and_determinism():
    rng = np.random.default_rng(1)
    x = rng.normal(size=4)
    state = AdamState(3, rng.normal(size=4), rng.uniform(1, 2, size=4))
    hyper = AdamHyper()
    y, s2 = adam_step(x, np.zeros(4), AdamState(0, np.zeros(4), np.zeros(4)), hyper)
    assert np.array_equal(x, y)
    _, decayed = adam_step(x, np.zeros(4), state, hyper)
    assert np.allclose(decayed.m, 0.9 * state.m) and np.allclose(decayed.v, 0.999 * state.v)
    g = rng.normal(size=4)
    a, sa = adam_step(x, g, state, hyper)
    b, sb = adam_step(x, g, state, hyper)
    assert np.array_equal(a, b) and np.array_equal(sa.m, sb.m) and np.array_equal(sa.v, sb.v)
    with pytest.raises(ValueError):
        adam_step(x, np.zeros(3), state, hyper)


def test_group_lr_scale_layout():
    scale = group_lr_scale(TrainConfig(), 2)
    assert scale.shape == (28,)
    assert list(scale[:6]) == [1.0] * 6 and list(scale[6:14]) == [0.1] * 8
    assert list(scale[14:20]) == [0.5] * 6 and list(scale[20:22]) == [0.5] * 2 and list(scale[22:]) == [1.0] * 6


@pytest.mark.parametrize("bad", [dict(iterations=0), dict(emotion_every=0), dict(b=1.5), dict(lambda_pos=-1.0),
                                 dict(target_expression="bored"), dict(t_max=40)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_trajectory_hash_ignores_budget():
    a = TrainConfig()
    assert a.trajectory_hash() == a.replace(iterations=7, checkpoint_every=3, threads=4).trajectory_hash()
    assert a.trajectory_hash() != a.replace(lr=1e-3).trajectory_hash()
    assert run_hash(a, b"x") != run_hash(a, b"y")


def test_single_iteration(tmp_path, components):
    cfg = toy_config(iterations=1)
    result = fit(IMAGE, cfg, tmp_path, components)
    assert len(result.log) == 1 and result.log[0]["iter"] == 1
    rec = result.log[0]
    assert set(rec) >= {"iter", "losses", "grad_norms", "camera_label", "conditioning_tag", "wall_ms"}
    ckpt = Checkpoint.load(result.checkpoints[-1])
    assert ckpt.iteration == 1 and ckpt.config_hash == run_hash(cfg, IMAGE)
    assert load_ply(ckpt.scene_ply).equals(result.scene)
    write_outputs(result, tmp_path, "iterations = 1\n")
    assert (tmp_path / "final.ply").exists()
    assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 1


def test_determinism_byte_identical(components):
    cfg = toy_config(iterations=20)
    a, b = fit(IMAGE, cfg, None, components), fit(IMAGE, cfg, None, components)
    assert a.log_lines() == b.log_lines()
    assert a.scene.equals(b.scene)
    c = fit(IMAGE, cfg.replace(seed=1), None, components)
    assert c.log_lines() != a.log_lines()


def test_threads_do_not_change_trajectory(components):
    cfg = toy_config(iterations=10)
    assert fit(IMAGE, cfg, None, components).log_lines() == \
        fit(IMAGE, cfg.replace(threads=3), None, components).log_lines()


def test_resume_bit_identical(tmp_path, components):
    cfg = toy_config(iterations=100, checkpoint_every=50)
    full = fit(IMAGE, cfg, tmp_path / "full", components)
    mid = tmp_path / "full" / "checkpoints" / "iter_000050.json"
    assert mid.exists()
    cont = resume(mid, IMAGE, cfg, tmp_path / "cont", components)
    assert [r["iter"] for r in cont.log] == list(range(51, 101))
    assert cont.log_lines() == full.log_lines()[50:]
    assert cont.scene.equals(full.scene)
    with pytest.raises(CheckpointError):
        resume(mid, IMAGE, cfg.replace(lr=0.01), None, components)
    with pytest.raises(CheckpointError):
        resume(mid, b"another photo", cfg, None, components)


def test_corrupt_checkpoint(tmp_path, components):
    result = fit(IMAGE, toy_config(iterations=2), tmp_path, components)
    path = result.checkpoints[-1]
    path.write_text(path.read_text()[:-10])
    with pytest.raises(CheckpointError):
        Checkpoint.load(path)
    meta_ok = tmp_path / "ok"
    good = fit(IMAGE, toy_config(iterations=2), meta_ok, components).checkpoints[-1]
    good.with_suffix(".ply").write_bytes(b"ply\nnot really")
    with pytest.raises(CheckpointError):
        Checkpoint.load(good)
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "missing.json")


def test_ablation_tags(components):
    on = fit(IMAGE, toy_config(iterations=5, target_expression="happy", acc_prompt="glasses"), None, components)
    assert all("expr:happy" in r["conditioning_tag"] and "acc:glasses" in r["conditioning_tag"] for r in on.log)
    off = fit(IMAGE, toy_config(iterations=5, target_expression="happy", acc_prompt="glasses",
                                disable_semantic_embedding=True), None, components)
    assert all("expr:" not in r["conditioning_tag"] and "acc:" not in r["conditioning_tag"] for r in off.log)
    no_emotion = fit(IMAGE, toy_config(iterations=5, disable_emotion_loss=True), None, components)
    assert all("emotion" not in r["losses"] and "emotion" not in r["grad_norms"] for r in no_emotion.log)
    every = fit(IMAGE, toy_config(iterations=6, emotion_every=3), None, components)
    assert [("emotion" in r["losses"]) for r in every.log] == [False, False, True, False, False, True]


def test_parameter_health(tmp_path, components):
    cfg = toy_config(iterations=60, checkpoint_every=20)
    result = fit(IMAGE, cfg, tmp_path, components)
    for path in result.checkpoints:
        scene = load_ply(Checkpoint.load(path).scene_ply)
        assert np.isfinite(scene.flatten()).all()
        assert np.allclose(np.linalg.norm(scene.rotations, axis=1), 1.0, atol=1e-6)
    assert all(np.isfinite(r["losses"]["total"]) for r in result.log)


def test_nan_aborts_with_checkpoint(tmp_path, components):
    with pytest.raises(TrainingAborted) as info:
        fit(IMAGE, toy_config(iterations=5, lr=1e300, lr_position=1e10), tmp_path, components)
    assert isinstance(info.value, NumericError)
    assert info.value.checkpoint is not None and info.value.checkpoint.exists()
    assert info.value.term is not None


def test_toward_target_mean(tmp_path, components):
    cfg = toy_config(iterations=300, target_expression="happy", checkpoint_every=50)
    fit(IMAGE, cfg, tmp_path, components)
    mu = glyph_image("happy", 16)
    cam = frontal_camera(components.mesh, cfg)
    dists = []
    for it in range(50, 301, 50):
        path = tmp_path / "checkpoints" / f"iter_{it:06d}.json"
        dists.append(np.linalg.norm(render(load_ply(Checkpoint.load(path).scene_ply), cam).pixels - mu))
    init = np.linalg.norm(render(fit(IMAGE, cfg.replace(iterations=1), None, components).scene, cam).pixels - mu)
    best = np.minimum.accumulate([init] + dists)
    assert (np.diff(best) <= 0).all()
    assert best[-1] < init


def test_happy_toy_run(components):
    cfg = toy_config(target_expression="happy")
    clf = components.classifier
    on = fit(IMAGE, cfg, None, components)
    off = fit(IMAGE, cfg.replace(disable_emotion_loss=True), None, components)
    cam = frontal_camera(components.mesh, cfg)
    p_on = predict(clf, render(on.scene, cam).pixels)["happy"]
    p_off = predict(clf, render(off.scene, cam).pixels)["happy"]
    assert p_on >= 0.9 and p_on >= p_off
    assert json.dumps(on.log[-1], sort_keys=True)
    assert nps(on.scene, clf, components.mesh, 16) >= 0
