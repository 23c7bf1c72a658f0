from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatexpr import embedding as emb
from splatexpr.embedding import (NEUTRAL_ACCESSORY, NEUTRAL_EXPRESSION, ConditioningEmbedding,
                                 IdentityEmbedding, blend_view, compose_final, encode_text, intensity_blend,
                                 make_attribute_embedding, make_default_embedding, row_cosines)
from splatexpr.errors import ShapeMismatchError

VOCAB = ["happy", "sad", "angry", "surprise", "fear", "disgust", "neutral", "neutral expression",
         "no accessories", "glasses", "hat", "front view", "side view", "back view", "a photo of a face"]


def identity(seed: int) -> IdentityEmbedding:
    return IdentityEmbedding.from_bytes(f"image-{seed}".encode())


def test_encode_deterministic_and_normalized():
    assert np.array_equal(encode_text("happy").tokens, encode_text("happy").tokens)
    assert np.array_equal(encode_text("  Happy ").tokens, encode_text("happy").tokens)
    assert encode_text("happy").shape == (8, 32)
    with pytest.raises(ValueError):
        encode_text("   ")


def test_distinct_prompts_nearly_orthogonal_rows():
    assert (np.abs(row_cosines(encode_text("happy"), encode_text("sad"))) < 0.5).all()
    for i, a in enumerate(VOCAB):
        for b in VOCAB[i + 1:]:
            assert np.abs(row_cosines(encode_text(a), encode_text(b))).max() < 0.5, (a, b)


def test_identity_unit_norm():
    for s in range(5):
        assert abs(np.linalg.norm(identity(s).vector) - 1.0) < 1e-6


def test_default_embedding_row_zero():
    a = make_default_embedding(identity(1), "a photo of a face")
    b = make_default_embedding(identity(2), "a photo of a face")
    c = make_default_embedding(identity(1), "portrait")
    assert not np.array_equal(a.tokens[0], b.tokens[0])
    assert np.array_equal(a.tokens[1:], b.tokens[1:])
    assert np.array_equal(a.tokens[0], c.tokens[0])
    assert np.array_equal(a.tokens[0], emb.identity_projection() @ identity(1).vector)
    assert np.array_equal(a.tokens, make_default_embedding(identity(1), "a photo of a face").tokens)


def test_blend_view_endpoints_and_arithmetic():
    d = make_default_embedding(identity(0), "a photo of a face")
    v = encode_text("side view")
    assert np.array_equal(blend_view(d, v, 1.0).tokens, d.tokens)
    assert np.array_equal(blend_view(d, v, 0.0).tokens, v.tokens)
    e1 = ConditioningEmbedding(np.array([[1.0, 0.0, 0.0]]), "a")
    e2 = ConditioningEmbedding(np.array([[0.0, 1.0, 0.0]]), "b")
    assert np.allclose(blend_view(e1, e2, 0.7).tokens, [[0.7, 0.3, 0.0]], atol=1e-15)
    with pytest.raises(ShapeMismatchError):
        blend_view(e1, ConditioningEmbedding(np.zeros((2, 3)), "c"), 0.5)
    with pytest.raises(ValueError):
        blend_view(d, v, 1.5)


def test_attribute_embedding_endpoints():
    d = make_default_embedding(identity(0), "a photo of a face")
    assert np.array_equal(make_attribute_embedding(d, "happy", 0.0).tokens, d.tokens)
    assert np.array_equal(make_attribute_embedding(d, "happy", 1.0).tokens, encode_text("happy").tokens)
    tag = make_attribute_embedding(d, "glasses", 0.5, "acc").tag
    assert "acc:glasses" in tag
    mid = make_attribute_embedding(d, "happy", 0.5)
    assert np.allclose(mid.tokens[:2], 0.5 * (d.tokens[:2] + encode_text("happy").tokens[:2]), atol=1e-15)


def test_intensity_blend_endpoints_and_midpoint():
    a, b = encode_text("neutral expression"), encode_text("happy")
    assert np.array_equal(intensity_blend(a, b, 0.0).tokens, a.tokens)
    assert np.array_equal(intensity_blend(a, b, 1.0).tokens, b.tokens)
    mid = np.empty_like(a.tokens)
    for i in range(a.tokens.shape[0]):
        for j in range(a.tokens.shape[1]):
            mid[i, j] = (a.tokens[i, j] + b.tokens[i, j]) / 2
    assert np.allclose(intensity_blend(a, b, 0.5).tokens, mid, atol=1e-15)


def test_compose_skips_missing_stages():
    d = make_default_embedding(identity(3), "a photo of a face")
    plain = compose_final(d, "front view", 0.8)
    assert np.array_equal(plain.tokens, blend_view(d, encode_text("front view"), 0.8).tokens)
    assert "expr" not in plain.tag and "acc" not in plain.tag


def test_compose_zero_intensity_is_neutral_only():
    d = make_default_embedding(identity(3), "a photo of a face")
    out = compose_final(d, "front view", 0.8, "happy", 0.6, 0.0)
    c_d = blend_view(d, encode_text("front view"), 0.8)
    assert np.array_equal(out.tokens, make_attribute_embedding(c_d, NEUTRAL_EXPRESSION, 0.6).tokens)
    # all intensities zero, b = 1: non-identity rows equal the default blended toward the neutral prompts
    full = compose_final(d, "front view", 1.0, "happy", 0.5, 0.0, "glasses", 0.4, 0.0)
    replay = make_attribute_embedding(make_attribute_embedding(d, NEUTRAL_EXPRESSION, 0.5), NEUTRAL_ACCESSORY, 0.4,
                                      "acc")
    assert np.array_equal(full.tokens[1:], replay.tokens[1:])


def test_compose_hand_set_matrices(monkeypatch):
    # replace the text encoder by fixed 2x2 matrices and replay the three affine stages by hand
    table = {"view": [[1.0, 2.0], [3.0, 4.0]], NEUTRAL_EXPRESSION: [[0.0, 1.0], [1.0, 0.0]],
             "happy": [[2.0, 0.0], [0.0, 2.0]], NEUTRAL_ACCESSORY: [[1.0, 1.0], [1.0, 1.0]],
             "hat": [[-1.0, 0.0], [0.0, -1.0]]}
    monkeypatch.setattr(emb, "encode_text",
                        lambda p, *shape: ConditioningEmbedding(np.array(table[emb.normalize_prompt(p)]), p))
    d = ConditioningEmbedding(np.array([[0.5, -0.5], [2.0, 0.0]]), "default")
    b, ge, ee, ga, ea = 0.8, 0.25, 0.6, 0.5, 0.3
    out = emb.compose_final(d, "view", b, "happy", ge, ee, "hat", ga, ea)
    D, V = np.array([[0.5, -0.5], [2.0, 0.0]]), np.array(table["view"])
    cd = [[b * D[i][j] + (1 - b) * V[i][j] for j in range(2)] for i in range(2)]
    ne = [[(1 - ge) * cd[i][j] + ge * table[NEUTRAL_EXPRESSION][i][j] for j in range(2)] for i in range(2)]
    te = [[(1 - ge) * cd[i][j] + ge * table["happy"][i][j] for j in range(2)] for i in range(2)]
    ce = [[(1 - ee) * ne[i][j] + ee * te[i][j] for j in range(2)] for i in range(2)]
    na = [[(1 - ga) * ce[i][j] + ga * table[NEUTRAL_ACCESSORY][i][j] for j in range(2)] for i in range(2)]
    ta = [[(1 - ga) * ce[i][j] + ga * table["hat"][i][j] for j in range(2)] for i in range(2)]
    cf = [[(1 - ea) * na[i][j] + ea * ta[i][j] for j in range(2)] for i in range(2)]
    assert np.allclose(out.tokens, cf, atol=1e-12)


unit = st.floats(0.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), unit, unit, unit, unit)
def test_operators_affine_in_embedding(seed, alpha, b, gamma, eta):
    rng = np.random.default_rng(seed)
    x = ConditioningEmbedding(rng.normal(size=(8, 32)), "x")
    y = ConditioningEmbedding(rng.normal(size=(8, 32)), "y")
    z = ConditioningEmbedding(rng.normal(size=(8, 32)), "z")
    mix = ConditioningEmbedding(alpha * x.tokens + (1 - alpha) * y.tokens, "mix")
    ops = [lambda e: blend_view(e, z, b), lambda e: blend_view(z, e, b),
           lambda e: make_attribute_embedding(e, "happy", gamma), lambda e: intensity_blend(e, z, eta),
           lambda e: compose_final(e, "side view", b, "sad", gamma, eta, "hat", gamma, eta)]
    for op in ops:
        lhs = op(mix).tokens
        rhs = alpha * op(x).tokens + (1 - alpha) * op(y).tokens
        assert lhs.shape == (8, 32)
        assert np.abs(lhs - rhs).max() <= 1e-9


def test_inspect_report():
    report = emb.inspect(["happy", "sad"])
    assert len(report["embeddings"]) == 2
    assert report["pairs"][0]["max_abs_cosine"] < 0.5
