"""Conditioning-embedding algebra.

Embeddings are ``T x D`` token matrices.  Every operator here is an affine
combination of its embedding arguments, so the whole composition pipeline is
affine in the identity-conditioned base embedding.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError

N_TOKENS = 8
DIM = 32
ID_DIM = 64
TEXT_SALT = 0x5EED_000A
PROJECTION_SEED = 0x1D_0002
NEUTRAL_EXPRESSION = "neutral expression"
NEUTRAL_ACCESSORY = "no accessories"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def normalize_prompt(prompt: str) -> str:
    return " ".join(prompt.lower().split())


@dataclass(frozen=True, eq=False)
class ConditioningEmbedding:
    tokens: np.ndarray
    tag: str

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.float64)
        if tokens.ndim != 2:
            raise ShapeMismatchError(f"embedding must be a T x D matrix, got shape {tokens.shape}")
        if not np.isfinite(tokens).all():
            raise ValueError("embedding has non-finite entries")
        tokens.setflags(write=False)
        object.__setattr__(self, "tokens", tokens)

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape

    @property
    def stages(self) -> list[str]:
        return self.tag.split("|")

    def replace_tokens(self, tokens: np.ndarray) -> "ConditioningEmbedding":
        return ConditioningEmbedding(tokens, self.tag)


@dataclass(frozen=True, eq=False)
class IdentityEmbedding:
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).ravel()
        norm = np.linalg.norm(v)
        if v.shape != (ID_DIM,) or not abs(norm - 1.0) <= 1e-6:
            raise ValueError(f"identity embedding must be a unit {ID_DIM}-vector")
        object.__setattr__(self, "vector", v)

    @classmethod
    def from_bytes(cls, data: bytes) -> "IdentityEmbedding":
        """Toy identity features: a hash of the image bytes mapped to the unit sphere."""
        seed = int.from_bytes(hashlib.sha256(data).digest()[:8], "little")
        v = np.random.default_rng(seed).standard_normal(ID_DIM)
        return cls(v / np.linalg.norm(v))


@dataclass(frozen=True)
class BlendParams:
    b: float = 0.8
    gamma_expr: float = 0.5
    gamma_acc: float = 0.5
    eta_expr: float = 1.0
    eta_acc: float = 1.0

    def __post_init__(self):
        for name in ("b", "gamma_expr", "gamma_acc", "eta_expr", "eta_acc"):
            _check_unit(name, getattr(self, name))


def _check_unit(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")


def _check_shapes(a: ConditioningEmbedding, b: ConditioningEmbedding) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"embedding shapes differ: {a.shape} vs {b.shape}")


def _lerp(x: np.ndarray, y: np.ndarray, w: float) -> np.ndarray:
    """``(1 - w) * x + w * y`` with exact endpoints."""
    if w == 0.0:
        return x.copy()
    if w == 1.0:
        return y.copy()
    return (1.0 - w) * x + w * y


def encode_text(prompt: str, n_tokens: int = N_TOKENS, dim: int = DIM) -> ConditioningEmbedding:
    """Deterministic stand-in text encoder: one unit-norm pseudo-random row per token slot."""
    text = normalize_prompt(prompt)
    if not text:
        raise ValueError("prompt is empty")
    rows = np.empty((n_tokens, dim))
    for t in range(n_tokens):
        seed = fnv1a64(f"{text}\x00{t}".encode("utf-8")) ^ TEXT_SALT
        row = np.random.default_rng(seed).standard_normal(dim)
        rows[t] = row / np.linalg.norm(row)
    return ConditioningEmbedding(rows, text)


def identity_projection(dim: int = DIM) -> np.ndarray:
    rng = np.random.default_rng(PROJECTION_SEED)
    return rng.standard_normal((dim, ID_DIM)) / np.sqrt(ID_DIM)


def make_default_embedding(identity: IdentityEmbedding, base_prompt: str,
                           n_tokens: int = N_TOKENS, dim: int = DIM) -> ConditioningEmbedding:
    tokens = np.array(encode_text(base_prompt, n_tokens, dim).tokens)
    tokens[0] = identity_projection(dim) @ identity.vector
    return ConditioningEmbedding(tokens, "default")


def blend_view(c_default: ConditioningEmbedding, c_view: ConditioningEmbedding,
               b: float) -> ConditioningEmbedding:
    """``b * c_default + (1 - b) * c_view``."""
    _check_shapes(c_default, c_view)
    _check_unit("b", b)
    tokens = _lerp(c_view.tokens, c_default.tokens, b)
    return ConditioningEmbedding(tokens, f"{c_default.tag}|view:{c_view.tag}@{b:g}")


def make_attribute_embedding(c_default: ConditioningEmbedding, attribute_prompt: str, gamma: float,
                             kind: str = "expr") -> ConditioningEmbedding:
    """``(1 - gamma) * c_default + gamma * encode_text(attribute_prompt)``."""
    if kind not in ("expr", "acc"):
        raise ValueError(f"attribute kind must be 'expr' or 'acc', got {kind!r}")
    _check_unit("gamma", gamma)
    text = encode_text(attribute_prompt, *c_default.shape)
    tokens = _lerp(c_default.tokens, text.tokens, gamma)
    return ConditioningEmbedding(tokens, f"{c_default.tag}|{kind}:{text.tag}@{gamma:g}")


def intensity_blend(c_neutral: ConditioningEmbedding, c_target_expr: ConditioningEmbedding, eta: float,
                    tag: str | None = None) -> ConditioningEmbedding:
    """``(1 - eta) * c_neutral + eta * c_target_expr``."""
    _check_shapes(c_neutral, c_target_expr)
    _check_unit("eta", eta)
    tokens = _lerp(c_neutral.tokens, c_target_expr.tokens, eta)
    return ConditioningEmbedding(tokens, tag or f"lerp({c_neutral.tag},{c_target_expr.tag})@{eta:g}")


def _attribute_stage(base: ConditioningEmbedding, prompt: str, neutral_prompt: str, gamma: float,
                     eta: float, kind: str) -> ConditioningEmbedding:
    neutral = make_attribute_embedding(base, neutral_prompt, gamma, kind)
    target = make_attribute_embedding(base, prompt, gamma, kind)
    return intensity_blend(neutral, target, eta, tag=f"{base.tag}|{kind}:{normalize_prompt(prompt)}@{eta:g}")


def compose_final(c_default: ConditioningEmbedding, view_prompt: str, b: float,
                  expr_prompt: str | None = None, gamma_expr: float = 0.5, eta_expr: float = 1.0,
                  acc_prompt: str | None = None, gamma_acc: float = 0.5,
                  eta_acc: float = 1.0) -> ConditioningEmbedding:
    """Hierarchical composition: view, then expression, then accessory.

    The expression stage interpolates between the neutral-expression and the
    target-expression attribute embeddings, both built on the view-enriched
    embedding; the accessory stage repeats the pattern on top of that result.
    """
    for name, value in (("gamma_expr", gamma_expr), ("eta_expr", eta_expr),
                        ("gamma_acc", gamma_acc), ("eta_acc", eta_acc)):
        _check_unit(name, value)
    c = blend_view(c_default, encode_text(view_prompt, *c_default.shape), b)
    if expr_prompt is not None:
        c = _attribute_stage(c, expr_prompt, NEUTRAL_EXPRESSION, gamma_expr, eta_expr, "expr")
    if acc_prompt is not None:
        c = _attribute_stage(c, acc_prompt, NEUTRAL_ACCESSORY, gamma_acc, eta_acc, "acc")
    return c


def row_cosines(a: ConditioningEmbedding, b: ConditioningEmbedding) -> np.ndarray:
    _check_shapes(a, b)
    num = (a.tokens * b.tokens).sum(axis=1)
    den = np.linalg.norm(a.tokens, axis=1) * np.linalg.norm(b.tokens, axis=1)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def inspect(prompts: list[str]) -> dict:
    """Tags, norms and pairwise row cosines for the ``embed-inspect`` command."""
    embs = [encode_text(p) for p in prompts]
    pairs = []
    for i in range(len(embs)):
        for j in range(i + 1, len(embs)):
            cos = row_cosines(embs[i], embs[j])
            pairs.append({"a": embs[i].tag, "b": embs[j].tag, "row_cosines": [float(c) for c in cos],
                          "max_abs_cosine": float(np.abs(cos).max())})
    return {
        "embeddings": [{"tag": e.tag, "shape": list(e.shape), "frobenius_norm": float(np.linalg.norm(e.tokens)),
                        "row_norms": [float(x) for x in np.linalg.norm(e.tokens, axis=1)]} for e in embs],
        "pairs": pairs,
    }
