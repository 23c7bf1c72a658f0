"""Mesh-adherence regularizers, expression cross-entropy and the weighted total."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .classifier import EmotionDistribution
from .errors import NumericError
from .rasterizer import SplatGradients
from .scene import GaussianScene, TemplateMesh

LOG_CLAMP = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda_pos: float = 0.1
    lambda_lap: float = 0.1
    lambda_emotion: float = 0.05

    def __post_init__(self):
        for name in ("lambda_pos", "lambda_lap", "lambda_emotion"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")


@dataclass
class LossTerm:
    value: float
    gradients: SplatGradients
    skipped: int = 0


def _positions_only(scene: GaussianScene, d_pos: np.ndarray) -> SplatGradients:
    g = SplatGradients.zeros_like(scene)
    g.positions = d_pos
    return g


def pos_loss(scene: GaussianScene, mesh: TemplateMesh) -> LossTerm:
    """Mean squared distance between each splat and its bound template vertex."""
    scene.validate_binding(mesh)
    n = len(scene)
    if n == 0:
        return LossTerm(0.0, SplatGradients.zeros(0))
    diff = scene.positions - mesh.vertices[scene.binding]
    value = float((diff * diff).sum() / n)
    return LossTerm(value, _positions_only(scene, 2.0 / n * diff))


def _neighbor_sets(scene: GaussianScene, mesh: TemplateMesh) -> list[np.ndarray]:
    by_vertex: dict[int, list[int]] = {}
    for j, v in enumerate(scene.binding):
        by_vertex.setdefault(int(v), []).append(j)
    sets = []
    for v in scene.binding:
        members = [j for u in mesh.adjacency[int(v)] for j in by_vertex.get(u, ())]
        sets.append(np.array(sorted(members), dtype=np.int64))
    return sets


def laplacian_coordinates(points: np.ndarray, sets: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Uniform Laplacian coordinate of every point; second value flags points without neighbors."""
    delta = np.zeros_like(points)
    valid = np.array([len(s) > 0 for s in sets], dtype=bool)
    for i, s in enumerate(sets):
        if len(s):
            delta[i] = points[i] - points[s].mean(axis=0)
    return delta, valid


def laplacian_loss(scene: GaussianScene, mesh: TemplateMesh) -> LossTerm:
    """Mean squared deviation of splat Laplacian coordinates from the template's.

    The template coordinate of splat ``i`` is computed by replacing every splat
    with its bound vertex, so the term vanishes at initialization and under
    rigid translation.
    """
    scene.validate_binding(mesh)
    n = len(scene)
    if n == 0:
        return LossTerm(0.0, SplatGradients.zeros(0))
    sets = _neighbor_sets(scene, mesh)
    delta, valid = laplacian_coordinates(scene.positions, sets)
    ref, _ = laplacian_coordinates(mesh.vertices[scene.binding], sets)
    err = np.where(valid[:, None], delta - ref, 0.0)
    value = float((err * err).sum() / n)
    d_pos = 2.0 / n * err
    for i, s in enumerate(sets):
        if len(s):
            np.add.at(d_pos, s, -2.0 / n * err[i] / len(s))
    return LossTerm(value, _positions_only(scene, d_pos), skipped=int((~valid).sum()))


def emotion_loss(p_pred: EmotionDistribution, target: int | str) -> tuple[float, np.ndarray]:
    """Cross-entropy against a one-hot target: ``-log(max(p[target], 1e-8))``."""
    k = len(p_pred.probs)
    idx = p_pred.labels.index(target) if isinstance(target, str) else int(target)
    if not 0 <= idx < k:
        raise ValueError(f"target class {target} outside [0, {k})")
    p = float(p_pred.probs[idx])
    grad = np.zeros(k)
    grad[idx] = -1.0 / max(p, LOG_CLAMP)
    return -math.log(max(p, LOG_CLAMP)), grad


@dataclass
class LossReport:
    ism_residual_norm: float
    pos: float
    lap: float
    emotion: float | None
    total: float
    grad_norms: dict = field(default_factory=dict)
    gradients: SplatGradients | None = None

    def to_json(self) -> dict:
        out = {"ism_residual_norm": self.ism_residual_norm, "pos": self.pos, "lap": self.lap, "total": self.total}
        if self.emotion is not None:
            out["emotion"] = self.emotion
        return out


def total_loss(ism_diag: dict, ism_grads: SplatGradients, pos: LossTerm, lap: LossTerm,
               emotion: LossTerm | None, weights: LossWeights) -> LossReport:
    """Weighted sum of all terms and of their splat gradients.

    The ISM term defines a gradient rather than a value, so its contribution
    to ``total`` is the weighted residual norm.
    """
    ism_value = float(ism_diag.get("weighted_residual_norm", ism_diag.get("residual_norm", 0.0)))
    terms = {"ism": (ism_value, ism_grads), "pos": (pos.value, pos.gradients), "lap": (lap.value, lap.gradients)}
    if emotion is not None:
        terms["emotion"] = (emotion.value, emotion.gradients)
    for name, (value, grads) in terms.items():
        if not math.isfinite(value) or not grads.is_finite():
            raise NumericError(f"loss term {name!r} is not finite", term=name)
    grad = ism_grads + weights.lambda_pos * pos.gradients + weights.lambda_lap * lap.gradients
    total = ism_value + weights.lambda_pos * pos.value + weights.lambda_lap * lap.value
    if emotion is not None:
        grad = grad + weights.lambda_emotion * emotion.gradients
        total += weights.lambda_emotion * emotion.value
    return LossReport(ism_value, pos.value, lap.value, None if emotion is None else emotion.value, total,
                      {name: g.norm() for name, (_, g) in terms.items()}, grad)
