"""Evaluation at toy scale: identity cosine, neutrality score and Fréchet feature distance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifier import ExprClassifier, area_matrix, predict, to_gray
from .errors import SplatExprError
from .losses import emotion_loss
from .rasterizer import render
from .scene import GaussianScene, TemplateMesh

FEATURE_GRID = 8
FEATURE_DIM = FEATURE_GRID * FEATURE_GRID


class MetricsError(SplatExprError, ValueError):
    pass


def features(image: np.ndarray) -> np.ndarray:
    """8x8 cell means of the grayscale image, shifted to zero mean and scaled to unit norm.

    A constant image maps to the zero vector.
    """
    gray = to_gray(image)
    if not np.isfinite(gray).all():
        raise MetricsError("image contains non-finite values")
    cells = area_matrix(gray.shape[0], FEATURE_GRID) @ gray @ area_matrix(gray.shape[1], FEATURE_GRID).T
    v = cells.ravel() - cells.mean()
    norm = np.linalg.norm(v)
    # relative threshold: rounding noise of a constant image is not contrast
    if norm <= 1e-12 * max(1.0, float(np.abs(cells).max())):
        return np.zeros(FEATURE_DIM)
    return v / norm


def id_similarity(image_a: np.ndarray, image_b: np.ndarray) -> float:
    """Cosine between feature vectors; 0 when either image has no contrast."""
    fa, fb = features(image_a), features(image_b)
    na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(fa @ fb / (na * nb), -1.0, 1.0))


def nps(scene: GaussianScene, classifier: ExprClassifier, mesh: TemplateMesh, size: int | None = None,
        threads: int = 1) -> float:
    """Cross-entropy of the frontal render's predicted emotion against ``neutral``."""
    camera = mesh.frontal_camera if size is None else mesh.frontal_camera.with_size(size)
    image = render(scene, camera, threads=threads).pixels
    value, _ = emotion_loss(predict(classifier, image), "neutral")
    return value


@dataclass(frozen=True, eq=False)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise MetricsError(f"covariance shape {cov.shape} does not match mean of length {mean.size}")
        if self.n < 2:
            raise MetricsError(f"need at least two samples, got {self.n}")
        if not (np.isfinite(mean).all() and np.isfinite(cov).all()):
            raise MetricsError("feature statistics contain non-finite values")
        if np.abs(cov - cov.T).max(initial=0.0) > 1e-9:
            raise MetricsError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "FeatureStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or len(feats) < 2:
            raise MetricsError("need a (n >= 2, d) feature matrix")
        mu = feats.mean(axis=0)
        centered = feats - mu
        cov = centered.T @ centered / (len(feats) - 1)
        return cls(mu, 0.5 * (cov + cov.T), len(feats))

    @classmethod
    def from_images(cls, images) -> "FeatureStats":
        return cls.from_features(np.stack([features(im) for im in images]))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(C_a + C_b - 2 (C_a C_b)^(1/2))``.

    ``Tr((C_a C_b)^(1/2))`` equals the trace of the PSD root of the symmetric
    matrix ``C_a^(1/2) C_b C_a^(1/2)``, which keeps the computation in
    symmetric eigendecompositions with negative eigenvalues clipped to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise MetricsError("feature statistics have different dimensions")
    diff = a.mean - b.mean
    root_a = _psd_sqrt(a.cov)
    cross = np.trace(_psd_sqrt(root_a @ b.cov @ root_a))
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)
    if not np.isfinite(value):
        raise MetricsError("Fréchet distance is not finite")
    return max(value, 0.0)
