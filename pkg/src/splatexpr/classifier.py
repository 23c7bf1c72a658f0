"""Differentiable surrogate emotion classifier and its synthetic training set.

The classifier sees a 16x16 grayscale box-average downsample of an image and
runs it through a 256-32-k tanh perceptron followed by a softmax.  Every step
is linear or smooth, so pixel gradients are exact.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, SplatExprError

EMOTIONS = ("angry", "disgust", "fear", "happy", "sad", "surprise", "neutral")
GRID = 16
HIDDEN = 32
GLYPH_SIZE = 64
LUMA = np.array([0.299, 0.587, 0.114])


class ClassifierError(SplatExprError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EmotionDistribution:
    probs: np.ndarray
    labels: tuple[str, ...] = EMOTIONS

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.shape != (len(self.labels),):
            raise ClassifierError(f"expected {len(self.labels)} probabilities, got {p.shape}")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
            raise ClassifierError("probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "probs", p)

    def __getitem__(self, label: str) -> float:
        return float(self.probs[self.labels.index(label)])

    @property
    def argmax(self) -> str:
        return self.labels[int(np.argmax(self.probs))]

    @classmethod
    def one_hot(cls, label: str, labels: tuple[str, ...] = EMOTIONS) -> "EmotionDistribution":
        p = np.zeros(len(labels))
        p[labels.index(label)] = 1.0
        return cls(p, labels)


# ---------------------------------------------------------------------------
# synthetic glyphs


def _polyline(points: np.ndarray, n: int = 64) -> np.ndarray:
    seg = np.diff(points, axis=0)
    out = [points[i] + np.linspace(0, 1, n, endpoint=False)[:, None] * seg[i] for i in range(len(seg))]
    return np.concatenate(out + [points[-1:]])


def _arc(cx, cy, half_width, bend, n: int = 96) -> np.ndarray:
    # bend > 0 puts the middle below the corners (a smile in image rows)
    u = np.linspace(-1.0, 1.0, n)
    return np.stack([cx + half_width * u, cy + bend * (1.0 - u * u)], axis=1)


def _circle(cx, cy, r, n: int = 96) -> np.ndarray:
    a = np.linspace(0.0, 2.0 * np.pi, n)
    return np.stack([cx + r * np.cos(a), cy + r * np.sin(a)], axis=1)


def _stroke(curve: np.ndarray, thickness: float, size: int) -> np.ndarray:
    out = np.zeros((size, size))
    pad = thickness + 1.0
    x0, y0 = np.clip(np.floor(curve.min(axis=0) - pad).astype(int), 0, size)
    x1, y1 = np.clip(np.ceil(curve.max(axis=0) + pad).astype(int), 0, size)
    if x1 <= x0 or y1 <= y0:
        return out
    ys, xs = np.mgrid[y0:y1, x0:x1]
    pts = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    d = np.sqrt(((pts[:, None, :] - curve[None, :, :]) ** 2).sum(-1)).min(axis=1)
    out[y0:y1, x0:x1] = np.clip(thickness - d + 0.5, 0.0, 1.0).reshape(y1 - y0, x1 - x0)
    return out


def draw_glyph(label: str, rng: np.random.Generator | None = None, size: int = GLYPH_SIZE) -> np.ndarray:
    """Grayscale face glyph in ``[0, 1]``; ``rng`` adds position/thickness/contrast jitter."""
    if label not in EMOTIONS:
        raise ClassifierError(f"unknown emotion {label!r}")
    jit = (lambda s: rng.uniform(-s, s)) if rng is not None else (lambda s: 0.0)
    k = size / 64.0
    ox, oy = 32 * k + jit(3 * k), 32 * k + jit(3 * k)
    thick = (1.6 + jit(0.6)) * k
    skin = 0.65 + jit(0.1)
    ink = 0.05 + (abs(jit(0.05)))
    ys, xs = np.mgrid[0:size, 0:size]
    grid = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    head = np.clip(24 * k - np.sqrt(((grid - [ox, oy]) ** 2).sum(1)) + 0.5, 0.0, 1.0)
    img = skin * head

    def at(x, y):
        return np.array([ox + (x - 32) * k, oy + (y - 32) * k])

    strokes = []
    eye_r = 2.6
    if label in ("fear", "surprise"):
        eye_r = 3.4
    strokes += [_circle(*at(23, 26), eye_r * k), _circle(*at(41, 26), eye_r * k)]
    mouth_y = 44
    if label == "happy":
        strokes.append(_arc(*at(32, mouth_y - 3), 10 * k, 6 * k))
    elif label == "sad":
        strokes.append(_arc(*at(32, mouth_y + 3), 10 * k, -6 * k))
    elif label == "surprise":
        strokes.append(_circle(*at(32, mouth_y + 1), 5 * k))
    elif label == "fear":
        strokes.append(_circle(*at(32, mouth_y), 2.5 * k))
        strokes += [_polyline(np.array([at(18, 17), at(28, 16)])), _polyline(np.array([at(36, 16), at(46, 17)]))]
    elif label == "angry":
        strokes += [_polyline(np.array([at(17, 17), at(28, 22)])), _polyline(np.array([at(36, 22), at(47, 17)]))]
        strokes.append(_polyline(np.array([at(23, mouth_y), at(41, mouth_y)])))
    elif label == "disgust":
        strokes.append(_polyline(np.array([at(22, mouth_y + 2), at(32, mouth_y + 1), at(42, mouth_y - 5)])))
    elif label == "neutral":
        strokes.append(_polyline(np.array([at(22, mouth_y), at(42, mouth_y)])))
    mask = np.zeros((size, size))
    for curve in strokes:
        mask = np.maximum(mask, _stroke(curve, thick, size))
    head = head.reshape(size, size)
    return img.reshape(size, size) * (1.0 - mask) + ink * mask * head


@dataclass(eq=False)
class GlyphDataset:
    images: np.ndarray  # (n, H, W) grayscale
    labels: np.ndarray  # (n,) class indices
    classes: tuple[str, ...] = EMOTIONS

    def __len__(self) -> int:
        return len(self.labels)

    def class_means(self) -> np.ndarray:
        return np.stack([self.images[self.labels == c].mean(axis=0) for c in range(len(self.classes))])

    def split(self, holdout: float, rng: np.random.Generator) -> tuple["GlyphDataset", "GlyphDataset"]:
        """Stratified split; every class contributes the same holdout fraction."""
        train, test = [], []
        for c in range(len(self.classes)):
            idx = rng.permutation(np.flatnonzero(self.labels == c))
            cut = int(round(holdout * len(idx)))
            test.append(idx[:cut])
            train.append(idx[cut:])
        tr, te = np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
        return (GlyphDataset(self.images[tr], self.labels[tr], self.classes),
                GlyphDataset(self.images[te], self.labels[te], self.classes))


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random background level, gain and pixel noise so rendered images stay in distribution."""
    background = rng.uniform(0.0, 0.4)
    gain = rng.uniform(0.6, 1.2)
    noisy = background + gain * image + rng.normal(scale=0.03, size=image.shape)
    return np.clip(noisy, 0.0, 1.0)


def make_synthetic_dataset(n_per_class: int, rng: np.random.Generator) -> GlyphDataset:
    if n_per_class < 10:
        raise ClassifierError(f"need at least 10 images per class, got {n_per_class}")
    images, labels = [], []
    for _ in range(n_per_class):
        for c, name in enumerate(EMOTIONS):
            images.append(augment(draw_glyph(name, rng), rng))
            labels.append(c)
    return GlyphDataset(np.array(images), np.array(labels, dtype=np.int64))


# ---------------------------------------------------------------------------
# model


def area_matrix(n_in: int, n_out: int = GRID) -> np.ndarray:
    """Row-stochastic box-average operator mapping ``n_in`` samples onto ``n_out`` cells."""
    m = np.zeros((n_out, n_in))
    edges = np.linspace(0.0, n_in, n_out + 1)
    for i in range(n_out):
        lo, hi = edges[i], edges[i + 1]
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            m[i, j] = max(0.0, min(hi, j + 1) - max(lo, j))
        m[i] /= hi - lo
    return m


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[2] == 3:
        return image @ LUMA
    raise ClassifierError(f"expected an HxW or HxWx3 image, got shape {image.shape}")


def downsample(image: np.ndarray) -> np.ndarray:
    gray = to_gray(image)
    return area_matrix(gray.shape[0]) @ gray @ area_matrix(gray.shape[1]).T


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(eq=False)
class ExprClassifier:
    w1: np.ndarray  # (HIDDEN, GRID*GRID)
    b1: np.ndarray
    w2: np.ndarray  # (k, HIDDEN)
    b2: np.ndarray
    labels: tuple[str, ...] = EMOTIONS
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        # weights are held float32-representable so serialization is exact
        for name in ("w1", "b1", "w2", "b2"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float32).astype(np.float64))

    @classmethod
    def initial(cls, rng: np.random.Generator, labels: tuple[str, ...] = EMOTIONS) -> "ExprClassifier":
        n_in = GRID * GRID
        return cls(rng.normal(scale=1.0 / np.sqrt(n_in), size=(HIDDEN, n_in)), np.zeros(HIDDEN),
                   rng.normal(scale=0.01, size=(len(labels), HIDDEN)), np.zeros(len(labels)), labels)

    @property
    def k(self) -> int:
        return len(self.labels)

    def logits(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Batched forward on flattened 16x16 features; returns (hidden, logits)."""
        h = np.tanh(features @ self.w1.T + self.b1)
        return h, h @ self.w2.T + self.b2

    def to_bytes(self) -> bytes:
        header = json.dumps({"layers": [GRID * GRID, HIDDEN, self.k], "k": self.k, "labels": list(self.labels),
                             "seed": self.meta.get("seed"), "epochs": self.meta.get("epochs"),
                             "final_accuracy": self.meta.get("final_accuracy")}, sort_keys=True).encode()
        flat = np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2]).astype("<f4")
        return struct.pack("<I", len(header)) + header + flat.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ExprClassifier":
        if len(blob) < 4:
            raise ClassifierError("classifier file is truncated")
        (n,) = struct.unpack("<I", blob[:4])
        try:
            header = json.loads(blob[4:4 + n])
        except ValueError as exc:
            raise ClassifierError(f"bad classifier header: {exc}") from exc
        n_in, hidden, k = header["layers"]
        sizes = [hidden * n_in, hidden, k * hidden, k]
        flat = np.frombuffer(blob[4 + n:], dtype="<f4")
        if flat.size != sum(sizes):
            raise ClassifierError(f"expected {sum(sizes)} weights, found {flat.size}")
        parts = np.split(flat.astype(np.float64), np.cumsum(sizes)[:-1])
        meta = {key: header.get(key) for key in ("seed", "epochs", "final_accuracy")}
        return cls(parts[0].reshape(hidden, n_in), parts[1], parts[2].reshape(k, hidden), parts[3],
                   tuple(header["labels"]), meta)


def _features(images: np.ndarray) -> np.ndarray:
    if images.ndim == 2:
        images = images[None]
    dh, dw = area_matrix(images.shape[1]), area_matrix(images.shape[2])
    return np.einsum("ij,njk,lk->nil", dh, images, dw).reshape(len(images), -1)


def accuracy(clf: ExprClassifier, data: GlyphDataset) -> float:
    _, z = clf.logits(_features(data.images))
    return float((z.argmax(axis=1) == data.labels).mean())


def train_classifier(dataset: GlyphDataset, epochs: int = 600, lr: float = 0.5,
                     rng: np.random.Generator | None = None, seed: int = 0,
                     holdout: float = 0.2) -> ExprClassifier:
    """Full-batch gradient descent on cross-entropy; holdout accuracy goes into ``meta``."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    counts = np.bincount(dataset.labels, minlength=len(dataset.classes))
    if counts.min() < 10 or counts.min() != counts.max():
        raise ClassifierError("training set must be balanced with at least 10 images per class")
    train, test = dataset.split(holdout, rng)
    clf = ExprClassifier.initial(rng, dataset.classes)
    raw = _features(train.images)
    # train on standardized features, then fold the affine map into the first layer
    mu, sd = raw.mean(axis=0), np.maximum(raw.std(axis=0), 0.05)
    x = (raw - mu) / sd
    y = np.eye(len(dataset.classes))[train.labels]
    w1, b1, w2, b2 = clf.w1, clf.b1, clf.w2, clf.b2
    n = len(x)
    for _ in range(epochs):
        h = np.tanh(x @ w1.T + b1)
        p = softmax(h @ w2.T + b2)
        loss = -np.log(np.maximum((p * y).sum(axis=1), 1e-300)).mean()
        if not np.isfinite(loss):
            raise NumericError("classifier training diverged (loss is not finite)", term="classifier")
        dz = (p - y) / n
        dw2, db2 = dz.T @ h, dz.sum(axis=0)
        dpre = (dz @ w2) * (1.0 - h * h)
        dw1, db1 = dpre.T @ x, dpre.sum(axis=0)
        w1, b1, w2, b2 = w1 - lr * dw1, b1 - lr * db1, w2 - lr * dw2, b2 - lr * db2
        if not all(np.isfinite(w).all() for w in (w1, b1, w2, b2)):
            raise NumericError("classifier training diverged (weights are not finite)", term="classifier")
    with np.errstate(over="ignore", invalid="ignore"):
        clf = ExprClassifier(w1 / sd, b1 - (w1 / sd) @ mu, w2, b2, dataset.classes)
    if not all(np.isfinite(getattr(clf, k)).all() for k in ("w1", "b1", "w2", "b2")):
        raise NumericError("classifier weights overflow single precision", term="classifier")
    clf.meta = {"seed": seed, "epochs": epochs, "final_accuracy": accuracy(clf, test) if len(test) else None}
    return clf


def predict(clf: ExprClassifier, image: np.ndarray) -> EmotionDistribution:
    _, z = clf.logits(downsample(image).ravel()[None])
    return EmotionDistribution(softmax(z[0]), clf.labels)


def predict_backward(clf: ExprClassifier, image: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    """Pull ``d_loss/d_probs`` back to ``d_loss/d_pixels`` with the input's shape."""
    image = np.asarray(image, dtype=np.float64)
    gray = to_gray(image)
    dh, dw = area_matrix(gray.shape[0]), area_matrix(gray.shape[1])
    feat = (dh @ gray @ dw.T).ravel()
    h, z = clf.logits(feat[None])
    h, p = h[0], softmax(z[0])
    g = np.asarray(d_probs, dtype=np.float64)
    d_z = p * (g - (p * g).sum())
    d_pre = (d_z @ clf.w2) * (1.0 - h * h)
    d_feat = (d_pre @ clf.w1).reshape(GRID, GRID)
    d_gray = dh.T @ d_feat @ dw
    if image.ndim == 2:
        return d_gray
    return d_gray[:, :, None] * LUMA[None, None, :]
