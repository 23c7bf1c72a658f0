"""Small built-in fixtures: a four-vertex face template and a glyph-based mixture prior."""
from __future__ import annotations

import numpy as np

from .classifier import EMOTIONS, area_matrix, draw_glyph
from .guidance import MixtureComponent

# Head center behind two eyes and a mouth, connected as a tetrahedron.
FACE_OBJ = """\
# four-vertex face template
v 0.0 0.0 -0.3
v -0.3 0.22 0.15
v 0.3 0.22 0.15
v 0.0 -0.3 0.15
f 1 3 2
f 1 2 4
f 1 4 3
f 2 3 4
"""


def glyph_image(label: str, size: int) -> np.ndarray:
    """Jitter-free glyph resampled to ``size`` x ``size`` RGB."""
    g = draw_glyph(label)
    a = area_matrix(g.shape[0], size)
    small = a @ g @ a.T
    return np.repeat(small[:, :, None], 3, axis=2)


def glyph_mixture(size: int, gamma: float = 0.5, labels=EMOTIONS) -> list[MixtureComponent]:
    """One component per emotion keyed by its name, plus ``default`` for tags without an expression.

    The ``default`` mean is the average of all expression glyphs.
    """
    means = [np.clip(glyph_image(k, size), 0.0, 1.0) for k in labels]
    comps = [MixtureComponent(m, gamma, k) for m, k in zip(means, labels)]
    comps.append(MixtureComponent(np.mean(means, axis=0), gamma, "default"))
    return comps


BUILTIN_FACE = "builtin:face"


def toy_mesh(size: int = 16):
    from .scene import make_template

    return make_template("obj_file", BUILTIN_FACE, size=size)


# Frontal-only 16x16 run on the four-vertex face; the regularizer acts every step.
TOY_SETTINGS = dict(iterations=300, render_size=16, template="obj_file", template_arg=BUILTIN_FACE,
                    azimuth_min=0.0, azimuth_max=0.0, elevation_min=0.0, elevation_max=0.0,
                    t_min=51, t_max=500, lr=0.05, emotion_every=1, classifier_per_class=40,
                    classifier_epochs=300)


def toy_config(**overrides):
    from .trainer import TrainConfig

    return TrainConfig(**{**TOY_SETTINGS, **overrides})


def toy_classifier(seed: int = 0, per_class: int = 40, epochs: int = 300):
    from .classifier import make_synthetic_dataset, train_classifier

    rng = np.random.default_rng(seed)
    return train_classifier(make_synthetic_dataset(per_class, rng), epochs, rng=rng, seed=seed)


def toy_components(image_bytes: bytes, config, classifier=None):
    from .trainer import build_components

    return build_components(image_bytes, config, mesh=toy_mesh(config.render_size), classifier=classifier)
