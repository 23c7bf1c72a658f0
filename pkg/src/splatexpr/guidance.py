"""Diffusion machinery and the interval score matching (ISM) gradient.

Images handed to the denoiser live in ``[-1, 1]``; renders live in ``[0, 1]``.
:func:`to_diffusion` / :func:`from_diffusion` convert at the boundary.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .embedding import ConditioningEmbedding, normalize_prompt
from .errors import SplatExprError
from .rasterizer import SplatGradients, render, render_backward
from .scene import Camera, GaussianScene


class GuidanceError(SplatExprError, ValueError):
    pass


def to_diffusion(image: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(image, dtype=np.float64) - 1.0


def from_diffusion(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.asarray(x, dtype=np.float64) + 1.0)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    steps: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    weight_w: np.ndarray

    def alpha_bar_at(self, t: int) -> float:
        return float(self.alpha_bar[t])

    def with_weights(self, weight_w: np.ndarray) -> "NoiseSchedule":
        w = np.asarray(weight_w, dtype=np.float64)
        if w.shape != (self.steps,) or not (w > 0).all():
            raise GuidanceError("loss weights must be positive, one per timestep")
        return NoiseSchedule(self.steps, self.beta, self.alpha_bar, w)


def make_schedule(T_max: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2,
                  weight: str = "one_minus_alpha_bar") -> NoiseSchedule:
    """Linear beta ramp with cumulative products; ``w(t) = 1 - alpha_bar[t]`` by default."""
    if T_max < 10:
        raise GuidanceError(f"T_max must be >= 10, got {T_max}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise GuidanceError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T_max)
    alpha_bar = np.cumprod(1.0 - beta)
    if weight == "one_minus_alpha_bar":
        w = 1.0 - alpha_bar
    elif weight == "uniform":
        w = np.ones(T_max)
    else:
        raise GuidanceError(f"unknown weighting {weight!r}")
    return NoiseSchedule(T_max, beta, alpha_bar, w)


def add_noise(x0: np.ndarray, t: int, rng: np.random.Generator, schedule: NoiseSchedule):
    """Forward-noise a ``[0, 1]`` image; returns ``(x_t, epsilon)`` in diffusion space."""
    x = to_diffusion(x0)
    ab = schedule.alpha_bar[t]
    eps = rng.standard_normal(x.shape)
    return np.sqrt(ab) * x + np.sqrt(1.0 - ab) * eps, eps


# ---------------------------------------------------------------------------
# denoisers


@dataclass(frozen=True, eq=False)
class DenoiserQuery:
    image: np.ndarray
    timestep: int
    conditioning: ConditioningEmbedding | None = None


class Denoiser(Protocol):
    def eval(self, query: DenoiserQuery) -> np.ndarray:
        """Noise prediction with the same shape as ``query.image``."""


@dataclass(frozen=True, eq=False)
class MixtureComponent:
    mean: np.ndarray  # [0, 1] image
    gamma: float  # isotropic std in diffusion space
    prompt: str

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        if mean.min(initial=0.0) < 0.0 or mean.max(initial=0.0) > 1.0:
            raise GuidanceError(f"component {self.prompt!r} mean must lie in [0, 1]")
        if not self.gamma > 0:
            raise GuidanceError(f"component {self.prompt!r} needs gamma > 0")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "prompt", normalize_prompt(self.prompt))


def _stage_key(stage: str) -> str:
    label = stage.split(":", 1)[1] if ":" in stage else stage
    return label.rsplit("@", 1)[0]


@dataclass(eq=False)
class MixtureDenoiser:
    """Exact noise prediction for an isotropic Gaussian mixture prior.

    With prior ``x0 ~ sum_c pi_c N(m_c, gamma_c^2 I)`` and
    ``x_t = sqrt(ab) x0 + sqrt(1 - ab) eps`` the optimal prediction is
    ``(x_t - sqrt(ab) E[x0 | x_t]) / sqrt(1 - ab)``.  A conditioning selects
    one component; ``None`` keeps all components with a uniform prior.
    """

    components: Sequence[MixtureComponent]
    schedule: NoiseSchedule
    calls: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.components:
            raise GuidanceError("mixture denoiser needs at least one component")
        self.components = list(self.components)
        keys = [c.prompt for c in self.components]
        if len(set(keys)) != len(keys):
            raise GuidanceError("component prompts must be unique")
        self._by_key = {c.prompt: i for i, c in enumerate(self.components)}

    def resolve(self, conditioning: ConditioningEmbedding) -> int:
        """Index of the component a conditioning selects.

        The full tag is tried first, then its stages from the most specific
        (last) to the base, so ``default|view:front@0.8|expr:happy@1`` picks a
        ``happy`` component when one exists and ``default`` otherwise.
        """
        if conditioning.tag in self._by_key:
            return self._by_key[conditioning.tag]
        for stage in reversed(conditioning.stages):
            key = _stage_key(stage)
            if key in self._by_key:
                return self._by_key[key]
        raise GuidanceError(f"conditioning {conditioning.tag!r} matches no mixture component "
                            f"(known: {', '.join(self._by_key)})")

    def posterior(self, x: np.ndarray, t: int, conditioning: ConditioningEmbedding | None):
        """Responsibilities and posterior mean ``E[x0 | x_t]`` in diffusion space."""
        ab = self.schedule.alpha_bar[t]
        idx = range(len(self.components)) if conditioning is None else [self.resolve(conditioning)]
        logw, means = [], []
        for i in idx:
            comp = self.components[i]
            if comp.mean.shape != x.shape:
                raise GuidanceError(f"component {comp.prompt!r} has shape {comp.mean.shape}, image {x.shape}")
            m = to_diffusion(comp.mean)
            var = ab * comp.gamma ** 2 + (1.0 - ab)
            r = x - np.sqrt(ab) * m
            logw.append(-0.5 * float((r * r).sum()) / var - 0.5 * x.size * np.log(2.0 * np.pi * var))
            means.append(m + (np.sqrt(ab) * comp.gamma ** 2 / var) * r)
        logw = np.array(logw)
        resp = np.exp(logw - logw.max())
        resp /= resp.sum()
        post = np.zeros_like(x)
        for w, m in zip(resp, means):
            post = post + w * m
        return resp, post

    def eval(self, query: DenoiserQuery) -> np.ndarray:
        if not 0 <= query.timestep < self.schedule.steps:
            raise GuidanceError(f"timestep {query.timestep} outside [0, {self.schedule.steps})")
        self.calls += 1
        x = np.asarray(query.image, dtype=np.float64)
        ab = self.schedule.alpha_bar[query.timestep]
        _, post = self.posterior(x, query.timestep, query.conditioning)
        return (x - np.sqrt(ab) * post) / np.sqrt(1.0 - ab)


def load_components(directory) -> list[MixtureComponent]:
    """Read ``<name>.png`` means with ``<name>.json`` sidecars ``{"prompt", "gamma"}``."""
    from .rasterizer import read_png

    directory = Path(directory)
    comps = []
    for sidecar in sorted(directory.glob("*.json")):
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        png = sidecar.with_suffix(".png")
        if not png.exists():
            raise GuidanceError(f"{sidecar.name} has no matching {png.name}")
        comps.append(MixtureComponent(np.clip(read_png(png), 0.0, 1.0), float(meta["gamma"]), meta["prompt"]))
    if not comps:
        raise GuidanceError(f"no mixture components found in {directory}")
    return comps


def save_components(components: Sequence[MixtureComponent], directory) -> None:
    from .rasterizer import png_bytes

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, comp in enumerate(components):
        stem = f"{i:02d}_{comp.prompt.replace(' ', '_')}"
        (directory / f"{stem}.png").write_bytes(png_bytes(comp.mean))
        (directory / f"{stem}.json").write_text(json.dumps({"prompt": comp.prompt, "gamma": comp.gamma}))


# ---------------------------------------------------------------------------
# DDIM


def _alpha_bar(schedule: NoiseSchedule, step: int, clean: bool) -> float:
    # The iterate handed in at step 0 is the clean render itself.
    return 1.0 if clean else float(schedule.alpha_bar[step])


def ddim_step(x: np.ndarray, step: int, next_step: int, eps: np.ndarray, schedule: NoiseSchedule,
              clean: bool = False) -> np.ndarray:
    """Move ``x`` from ``step`` to ``next_step`` along the deterministic DDIM path."""
    ab = _alpha_bar(schedule, step, clean)
    ab_next = 1.0 if next_step < 0 else float(schedule.alpha_bar[next_step])
    x0_hat = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    return np.sqrt(ab_next) * x0_hat + np.sqrt(1.0 - ab_next) * eps


def inversion_steps(target_step: int, stride: int) -> list[int]:
    steps = list(range(0, target_step, stride))
    return steps + [target_step] if target_step > 0 else [0]


def ddim_invert(x0: np.ndarray, target_step: int, stride: int, denoiser: Denoiser, schedule: NoiseSchedule,
                conditioning: ConditioningEmbedding | None = None) -> list[np.ndarray]:
    """Deterministic DDIM inversion of a clean diffusion-space image.

    Returns iterates at steps ``0, stride, 2*stride, ..., target_step``; the
    first entry is ``x0`` itself.
    """
    if not 0 <= target_step < schedule.steps:
        raise GuidanceError(f"target_step {target_step} outside [0, {schedule.steps})")
    if stride < 1:
        raise GuidanceError("stride must be >= 1")
    steps = inversion_steps(target_step, stride)
    traj = [np.asarray(x0, dtype=np.float64)]
    for k in range(len(steps) - 1):
        x = traj[-1]
        eps = denoiser.eval(DenoiserQuery(x, steps[k], conditioning))
        traj.append(ddim_step(x, steps[k], steps[k + 1], eps, schedule, clean=k == 0))
    return traj


def ddim_sample(x_start: np.ndarray, start_step: int, stride: int, denoiser: Denoiser, schedule: NoiseSchedule,
                conditioning: ConditioningEmbedding | None = None) -> np.ndarray:
    """Run DDIM from ``start_step`` back to the clean image on the inversion grid."""
    steps = inversion_steps(start_step, stride)
    x = np.asarray(x_start, dtype=np.float64)
    for k in range(len(steps) - 1, 0, -1):
        eps = denoiser.eval(DenoiserQuery(x, steps[k], conditioning))
        nxt = -1 if k == 1 else steps[k - 1]
        x = ddim_step(x, steps[k], nxt, eps, schedule)
    return x


# ---------------------------------------------------------------------------
# ISM


@dataclass(frozen=True)
class IsmParams:
    t_range: tuple[int, int] = (20, 900)
    stride: int = 50


def sample_timestep(rng: np.random.Generator, params: IsmParams) -> int:
    lo, hi = params.t_range
    lo = max(lo, params.stride + 1)
    if lo > hi:
        raise GuidanceError(f"t_range {params.t_range} leaves no timestep above stride {params.stride}")
    return int(rng.integers(lo, hi + 1))


def ism_residual(x0: np.ndarray, t: int, stride: int, conditioning: ConditioningEmbedding | None,
                 schedule: NoiseSchedule, denoiser: Denoiser,
                 reference: ConditioningEmbedding | None = None) -> tuple[np.ndarray, dict]:
    """``w(t) * (eps(x_t, t, c) - eps(x_s, s, ref))`` for a clean diffusion-space image."""
    if stride >= t:
        raise GuidanceError(f"stride {stride} must be smaller than t={t}")
    if t >= schedule.steps:
        raise GuidanceError(f"t={t} outside schedule of {schedule.steps} steps")
    s = t - stride
    traj = ddim_invert(x0, s, stride, denoiser, schedule, reference)
    x_s = traj[-1]
    eps_s = denoiser.eval(DenoiserQuery(x_s, s, reference))
    x_t = ddim_step(x_s, s, t, eps_s, schedule, clean=s == 0)
    eps_t = denoiser.eval(DenoiserQuery(x_t, t, conditioning))
    w = float(schedule.weight_w[t])
    diff = eps_t - eps_s
    residual = w * diff
    return residual, {"t": t, "s": s, "weight": w, "residual_norm": float(np.linalg.norm(diff)),
                      "weighted_residual_norm": float(np.linalg.norm(residual))}


def ism_gradient(scene: GaussianScene, camera: Camera, conditioning: ConditioningEmbedding | None,
                 schedule: NoiseSchedule, denoiser: Denoiser, rng: np.random.Generator,
                 params: IsmParams = IsmParams(), reference: ConditioningEmbedding | None = None,
                 t: int | None = None, threads: int = 1) -> tuple[SplatGradients, dict]:
    """ISM gradient w.r.t. every splat parameter.

    The weighted denoiser residual is used as the image-space cotangent; no
    gradient flows through the denoiser.  Only the timestep is random.
    """
    image = render(scene, camera, threads=threads).pixels
    if t is None:
        t = sample_timestep(rng, params)
    residual, diag = ism_residual(to_diffusion(image), t, params.stride, conditioning, schedule, denoiser, reference)
    # x0 = 2 * image - 1
    grads = render_backward(scene, camera, 2.0 * residual, threads=threads)
    return grads, diag
