"""Optimization loop: ISM guidance plus mesh and expression regularizers under Adam."""
from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import embedding as emb
from .classifier import EMOTIONS, ExprClassifier, make_synthetic_dataset, predict, predict_backward, \
    train_classifier
from .errors import CheckpointError, ConfigError, NumericError, PlyError
from .guidance import IsmParams, MixtureDenoiser, ism_gradient, load_components, make_schedule
from .losses import LossTerm, LossWeights, emotion_loss, laplacian_loss, pos_loss, total_loss
from .rasterizer import SplatGradients, render, render_backward
from .scene import (PARAM_WIDTHS, CameraPolicy, GaussianScene, TemplateMesh, init_scene, load_ply,
                    make_template, sample_camera, save_ply)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    seed: int = 0
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_position: float = 1.0
    lr_rotation: float = 0.1
    lr_scale: float = 0.5
    lr_opacity: float = 0.5
    lr_color: float = 1.0
    render_size: int = 128
    t_min: int = 20
    t_max: int = 900
    stride: int = 50
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    reference_branch: str = "null"
    lambda_pos: float = 0.1
    lambda_lap: float = 0.1
    lambda_emotion: float = 0.05
    emotion_every: int = 10
    emotion_gradient: bool = True
    target_expression: str | None = "neutral"
    base_prompt: str = "a photo of a face"
    view_prompt_front: str = "front view"
    view_prompt_side: str = "side view"
    view_prompt_back: str = "back view"
    expr_prompt: str | None = None
    acc_prompt: str | None = None
    b: float = 0.8
    gamma_expr: float = 0.5
    gamma_acc: float = 0.5
    eta_expr: float = 1.0
    eta_acc: float = 1.0
    disable_semantic_embedding: bool = False
    disable_emotion_loss: bool = False
    template: str = "icosphere"
    template_arg: str = "2"
    splats_per_vertex: int = 1
    azimuth_min: float = -180.0
    azimuth_max: float = 180.0
    elevation_min: float = -20.0
    elevation_max: float = 30.0
    fov_deg: float = 40.0
    denoiser_dir: str | None = None
    mixture_gamma: float = 0.5
    classifier_path: str | None = None
    classifier_seed: int = 0
    classifier_per_class: int = 60
    classifier_epochs: int = 300
    checkpoint_every: int = 0
    log_timing: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.emotion_every < 1:
            raise ConfigError(f"emotion_every must be >= 1, got {self.emotion_every}")
        for name in ("b", "gamma_expr", "gamma_acc", "eta_expr", "eta_acc"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        for name in ("lambda_pos", "lambda_lap", "lambda_emotion", "lr"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and nonnegative, got {v}")
        if self.target_expression is not None and self.target_expression not in EMOTIONS:
            raise ConfigError(f"target_expression must be one of {', '.join(EMOTIONS)} or none")
        if self.reference_branch not in ("null", "identity"):
            raise ConfigError("reference_branch must be 'null' or 'identity'")
        if self.template not in ("icosphere", "obj_file"):
            raise ConfigError("template must be 'icosphere' or 'obj_file'")
        if self.render_size < 8:
            raise ConfigError("render_size must be >= 8")
        if self.splats_per_vertex < 1:
            raise ConfigError("splats_per_vertex must be >= 1")
        if self.stride < 1 or not 0 <= self.t_min <= self.t_max < self.diffusion_steps:
            raise ConfigError("need stride >= 1 and 0 <= t_min <= t_max < diffusion_steps")
        if self.t_max <= self.stride:
            raise ConfigError(f"t_max ({self.t_max}) must exceed stride ({self.stride})")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_pos, self.lambda_lap, self.lambda_emotion)

    @property
    def blend(self) -> emb.BlendParams:
        return emb.BlendParams(self.b, self.gamma_expr, self.gamma_acc, self.eta_expr, self.eta_acc)

    @property
    def expression_prompt(self) -> str | None:
        return self.expr_prompt if self.expr_prompt is not None else self.target_expression

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def trajectory_hash(self) -> str:
        """Digest of every setting that influences optimization (not budget or I/O)."""
        skip = {"iterations", "checkpoint_every", "log_timing", "threads"}
        items = {k: v for k, v in dataclasses.asdict(self).items() if k not in skip}
        return hashlib.sha256(json.dumps(items, sort_keys=True).encode()).hexdigest()


def run_hash(config: TrainConfig, image_bytes: bytes) -> str:
    """Checkpoint compatibility key: trajectory settings plus the input image."""
    return hashlib.sha256((config.trajectory_hash() + hashlib.sha256(image_bytes).hexdigest()).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(0, np.zeros(n), np.zeros(n))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, hyper: AdamHyper,
              lr_scale: np.ndarray | float = 1.0) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; ``lr_scale`` multiplies the step per parameter."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError("params, grads and optimizer state must have matching shapes")
    step = state.step + 1
    m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * grads
    v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * grads * grads
    m_hat = m / (1.0 - hyper.beta1 ** step)
    v_hat = v / (1.0 - hyper.beta2 ** step)
    new = params - hyper.lr * lr_scale * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return new, AdamState(step, m, v)


def group_lr_scale(config: TrainConfig, n: int) -> np.ndarray:
    mult = {"positions": config.lr_position, "rotations": config.lr_rotation, "log_scales": config.lr_scale,
            "opacity_logits": config.lr_opacity, "colors": config.lr_color}
    return np.concatenate([np.full(n * PARAM_WIDTHS[k], mult[k]) for k in PARAM_WIDTHS])


# ---------------------------------------------------------------------------
# checkpoints


def _b64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _unb64(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").copy()


@dataclass
class Checkpoint:
    scene_ply: bytes
    iteration: int
    config_hash: str
    rng_state: dict
    adam: AdamState

    def sidecar(self) -> dict:
        return {"iteration": self.iteration, "config_hash": self.config_hash, "rng_state": self.rng_state,
                "adam": {"step": self.adam.step, "m": _b64(self.adam.m), "v": _b64(self.adam.v)}}

    def save(self, directory, stem: str | None = None) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or f"iter_{self.iteration:06d}"
        _atomic_write(directory / f"{stem}.ply", self.scene_ply)
        path = directory / f"{stem}.json"
        _atomic_write(path, json.dumps(self.sidecar(), sort_keys=True).encode())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if path.suffix == ".ply":
            path = path.with_suffix(".json")
        try:
            meta = json.loads(path.read_text(encoding="utf-8"))
            ply = path.with_suffix(".ply").read_bytes()
            adam = AdamState(int(meta["adam"]["step"]), _unb64(meta["adam"]["m"]), _unb64(meta["adam"]["v"]))
            ckpt = cls(ply, int(meta["iteration"]), str(meta["config_hash"]), meta["rng_state"], adam)
            scene = load_ply(ply)
        except (OSError, ValueError, KeyError, TypeError, PlyError) as exc:
            raise CheckpointError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
        if adam.m.shape != (scene.parameter_count,) or adam.v.shape != adam.m.shape:
            raise CheckpointError(f"checkpoint {path}: optimizer state does not match the scene")
        return ckpt


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# fit


class TrainingAborted(NumericError):
    def __init__(self, message: str, term: str | None, iteration: int, checkpoint: Path | None):
        super().__init__(message, term)
        self.iteration = iteration
        self.checkpoint = checkpoint


@dataclass
class FitResult:
    scene: GaussianScene
    log: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    def log_lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True) for r in self.log]


@dataclass
class Components:
    """Everything ``fit`` needs besides the config, resolved once."""

    mesh: TemplateMesh
    denoiser: MixtureDenoiser
    classifier: ExprClassifier | None
    identity: emb.IdentityEmbedding


def build_components(image_bytes: bytes, config: TrainConfig, mesh: TemplateMesh | None = None,
                     denoiser=None, classifier: ExprClassifier | None = None) -> Components:
    from .toy import glyph_mixture

    if mesh is None:
        mesh = make_template(config.template, config.template_arg, size=config.render_size)
    schedule = make_schedule(config.diffusion_steps, config.beta_start, config.beta_end)
    if denoiser is None:
        comps = load_components(config.denoiser_dir) if config.denoiser_dir \
            else glyph_mixture(config.render_size, config.mixture_gamma)
        denoiser = MixtureDenoiser(comps, schedule)
    if classifier is None and not config.disable_emotion_loss:
        if config.classifier_path:
            classifier = ExprClassifier.from_bytes(Path(config.classifier_path).read_bytes())
        else:
            rng = np.random.default_rng(config.classifier_seed)
            data = make_synthetic_dataset(config.classifier_per_class, rng)
            classifier = train_classifier(data, config.classifier_epochs, rng=rng, seed=config.classifier_seed)
    return Components(mesh, denoiser, classifier, emb.IdentityEmbedding.from_bytes(image_bytes))


def _view_prompt(config: TrainConfig, label: str) -> str:
    return {"front": config.view_prompt_front, "side": config.view_prompt_side,
            "back": config.view_prompt_back}[label]


def conditioning_for(config: TrainConfig, c_default: emb.ConditioningEmbedding,
                     view_label: str) -> emb.ConditioningEmbedding:
    semantic = not config.disable_semantic_embedding
    return emb.compose_final(
        c_default, _view_prompt(config, view_label), config.b,
        config.expression_prompt if semantic else None, config.gamma_expr, config.eta_expr,
        config.acc_prompt if semantic else None, config.gamma_acc, config.eta_acc)


def frontal_camera(mesh: TemplateMesh, config: TrainConfig):
    return mesh.frontal_camera.with_size(config.render_size)


def expression_term(scene: GaussianScene, mesh: TemplateMesh, classifier: ExprClassifier, target: str,
                    config: TrainConfig) -> tuple[LossTerm, float]:
    """Cross-entropy of the frontal render against ``target`` with its splat gradient."""
    cam = frontal_camera(mesh, config)
    image = render(scene, cam, threads=config.threads).pixels
    probs = predict(classifier, image)
    value, d_probs = emotion_loss(probs, target)
    if config.emotion_gradient:
        d_pixels = predict_backward(classifier, image, d_probs)
        grads = render_backward(scene, cam, d_pixels, threads=config.threads)
    else:
        grads = SplatGradients.zeros_like(scene)
    return LossTerm(value, grads), probs[target]


def fit(image_bytes: bytes, config: TrainConfig, out_dir=None, components: Components | None = None,
        resume_from: Checkpoint | None = None) -> FitResult:
    """Optimize a splat scene; deterministic given the config, the image and the components."""
    comp = components or build_components(image_bytes, config)
    mesh = comp.mesh
    config_hash = run_hash(config, image_bytes)
    schedule = make_schedule(config.diffusion_steps, config.beta_start, config.beta_end)
    params = IsmParams((config.t_min, config.t_max), config.stride)
    policy = CameraPolicy.for_mesh(mesh, azimuth_range=(config.azimuth_min, config.azimuth_max),
                                   elevation_range=(config.elevation_min, config.elevation_max),
                                   fov_y=math.radians(config.fov_deg), size=config.render_size)
    c_default = emb.make_default_embedding(comp.identity, config.base_prompt)
    reference = c_default if config.reference_branch == "identity" else None
    hyper = AdamHyper(config.lr, config.beta1, config.beta2, config.adam_eps)
    use_emotion = not config.disable_emotion_loss and config.target_expression is not None

    if resume_from is not None:
        if resume_from.config_hash != config_hash:
            raise CheckpointError("checkpoint was written with a different configuration")
        scene = load_ply(resume_from.scene_ply)
        scene.validate_binding(mesh)
        rng = np.random.default_rng()
        rng.bit_generator.state = resume_from.rng_state
        state = resume_from.adam
        start = resume_from.iteration
    else:
        scene = init_scene(mesh, config.splats_per_vertex, config.seed)
        rng = np.random.default_rng(config.seed)
        state = AdamState.zeros(scene.parameter_count)
        start = 0
    lr_scale = group_lr_scale(config, len(scene))
    out = Path(out_dir) if out_dir is not None else None
    ckpt_dir = out / "checkpoints" if out is not None else None
    result = FitResult(scene)

    def snapshot(it: int) -> Checkpoint:
        return Checkpoint(save_ply(scene), it, config_hash, rng.bit_generator.state, state)

    for it in range(start + 1, config.iterations + 1):
        tick = time.perf_counter()
        try:
            camera = sample_camera(rng, policy)
            cond = conditioning_for(config, c_default, camera.azimuth_label)
            ism_grads, diag = ism_gradient(scene, camera, cond, schedule, comp.denoiser, rng, params,
                                           reference=reference, threads=config.threads)
            pos = pos_loss(scene, mesh)
            lap = laplacian_loss(scene, mesh)
            emotion, p_target = None, None
            if use_emotion and it % config.emotion_every == 0:
                emotion, p_target = expression_term(scene, mesh, comp.classifier, config.target_expression, config)
            report = total_loss(diag, ism_grads, pos, lap, emotion, config.weights)
        except NumericError as exc:
            path = snapshot(it - 1).save(ckpt_dir, "abort") if ckpt_dir is not None else None
            raise TrainingAborted(f"iteration {it}: {exc}", exc.term, it, path) from exc
        with np.errstate(over="ignore", invalid="ignore"):
            new, state = adam_step(scene.flatten(), report.gradients.flatten(), state, hyper, lr_scale)
            scene = scene.unflatten(new)
            scene.normalize_rotations()
            scene = scene.quantized()
        if not np.isfinite(scene.flatten()).all():
            path = snapshot(it).save(ckpt_dir, "abort") if ckpt_dir is not None else None
            raise TrainingAborted(f"iteration {it}: parameters became non-finite", "parameters", it, path)
        record = {"iter": it, "losses": report.to_json(), "grad_norms": report.grad_norms,
                  "camera_label": camera.azimuth_label, "conditioning_tag": cond.tag, "t": diag["t"],
                  "wall_ms": round(1000.0 * (time.perf_counter() - tick), 3) if config.log_timing else None}
        if p_target is not None:
            record["p_target"] = p_target
        result.log.append(record)
        if ckpt_dir is not None and config.checkpoint_every and it % config.checkpoint_every == 0:
            result.checkpoints.append(snapshot(it).save(ckpt_dir))
    result.scene = scene
    if ckpt_dir is not None:
        result.checkpoints.append(snapshot(config.iterations).save(ckpt_dir, "final"))
    return result


def resume(checkpoint: Checkpoint | str | Path, image_bytes: bytes, config: TrainConfig, out_dir=None,
           components: Components | None = None) -> FitResult:
    """Continue a run from ``checkpoint``; the config must hash identically."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
    if ckpt.config_hash != run_hash(config, image_bytes):
        raise CheckpointError("configuration differs from the one that wrote the checkpoint")
    return fit(image_bytes, config, out_dir, components, resume_from=ckpt)


def write_outputs(result: FitResult, out_dir, config_text: str, append_log: bool = False) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "final.ply", save_ply(result.scene))
    lines = "".join(line + "\n" for line in result.log_lines())
    log_path = out / "log.jsonl"
    if append_log and log_path.exists():
        lines = log_path.read_text(encoding="utf-8") + lines
    _atomic_write(log_path, lines.encode())
    _atomic_write(out / "config.resolved.txt", config_text.encode())
