"""Flat ``key = value`` run configuration files mirroring :class:`TrainConfig`."""
from __future__ import annotations

import dataclasses
import difflib
import typing

from .errors import ConfigError
from .trainer import TrainConfig

FIELD_DOCS = {
    "iterations": "number of optimization steps",
    "seed": "seed for camera sampling, timestep sampling and splat initialization",
    "lr": "base Adam learning rate",
    "beta1": "Adam first-moment decay",
    "beta2": "Adam second-moment decay",
    "adam_eps": "Adam denominator epsilon",
    "lr_position": "learning-rate multiplier for splat positions",
    "lr_rotation": "learning-rate multiplier for splat quaternions",
    "lr_scale": "learning-rate multiplier for splat log-scales",
    "lr_opacity": "learning-rate multiplier for opacity logits",
    "lr_color": "learning-rate multiplier for color logits",
    "render_size": "side length in pixels of training renders",
    "t_min": "smallest diffusion timestep sampled for guidance",
    "t_max": "largest diffusion timestep sampled for guidance",
    "stride": "gap between the guidance timestep and its inversion anchor",
    "diffusion_steps": "length of the noise schedule",
    "beta_start": "first beta of the linear noise schedule",
    "beta_end": "last beta of the linear noise schedule",
    "reference_branch": "conditioning of the inversion branch: null or identity",
    "lambda_pos": "weight of the position anchoring loss",
    "lambda_lap": "weight of the Laplacian smoothness loss",
    "lambda_emotion": "weight of the expression cross-entropy",
    "emotion_every": "apply the expression loss on every n-th iteration",
    "emotion_gradient": "backpropagate the expression loss (false logs it only)",
    "target_expression": "target class for the expression loss, or none",
    "base_prompt": "text prompt of the default embedding",
    "view_prompt_front": "prompt blended in for frontal cameras",
    "view_prompt_side": "prompt blended in for side cameras",
    "view_prompt_back": "prompt blended in for rear cameras",
    "expr_prompt": "expression prompt; none falls back to target_expression",
    "acc_prompt": "accessory prompt, or none",
    "b": "weight of the default embedding against the view prompt",
    "gamma_expr": "expression prompt weight in the attribute embedding",
    "gamma_acc": "accessory prompt weight in the attribute embedding",
    "eta_expr": "expression intensity between neutral and target",
    "eta_acc": "accessory intensity between none and target",
    "disable_semantic_embedding": "drop expression and accessory stages from conditioning",
    "disable_emotion_loss": "skip the expression loss entirely",
    "template": "template mesh kind: icosphere or obj_file",
    "template_arg": "icosphere subdivisions, OBJ path, or builtin:face for the four-vertex toy face",
    "splats_per_vertex": "splats initialized around each template vertex",
    "azimuth_min": "lowest sampled camera azimuth in degrees",
    "azimuth_max": "highest sampled camera azimuth in degrees",
    "elevation_min": "lowest sampled camera elevation in degrees",
    "elevation_max": "highest sampled camera elevation in degrees",
    "fov_deg": "vertical field of view of training cameras in degrees",
    "denoiser_dir": "directory of mixture components, or none for the built-in glyph prior",
    "mixture_gamma": "component spread of the built-in glyph prior",
    "classifier_path": "trained classifier file, or none to train one on the fly",
    "classifier_seed": "seed for the on-the-fly classifier",
    "classifier_per_class": "synthetic images per class for the on-the-fly classifier",
    "classifier_epochs": "training epochs for the on-the-fly classifier",
    "checkpoint_every": "write a checkpoint every n iterations (0 disables periodic checkpoints)",
    "log_timing": "record wall-clock milliseconds in the log (breaks byte-identical logs)",
    "threads": "rasterizer worker threads",
}

FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_HINTS = typing.get_type_hints(TrainConfig)


def _kind(name: str) -> tuple[type, bool]:
    hint = _HINTS[name]
    args = typing.get_args(hint)
    if args:
        return next(a for a in args if a is not type(None)), True
    return hint, False


def _parse_value(name: str, text: str, line_no: int):
    kind, optional = _kind(name)
    if optional and text.lower() in ("none", ""):
        return None
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(f"expected true or false, got {text!r}")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"line {line_no}: bad value for {name}: {exc}") from None


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def unknown_key_message(key: str) -> str:
    near = difflib.get_close_matches(key, FIELDS, n=1, cutoff=0.0)
    return f"unknown config key {key!r}" + (f" (did you mean {near[0]!r}?)" if near else "")


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse config text; keys not present keep the values of ``base`` (defaults)."""
    values = dataclasses.asdict(base) if base is not None else {}
    seen = set()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in FIELDS:
            raise ConfigError(f"line {line_no}: {unknown_key_message(key)}")
        if key in seen:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        seen.add(key)
        values[key] = _parse_value(key, value, line_no)
    return TrainConfig(**values)


def serialize_config(config: TrainConfig, comments: bool = True) -> str:
    lines = []
    for name in FIELDS:
        if comments:
            lines.append(f"# {FIELD_DOCS[name]}")
        lines.append(f"{name} = {_format_value(getattr(config, name))}")
    return "\n".join(lines) + "\n"


def load_config(path) -> TrainConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
