"""``splatexpr`` command line: fit, render, metrics, classifier-train, embed-inspect."""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import embedding, metrics
from .classifier import ExprClassifier, make_synthetic_dataset, train_classifier
from .config import load_config, serialize_config
from .errors import ConfigError, NumericError, SplatExprError
from .rasterizer import png_bytes, read_png, render
from .scene import fitting_distance, load_ply, make_template, orbit_camera
from .trainer import Checkpoint, fit, resume, write_outputs

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
HELP_WIDTH = 88


class _Formatter(argparse.HelpFormatter):
    # a fixed width keeps --help output independent of the terminal
    def __init__(self, prog):
        super().__init__(prog, width=HELP_WIDTH, max_help_position=32)

    def _get_help_string(self, action):
        text = action.help or ""
        if action.default not in (None, False, argparse.SUPPRESS) and not action.required:
            text += " (default: %(default)s)"
        return text


def _fail(message: str, code: int = EXIT_USAGE) -> int:
    print(f"splatexpr: error: {message}", file=sys.stderr)
    return code


def _cmd_fit(args) -> int:
    config = load_config(args.config)
    if args.threads is not None:
        config = config.replace(threads=args.threads)
    image_bytes = Path(args.image).read_bytes()
    out = Path(args.out_dir)
    if args.resume:
        result = resume(Checkpoint.load(args.resume), image_bytes, config, out)
    else:
        result = fit(image_bytes, config, out)
    write_outputs(result, out, serialize_config(config), append_log=bool(args.resume))
    if not args.no_plot:
        from .plotting import plot_losses

        records = [json.loads(line) for line in (out / "log.jsonl").read_text(encoding="utf-8").splitlines()]
        plot_losses(records, out / "loss_curves.png")
    last = result.log[-1] if result.log else {}
    print(json.dumps({"iterations": last.get("iter"), "final_losses": last.get("losses"),
                      "scene": str(out / "final.ply")}, sort_keys=True))
    return EXIT_OK


def _scene_camera(scene, azimuth: float, elevation: float, size: int, fov_deg: float = 40.0):
    if len(scene) == 0:
        center, radius = np.zeros(3), 1.0
    else:
        center = scene.positions.mean(axis=0)
        extent = np.linalg.norm(scene.positions - center, axis=1) + 3.0 * np.exp(scene.log_scales).max(axis=1)
        radius = max(float(extent.max()), 1e-3)
    fov = math.radians(fov_deg)
    return orbit_camera(center, fitting_distance(radius, fov), azimuth, elevation, fov, size)


def _cmd_render(args) -> int:
    scene = load_ply(Path(args.scene).read_bytes())
    camera = _scene_camera(scene, args.azimuth, args.elevation, args.size)
    Path(args.out).write_bytes(png_bytes(render(scene, camera, threads=args.threads).pixels))
    return EXIT_OK


def _images_from(paths, size: int, threads: int) -> list[np.ndarray]:
    images = []
    for p in map(Path, paths):
        if p.is_dir():
            files = sorted(p.glob("*.png")) + sorted(p.glob("*.ply"))
        elif p.exists():
            files = [p]
        else:
            raise FileNotFoundError(f"no such file or directory: {p}")
        for f in files:
            if f.suffix.lower() == ".ply":
                scene = load_ply(f.read_bytes())
                images.append(render(scene, _scene_camera(scene, 0.0, 0.0, size), threads=threads).pixels)
            else:
                images.append(read_png(f))
    return images


def _cmd_metrics(args) -> int:
    report = {"fd": None, "id_mean": None, "nps": None, "pairs": []}
    if args.real or args.fake:
        if not (args.real and args.fake):
            raise ConfigError("--real and --fake must be given together")
        a = _images_from(args.real, args.size, args.threads)
        b = _images_from(args.fake, args.size, args.threads)
        report["fd"] = metrics.frechet_distance(metrics.FeatureStats.from_images(a),
                                                metrics.FeatureStats.from_images(b))
        report["n_real"], report["n_fake"] = len(a), len(b)
    sims = []
    for left, right in args.pair or ():
        (ia,), (ib,) = _images_from([left], args.size, args.threads), _images_from([right], args.size, args.threads)
        sim = metrics.id_similarity(ia, ib)
        sims.append(sim)
        report["pairs"].append({"a": left, "b": right, "id_similarity": sim})
    if sims:
        report["id_mean"] = float(np.mean(sims))
    if args.nps_scene:
        if not args.classifier:
            raise ConfigError("--nps-scene needs --classifier")
        clf = ExprClassifier.from_bytes(Path(args.classifier).read_bytes())
        mesh = make_template(args.template, args.template_arg, size=args.size)
        scores = [metrics.nps(load_ply(Path(p).read_bytes()), clf, mesh, threads=args.threads)
                  for p in args.nps_scene]
        report["nps"] = float(np.mean(scores))
        report["nps_per_scene"] = dict(zip(args.nps_scene, scores))
    text = json.dumps(report, sort_keys=True, indent=2)
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def _cmd_classifier_train(args) -> int:
    rng = np.random.default_rng(args.seed)
    data = make_synthetic_dataset(args.per_class, rng)
    clf = train_classifier(data, args.epochs, rng=rng, seed=args.seed)
    Path(args.out).write_bytes(clf.to_bytes())
    print(json.dumps({"out": args.out, **clf.meta}, sort_keys=True))
    return EXIT_OK


def _cmd_embed_inspect(args) -> int:
    print(json.dumps(embedding.inspect(args.prompts), sort_keys=True, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatexpr", formatter_class=_Formatter,
                                     description="Expression-controlled Gaussian splat avatars on a toy pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, helptext):
        p = sub.add_parser(name, help=helptext, description=helptext, formatter_class=_Formatter)
        p.add_argument("--threads", type=int, default=None if name == "fit" else 1,
                       help="rasterizer worker threads" + (" (overrides the config)" if name == "fit" else ""))
        return p

    p = add("fit", "optimize a splat scene for an input image")
    p.add_argument("--image", required=True, help="input image; its bytes seed the identity embedding")
    p.add_argument("--config", required=True, help="run config file (key = value)")
    p.add_argument("--out-dir", required=True, help="directory for final.ply, log.jsonl and checkpoints/")
    p.add_argument("--resume", default=None, help="checkpoint (.json or .ply) to continue from")
    p.add_argument("--no-plot", action="store_true", help="skip the loss-curve figure")
    p.set_defaults(func=_cmd_fit)

    p = add("render", "render a PLY scene to PNG")
    p.add_argument("--scene", required=True, help="scene PLY file")
    p.add_argument("--azimuth", type=float, default=0.0, help="camera azimuth in degrees")
    p.add_argument("--elevation", type=float, default=0.0, help="camera elevation in degrees")
    p.add_argument("--size", type=int, default=128, help="output side length in pixels")
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(func=_cmd_render)

    p = add("metrics", "Fréchet distance, identity similarity and neutrality score")
    p.add_argument("--report", default=None, help="write the JSON report here as well as to stdout")
    p.add_argument("--real", nargs="+", default=None, help="PNG files, PLY scenes or directories of them")
    p.add_argument("--fake", nargs="+", default=None, help="PNG files, PLY scenes or directories of them")
    p.add_argument("--pair", nargs=2, action="append", metavar=("A", "B"),
                   help="image pair for identity similarity (repeatable)")
    p.add_argument("--nps-scene", nargs="+", default=None, help="PLY scenes scored for neutrality")
    p.add_argument("--classifier", default=None, help="classifier file for the neutrality score")
    p.add_argument("--template", default="icosphere", choices=("icosphere", "obj_file"),
                   help="template whose frontal camera renders NPS scenes")
    p.add_argument("--template-arg", default="2", help="icosphere subdivisions or OBJ path")
    p.add_argument("--size", type=int, default=128, help="render size for PLY inputs")
    p.set_defaults(func=_cmd_metrics)

    p = add("classifier-train", "train the surrogate expression classifier on synthetic glyphs")
    p.add_argument("--out", required=True, help="output weight file")
    p.add_argument("--seed", type=int, default=0, help="seed for data synthesis, split and initialization")
    p.add_argument("--per-class", type=int, default=60, help="synthetic images per class")
    p.add_argument("--epochs", type=int, default=300, help="full-batch training epochs")
    p.set_defaults(func=_cmd_classifier_train)

    p = add("embed-inspect", "show toy text embeddings and their row cosines")
    p.add_argument("--prompts", nargs="+", required=True, help="prompts to encode")
    p.set_defaults(func=_cmd_embed_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        where = getattr(exc, "checkpoint", None)
        extra = f"; state saved to {where}" if where else ""
        return _fail(f"numeric failure in {exc.term or 'training'}: {exc}{extra}", EXIT_NUMERIC)
    except (SplatExprError, OSError, ValueError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
