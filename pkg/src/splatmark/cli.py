"""Command-line entry point.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import geometry as geo
from .gauss2d import FittingError, OptimizerConfig, fit, init_scene, rasterize, save_scene
from .io import read_image, read_key, read_transform, write_image, write_key, write_latent, write_png
from .metrics import psnr, write_metric_csv
from .pipeline import NumericalError, RemovalConfig, TrialConfig, run_detection_sweep, run_removal_pipeline
from .report import emit_removal, emit_report
from .spectral import LatentGrid, SymmetryError, decide, detection_distance, embed_key, make_ring_mask, sample_key
from .surrogate import SurrogateConfig, decode_upsample, encode_downsample

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return data


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print(obj) -> None:
    print(json.dumps(obj, indent=1))


def _as_latent(arr: np.ndarray, mask_hw, scale: float, sur: SurrogateConfig) -> LatentGrid:
    """Arrays already at latent size pass through; images are encoded."""
    if arr.shape[-2:] == tuple(mask_hw):
        return LatentGrid(arr)
    return encode_downsample((arr - 0.5) / scale, sur)


def cmd_embed(args) -> int:
    cfg = _load_config(args.config)
    sur = SurrogateConfig(int(cfg.get("stride", args.stride)))
    arr = read_image(args.input)
    if Path(args.input).suffix.lower() == ".gml":
        z = LatentGrid(arr)
    else:
        z = encode_downsample((arr - 0.5) / args.display_scale, sur)
    mask = make_ring_mask(z.width, z.height, args.r_min, args.r_max, args.channel)
    key = sample_key(mask, args.key_seed if args.key_seed is not None else args.seed)
    zw = embed_key(z, mask, key, args.mode)
    out = _out_dir(args)
    write_latent(out / "watermarked_latent.gml", zw)
    img = 0.5 + args.display_scale * decode_upsample(zw, sur)
    write_png(out / "watermarked.png", img)
    write_latent(out / "watermarked_image.gml", img)
    write_key(out / "key.json", mask, key)
    _print({"latent": str(out / "watermarked_latent.gml"), "image": str(out / "watermarked.png"),
            "key": str(out / "key.json"), "mask_size": len(mask)})
    return EXIT_OK


def cmd_attack(args) -> int:
    img = read_image(args.input)
    if args.transform:
        t = read_transform(args.transform)
    else:
        t = geo.GeometricTransform(args.translation_x_px, args.translation_y_px, args.rotation_deg, args.scale)
    out_img = geo.apply_transform(img, t, pad_source=img)
    out = _out_dir(args)
    path = write_image(out / f"attacked{Path(args.input).suffix.lower() or '.png'}", out_img)
    _print({"output": str(path), "transform": t.to_json()})
    return EXIT_OK


def cmd_detect(args) -> int:
    mask, key = read_key(args.key)
    sur = SurrogateConfig(args.stride)
    z = _as_latent(read_image(args.input), (mask.height, mask.width), args.display_scale, sur)
    d = detection_distance(z, mask, key, complex_form=args.complex)
    res = decide(d, args.tau)
    _print({"distance": res.distance, "detected": res.verdict, "tau": res.threshold})
    return EXIT_OK


def cmd_sweep(args) -> int:
    data = _load_config(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    cfg = TrialConfig.from_dict(data)
    report = run_detection_sweep(cfg, threads=args.threads)
    out = _out_dir(args)
    paths = emit_report(report, out, svg=not args.no_svg, png=not args.no_png)
    (out / "sweep_config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
    _print({k: str(v) for k, v in paths.items()})
    return EXIT_OK


def cmd_fit(args) -> int:
    target = read_image(args.input)
    if target.shape[0] != 3:
        raise UsageError(f"{args.input}: fitting needs a 3-channel image, got {target.shape[0]}")
    _, h, w = target.shape
    scene = init_scene(h, w, args.patch_size, args.margin, args.n_patch, seed=args.seed or 0)
    fitted, trace = fit(scene, target, OptimizerConfig(lr=args.lr), args.iterations)
    out = _out_dir(args)
    save_scene(fitted, out / "scene.gms")
    write_metric_csv(out / "loss.csv", [(i, "loss", v) for i, v in enumerate(trace)])
    render = rasterize(fitted)
    write_png(out / "render.png", render)
    _print({"scene": str(out / "scene.gms"), "psnr_db": psnr(np.clip(render, 0, 1), np.clip(target, 0, 1)),
            "final_loss": trace[-1]})
    return EXIT_OK


def cmd_remove(args) -> int:
    cfg = RemovalConfig.from_dict(_load_config(args.config))
    image = read_image(args.input) if args.input else None
    t = read_transform(args.transform) if args.transform else None
    report = run_removal_pipeline(cfg, seed=args.seed or 0, image=image, transform=t)
    paths = emit_removal(report, _out_dir(args), png=not args.no_png)
    _print({"report": report.summary(), "files": {k: str(v) for k, v in paths.items()}})
    return EXIT_OK


def cmd_predict(args) -> int:
    p = geo.predict(args.translation_px, args.rotation_deg, args.r_max, args.stride, args.latent_width,
                    args.coherence)
    _print({"translation_px": args.translation_px, "rotation_deg": args.rotation_deg, **p.as_dict()})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    parser = _Parser(prog="splatmark", description="Latent watermark geometry lab", parents=[common])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("embed", parents=[common], help="watermark a latent (.gml) or image (.png)")
    p.add_argument("input")
    p.add_argument("--r-min", type=float, default=4.0)
    p.add_argument("--r-max", type=float, default=16.0)
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--key-seed", type=int, default=None)
    p.add_argument("--mode", choices=("real", "replace"), default="real")
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--display-scale", type=float, default=0.15)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("attack", parents=[common], help="apply a geometric transform to an image")
    p.add_argument("input")
    p.add_argument("--transform", help="transform JSON (translation_x_px, translation_y_px, rotation_deg, scale)")
    p.add_argument("--translation-x-px", type=float, default=0.0)
    p.add_argument("--translation-y-px", type=float, default=0.0)
    p.add_argument("--rotation-deg", type=float, default=0.0)
    p.add_argument("--scale", type=float, default=1.0)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("detect", parents=[common], help="detection distance against a key")
    p.add_argument("input")
    p.add_argument("--key", required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--display-scale", type=float, default=0.15)
    p.add_argument("--complex", action="store_true", help="use the complex residual")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("sweep", parents=[common], help="Monte-Carlo attack sweep to CSV/SVG/PNG")
    p.add_argument("--no-svg", action="store_true")
    p.add_argument("--no-png", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fit", parents=[common], help="fit a Gaussian scene to an image")
    p.add_argument("input")
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--margin", type=int, default=2)
    p.add_argument("--n-patch", type=int, default=64)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("remove", parents=[common], help="Gaussian re-render removal run")
    p.add_argument("input", nargs="?", help="RGB image; omitted means a random latent")
    p.add_argument("--transform", help="fixed transform JSON instead of a sampled one")
    p.add_argument("--no-png", action="store_true")
    p.set_defaults(func=cmd_remove)

    p = sub.add_parser("predict", parents=[common], help="closed-form phase predictions")
    p.add_argument("--translation-px", type=float, required=True)
    p.add_argument("--rotation-deg", type=float, default=0.0)
    p.add_argument("--r-max", type=float, default=16.0)
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--latent-width", type=int, default=64)
    p.add_argument("--coherence", type=float, default=1.0)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for name, default in (("seed", None), ("threads", 1), ("config", None), ("out", ".")):
            if not hasattr(args, name):
                setattr(args, name, default)
        if args.command is None:
            raise UsageError("a subcommand is required (embed, attack, detect, sweep, fit, remove, predict)")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FittingError, SymmetryError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
