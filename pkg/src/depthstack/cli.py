"""Command-line entry point: ``depthstack <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (divergence or a failed self-check).
"""

from __future__ import annotations

import argparse
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .augment import AugmentError, augment
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import DataError, Manifest, load_samples, mean_depth_baseline, save_depth, save_rgb
from .depthmap import EmptyMaskError
from .evaluation import (EvalProtocol, MapPredictor, NetworkPredictor, ScaledPredictor, compare_methods,
                         comparison_csv, evaluate_dataset, upsample_nearest)
from .autodiff import NonFiniteError
from .netpbm import FormatError, to_gray8, write as write_pnm
from .selfcheck import run_selfcheck
from .synthetic import generate_synthetic_dataset, sample_seed
from .training import DivergenceError, downsample_nearest, train_two_stage

log = logging.getLogger("depthstack")

OUT_ENV = "DEPTHSTACK_OUT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(message)


def _default_out() -> str:
    return os.environ.get(OUT_ENV, "runs")


def _common(p: argparse.ArgumentParser, config: bool = False) -> None:
    p.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ENV}/<subcommand> or runs/<subcommand>)")
    p.add_argument("--seed", type=int, default=None, help="random seed (default: config value, else 0)")
    p.add_argument("--workers", type=int, default=None, help="worker threads for augmentation/evaluation")
    if config:
        p.add_argument("--config", default=None, help="key = value config file with [spec]/[train]/[augment]")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="depthstack", description="Multi-scale monocular depth prediction toolkit.")
    parser.add_argument("--version", action="version", version=f"depthstack {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic box-world dataset")
    _common(p)
    p.add_argument("--scenes", type=int, default=500)
    p.add_argument("--frames", type=int, default=4, help="frames per scene")
    p.add_argument("--width", type=int, default=76, help="frame width (default matches the desk spec)")
    p.add_argument("--height", type=int, default=57)
    p.add_argument("--test-fraction", type=float, default=0.2)

    p = sub.add_parser("train", help="two-stage training (coarse, then fine)")
    _common(p, config=True)
    p.add_argument("--train", required=True, help="training manifest (.tsv)")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--coarse-samples", type=int, default=None)
    p.add_argument("--fine-samples", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--no-augment", action="store_true")

    p = sub.add_parser("predict", help="write predicted depth maps")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--stage", choices=("coarse", "fine"), default="fine")

    p = sub.add_parser("evaluate", help="score one model stage on a manifest")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--stage", choices=("coarse", "fine"), default="fine")
    p.add_argument("--mode", choices=("upsample", "downsample"), default="upsample")
    p.add_argument("--dump", type=int, default=0, help="write PGM (input, coarse, fine, gt) quadruples for N images")

    p = sub.add_parser("compare", help="mean baseline vs coarse vs coarse+fine on a common region")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--train", required=True, help="training manifest for the mean-depth baseline")
    p.add_argument("--scaled", type=float, default=None, help="also score the coarse+fine output times this factor")

    p = sub.add_parser("augment-preview", help="write augmented training pairs")
    _common(p, config=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--count", type=int, default=8)

    p = sub.add_parser("selfcheck", help="gradient checks and loss-form agreement")
    _common(p)

    p = sub.add_parser("dump-weights", help="coarse output-layer templates as PGM images")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--top", type=int, default=16)
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else Path(_default_out()) / args.command
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _run_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    cfg.override("train", "seed", args.seed)
    cfg.override("train", "workers", args.workers)
    for key in ("lr", "batch_size", "coarse_samples", "fine_samples", "checkpoint_every"):
        cfg.override("train", key, getattr(args, key, None))
    if getattr(args, "no_augment", False):
        cfg.override("augment", "enabled", "false")
    return cfg


def _write_run_txt(out: Path, args, cfg: RunConfig | None, seed: int) -> None:
    lines = [f"command = {args.command}",
             "argv = " + " ".join(sys.argv[1:] if args.argv is None else args.argv),
             f"seed = {seed}",
             f"depthstack = {__version__}", f"numpy = {np.__version__}",
             f"python = {platform.python_version()}"]
    if cfg is not None:
        lines.append(f"config_sha256 = {cfg.digest()}")
        lines.append("")
        lines.append(cfg.resolved_text().rstrip("\n"))
    (out / "run.txt").write_text("\n".join(lines) + "\n")


def _load(manifest_path: str, drop_extremes: bool = False):
    manifest = Manifest.read(manifest_path)
    samples, _ = load_samples(manifest, drop_extremes)
    if not samples:
        raise DataError(f"no usable samples in {manifest_path}")
    return manifest, samples


def _network(args):
    try:
        spec, coarse, fine = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {args.checkpoint}") from exc
    return spec, coarse, fine


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = _out_dir(args)
    seed = _seed(args)
    train, test = generate_synthetic_dataset(out, args.scenes, args.frames, seed, args.width, args.height,
                                             args.test_fraction)
    _write_run_txt(out, args, None, seed)
    print(f"wrote {len(train)} train and {len(test)} test frames to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    manifest, samples = _load(args.train, drop_extremes=True)
    out = _out_dir(args)
    config = cfg.train_config(manifest.rgb_mean)
    spec = cfg.spec()
    small = [s.id for s in samples if s.depth.height < spec.input_height or s.depth.width < spec.input_width]
    if small:
        raise DataError(f"{len(small)} frames (e.g. {small[0]}) are smaller than the {spec.input_width}x"
                        f"{spec.input_height} network input; set input_width/input_height in [spec]")
    _write_run_txt(out, args, cfg, config.seed)
    result = train_two_stage(spec, samples, config, out)
    last = {phase: loss for _, phase, loss in result.losses}
    print(f"final coarse loss {last['coarse']:.5f}, fine loss {last['fine']:.5f}; checkpoints in {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    spec, coarse, fine = _network(args)
    manifest, samples = _load(args.manifest)
    out = _out_dir(args)
    _write_run_txt(out, args, None, _seed(args))
    pred = NetworkPredictor(coarse, fine if args.stage == "fine" else None, manifest.rgb_mean)
    (out / "depth").mkdir(exist_ok=True)
    for s, p in zip(samples, pred.predict(samples)):
        save_depth(out / "depth" / f"{s.id}.pgm", p)
    print(f"wrote {len(samples)} {args.stage} predictions ({spec.output_width}x{spec.output_height}) to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    spec, coarse, fine = _network(args)
    manifest, samples = _load(args.manifest)
    out = _out_dir(args)
    _write_run_txt(out, args, None, _seed(args))
    pred = NetworkPredictor(coarse, fine if args.stage == "fine" else None, manifest.rgb_mean)
    result = evaluate_dataset(pred, samples, EvalProtocol(args.mode, args.workers or 1))
    (out / "report.csv").write_text(result.report.to_csv())
    (out / "images.csv").write_text(result.images_csv())
    if args.dump:
        _dump_quadruples(out / "gallery", samples, result, coarse, fine, manifest.rgb_mean, args.dump)
    r = result.report
    print(f"{args.stage}: si_rmse_log {r.si_rmse_log:.4f} rmse_log {r.rmse_log:.4f} delta1 {r.delta1:.4f} "
          f"({r.n_images} images, {len(result.skipped)} skipped)")
    return EXIT_OK


def _dump_quadruples(out: Path, samples, result, coarse, fine, rgb_mean, count: int) -> None:
    """Best-to-worst gallery: <rank>_<id>_{a_input,b_coarse,c_fine,d_gt}.pgm, shared log-depth scale."""
    out.mkdir(exist_ok=True)
    by_id = {s.id: s for s in samples}
    picked = [by_id[r.id] for r in result.rows[:count]]
    c_pred = NetworkPredictor(coarse, None, rgb_mean).predict(picked)
    f_pred = NetworkPredictor(coarse, fine, rgb_mean).predict(picked)
    region = NetworkPredictor(coarse).region(*picked[0].depth.shape)
    for rank, (s, c, f) in enumerate(zip(picked, c_pred, f_pred)):
        gt = s.depth.crop(region.top, region.left, region.height, region.width)
        maps = [upsample_nearest(m, region.height, region.width).log_depth() for m in (c, f)]
        lo = min(m.min() for m in maps)
        hi = max(m.max() for m in maps)
        if gt.n_valid:
            lo, hi = min(lo, gt.log_depth()[gt.mask].min()), max(hi, gt.log_depth()[gt.mask].max())
        stem = f"{rank:03d}_{s.id}"
        gray = s.rgb[region.top:region.bottom, region.left:region.right].mean(axis=2)
        write_pnm(out / f"{stem}_a_input.pgm", to_gray8(gray, 0.0, 1.0))
        write_pnm(out / f"{stem}_b_coarse.pgm", to_gray8(maps[0], lo, hi))
        write_pnm(out / f"{stem}_c_fine.pgm", to_gray8(maps[1], lo, hi))
        write_pnm(out / f"{stem}_d_gt.pgm", to_gray8(np.where(gt.mask, gt.log_depth(), lo), lo, hi))


def cmd_compare(args) -> int:
    spec, coarse, fine = _network(args)
    manifest, samples = _load(args.manifest)
    _, train = _load(args.train, drop_extremes=True)
    out = _out_dir(args)
    _write_run_txt(out, args, None, _seed(args))
    h, w = spec.output_height, spec.output_width
    base = mean_depth_baseline([downsample_nearest(s.depth, h, w) for s in train])
    methods = [MapPredictor(base, spec.input_height, spec.input_width, "mean"),
               NetworkPredictor(coarse, None, manifest.rgb_mean),
               NetworkPredictor(coarse, fine, manifest.rgb_mean)]
    if args.scaled is not None:
        methods.append(ScaledPredictor(methods[-1], args.scaled))
    table = compare_methods(methods, samples, EvalProtocol(workers=args.workers or 1))
    text = comparison_csv(table)
    (out / "comparison.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    cfg = _run_config(args)
    manifest, samples = _load(args.manifest)
    out = _out_dir(args)
    seed = _seed(args)
    _write_run_txt(out, args, cfg, seed)
    params = cfg.augment_params()
    if params is None:
        raise ConfigError("augmentation is disabled in the configuration")
    for k, s in enumerate(samples[:args.count]):
        a = augment(s, params, np.random.default_rng(sample_seed(seed, s.id, 0)))
        save_rgb(out / f"{s.id}_aug.ppm", np.clip(a.rgb, 0.0, 1.0))
        save_depth(out / f"{s.id}_aug.pgm", a.depth)
    print(f"wrote {min(args.count, len(samples))} augmented pairs to {out}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    result = run_selfcheck(_seed(args))
    for line in result.lines():
        print(line)
    return EXIT_OK if result.ok else EXIT_NUMERIC


def cmd_dump_weights(args) -> int:
    spec, coarse, _ = _network(args)
    out = _out_dir(args)
    _write_run_txt(out, args, None, _seed(args))
    templates = coarse.output_weight_templates()[:args.top]
    for k, t in enumerate(templates):
        # symmetric range so zero maps to mid-gray
        m = float(np.abs(t).max()) or 1.0
        write_pnm(out / f"template_{k:03d}.pgm", to_gray8(t, -m, m))
    print(f"wrote {len(templates)} templates ({spec.output_width}x{spec.output_height}) to {out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "predict": cmd_predict, "evaluate": cmd_evaluate,
    "compare": cmd_compare, "augment-preview": cmd_augment_preview, "selfcheck": cmd_selfcheck,
    "dump-weights": cmd_dump_weights,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"depthstack: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    args.argv = None if argv is None else list(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"depthstack: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, CheckpointError, AugmentError, EmptyMaskError, OSError) as exc:
        print(f"depthstack: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, NonFiniteError) as exc:
        print(f"depthstack: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
