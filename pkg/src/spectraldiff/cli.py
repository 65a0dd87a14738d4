"""Command-line entry point: ``spectraldiff <subcommand> [flags]``.

Numeric settings can come from JSON files (``--config`` / ``--model-config``);
explicit flags override file values, which override built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .denoiser import (
    DenoiserConfig,
    CheckpointFormatError,
    init_model,
    load_checkpoint,
    reference_config,
    tiny_config,
    toy_config,
)
from .diffusion import PerturbationMode, cosine_schedule
from .flops import model_report
from .imageio import list_images, load_image, load_paired_dataset, save_image, PairingError
from .masks import BankFormatError, GridSpec, build_bank, load_bank, save_bank
from .metrics import evaluate
from .rain import RainSynthConfig, make_toy_dataset
from .sampler import TrajectoryError, ddim_derain
from .training import NonFiniteLossError, TrainConfig, train_loop

log = logging.getLogger("spectraldiff")

PRESETS = {"toy": toy_config, "tiny": tiny_config, "reference": reference_config}


class CLIError(Exception):
    """Failure reported as a one-line diagnostic with exit code 1."""


def worker_count() -> int:
    cap = os.environ.get("SPECTRALDIFF_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise CLIError(f"SPECTRALDIFF_THREADS must be an integer, got {cap!r}")
    return n


def _read_json(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CLIError(f"{p}: invalid JSON ({exc})")


def _merge(defaults: dict, file_values: dict, flags: dict) -> dict:
    merged = dict(defaults)
    merged.update(file_values)
    merged.update({k: v for k, v in flags.items() if v is not None})
    return merged


def _require_file(path, what):
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"{what} not found: {p}")
    return p


# ------------------------------------------------------------- subcommands


def cmd_make_masks(args) -> None:
    values = _merge({"grid": "full"}, _read_json(args.config), {"grid": args.grid})
    grid = values["grid"]
    if isinstance(grid, dict):
        spec = GridSpec.from_dict(grid)
    elif grid == "full":
        spec = GridSpec.full()
    elif grid == "reduced":
        spec = GridSpec.reduced(n_theta=args.n_theta or 12)
    else:
        raise CLIError(f"unknown grid {grid!r} (use full, reduced or a JSON object)")
    bank = build_bank(args.height, args.width, spec, order=args.order, seed=args.seed)
    save_bank(bank, args.out)
    print(f"wrote {len(bank)} masks ({args.height}x{args.width}) to {args.out}")


def cmd_synth_rain(args) -> None:
    file_values = _read_json(args.config)
    defaults = asdict(RainSynthConfig())
    flags = {
        "layer_count_range": tuple(args.layers) if args.layers else None,
        "gain_range": tuple(args.gains) if args.gains else None,
    }
    values = _merge(defaults, file_values, flags)
    cfg = RainSynthConfig(**{f.name: tuple(values[f.name]) for f in fields(RainSynthConfig)})
    manifest = make_toy_dataset(args.n_pairs, args.height, args.width, args.out_dir, seed=args.seed, cfg=cfg)
    print(f"wrote {manifest['n_pairs']} pairs to {args.out_dir}")


def _model_config(args, num_steps) -> DenoiserConfig:
    base = PRESETS[args.preset](num_steps=num_steps)
    values = _merge(json.loads(base.to_json()), _read_json(args.model_config), {"backbone": args.backbone, "output_head": getattr(args, "head", None)})
    values["num_steps"] = num_steps
    return DenoiserConfig(**values)


def cmd_train(args) -> None:
    bank = load_bank(_require_file(args.bank, "mask bank"))
    file_values = _read_json(args.config)
    flags = {
        "iterations": args.iterations,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "mode": args.mode,
        "noise_scale": args.noise_scale,
        "eval_every": args.eval_every,
        "seed": args.seed,
    }
    values = _merge(TrainConfig().to_dict(), file_values, flags)
    cfg = TrainConfig(**values)
    num_steps = args.num_steps or len(bank)
    if num_steps > len(bank):
        raise CLIError(f"schedule needs {num_steps} masks but {args.bank} holds {len(bank)}")
    model = init_model(_model_config(args, num_steps), seed=cfg.seed)
    data = load_paired_dataset(args.data)
    report = train_loop(
        data.clean,
        data.rainy,
        model,
        cosine_schedule(num_steps),
        bank,
        cfg,
        checkpoint_path=args.out,
        loss_csv=args.loss_csv,
    )
    print(
        f"trained {len(report.losses)} iterations in {report.wall_clock:.1f}s; "
        f"final loss {np.mean(report.losses[-50:]):.5g}; checkpoint {args.out}"
    )


def _derain_one(src: Path, dst: Path, model, bank, schedule, steps, seed):
    rainy = load_image(src)
    if rainy.shape[:2] != (bank.height, bank.width):
        raise CLIError(f"{src}: image is {rainy.shape[0]}x{rainy.shape[1]}, bank is {bank.height}x{bank.width}")
    restored, _ = ddim_derain(rainy, model, bank, schedule, steps, rng=np.random.default_rng(seed))
    save_image(restored, dst)


def cmd_derain(args) -> None:
    model = load_checkpoint(_require_file(args.ckpt, "checkpoint"))
    bank = load_bank(_require_file(args.bank, "mask bank"))
    schedule = cosine_schedule(model.config.num_steps)
    if len(bank) < schedule.num_steps:
        raise CLIError(f"{args.bank} holds {len(bank)} masks, model expects {schedule.num_steps}")
    src = Path(args.input)
    if src.is_dir():
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        files = list_images(src)
        if not files:
            raise CLIError(f"no PNG images in {src}")
        # per-file seeds are fixed up front so results do not depend on scheduling
        seeds = np.random.SeedSequence(args.seed).spawn(len(files))
        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            jobs = [
                pool.submit(_derain_one, f, out_dir / f.name, model, bank, schedule, args.steps, s)
                for f, s in zip(files, seeds)
            ]
            for job in jobs:
                job.result()
        print(f"derained {len(files)} images into {out_dir}")
    else:
        _require_file(src, "input image")
        _derain_one(src, Path(args.out), model, bank, schedule, args.steps, np.random.SeedSequence(args.seed))
        print(f"wrote {args.out}")


def _eval_one(pred: Path, gt: Path):
    a, b = load_image(gt), load_image(pred)
    if a.shape != b.shape:
        raise CLIError(f"{pred.name}: prediction {b.shape} and ground truth {a.shape} differ")
    return evaluate(a, b)


def cmd_eval(args) -> None:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise CLIError(f"directory not found: {d}")
    names = [p.name for p in list_images(pred_dir)]
    missing = [n for n in names if not (gt_dir / n).is_file()]
    if missing:
        raise CLIError(f"no ground truth for {', '.join(missing)} in {gt_dir}")
    if not names:
        raise CLIError(f"no PNG images in {pred_dir}")
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        reports = list(pool.map(lambda n: _eval_one(pred_dir / n, gt_dir / n), names))
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "mse", "psnr_db", "ssim_global", "ssim_windowed"])
        for name, r in zip(names, reports):
            writer.writerow([name, f"{r.mse:.8g}", f"{r.psnr_db:.6f}", f"{r.ssim:.6f}", f"{r.ssim_windowed:.6f}"])
        means = [np.mean([getattr(r, k) for r in reports]) for k in ("mse", "psnr_db", "ssim", "ssim_windowed")]
        writer.writerow(["mean", f"{means[0]:.8g}", f"{means[1]:.6f}", f"{means[2]:.6f}", f"{means[3]:.6f}"])
    print(f"{len(names)} images: PSNR {means[1]:.3f} dB, SSIM {means[2]:.4f} (global) / {means[3]:.4f} (windowed)")


def cmd_flops_report(args) -> None:
    if args.ckpt:
        cfg = load_checkpoint(_require_file(args.ckpt, "checkpoint")).config
    else:
        cfg = _model_config(args, num_steps=1080)
    report = model_report(cfg, args.height, args.width)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    print(report.to_table())


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spectraldiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("make-masks", help="build and save a frequency mask bank")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--grid", help="full | reduced")
    p.add_argument("--n-theta", type=int, help="orientations for the reduced grid")
    p.add_argument("--order", choices=["lexicographic", "shuffled"], default="lexicographic")
    p.add_argument("--config", help="JSON with a 'grid' entry")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_masks)

    p = sub.add_parser("synth-rain", help="write a procedural paired dataset")
    p.add_argument("--n-pairs", type=int, required=True)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--layers", type=int, nargs=2, metavar=("MIN", "MAX"))
    p.add_argument("--gains", type=float, nargs=2, metavar=("MIN", "MAX"))
    p.add_argument("--config", help="JSON with RainSynthConfig fields")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_rain)

    def model_flags(p):
        p.add_argument("--preset", choices=sorted(PRESETS), default="toy")
        p.add_argument("--model-config", help="JSON with DenoiserConfig fields")
        p.add_argument("--backbone", choices=["product", "conv"])
        p.add_argument("--head", choices=["eps", "x0"], help="network output parameterization")

    p = sub.add_parser("train", help="train a denoiser on a paired dataset")
    p.add_argument("--data", required=True, help="directory with clean/ and rainy/")
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="JSON with TrainConfig fields")
    model_flags(p)
    p.add_argument("--num-steps", type=int, help="diffusion steps (default: bank length)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mode", choices=[m.value for m in PerturbationMode])
    p.add_argument("--noise-scale", type=float)
    p.add_argument("--eval-every", type=int, help="iterations between plateau checks")
    p.add_argument("--loss-csv")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("derain", help="derain an image or a directory of images")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_derain)

    p = sub.add_parser("eval", help="PSNR/SSIM of predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops-report", help="per-layer FLOPs for both backbones")
    p.add_argument("--ckpt")
    model_flags(p)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--csv")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_flops_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (CLIError, OSError, BankFormatError, CheckpointFormatError, PairingError) as exc:
        print(f"spectraldiff {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, NonFiniteLossError, TrajectoryError) as exc:
        print(f"spectraldiff {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
