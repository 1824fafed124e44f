"""Command-line interface.

Subcommands: train, encode, decode, eval, ablate, gen. Every tabular output
is CSV; the report path also renders a PNG figure next to each CSV. Exit
codes: 0 success, 2 format error (files, streams, configs), 3 contract error
(bad arguments or call order).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import harness, report
from .config import TrainConfig, load_train_config
from .errors import ContractError, DimensionError, FormatError
from .harness import EvalSettings, TrainSettings
from .model import (
    ablation_labels, init_model, load_checkpoint, save_checkpoint,
)
from .rawvideo import load_raw_video, write_raw_video
from .synthetic import GENERATORS, SequenceSpec, gen_synthetic_sequence
from .training import run_schedule


def _parse_lambda_arg(text: str) -> float:
    """`--lambda-index 2` or `--lambda-index interp=1.5` -> position in [0, 3]."""
    if text.startswith("interp="):
        pos = float(text.split("=", 1)[1])
    else:
        pos = float(int(text))
    if not 0.0 <= pos <= 3.0:
        raise ContractError(f"lambda position {pos} outside [0, 3]")
    return pos


def _load_frames(args) -> np.ndarray:
    if getattr(args, "input", None):
        frames, _ = load_raw_video(args.input, getattr(args, "sidecar", None))
        return frames
    if getattr(args, "generator", None):
        spec = SequenceSpec(width=args.width, height=args.height, frame_count=args.frames)
        return gen_synthetic_sequence(spec, args.generator, args.seed)
    raise ContractError("provide --input or --generator")


def _add_source_args(sub, with_seed_default=0):
    sub.add_argument("--input", help="raw planar RGB8 file (sidecar <file>.meta)")
    sub.add_argument("--sidecar", help="explicit sidecar path")
    sub.add_argument("--generator", choices=GENERATORS, help="synthesize the input instead")
    sub.add_argument("--seed", type=int, default=with_seed_default)
    sub.add_argument("--width", type=int, default=64)
    sub.add_argument("--height", type=int, default=64)
    sub.add_argument("--frames", type=int, default=33)


def cmd_train(args) -> int:
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    model = init_model(cfg.codec, args.seed)
    from .synthetic import default_corpus

    corpus = default_corpus(
        args.seed, count=cfg.settings.corpus_size, width=cfg.settings.width,
        height=cfg.settings.height, frames=cfg.settings.corpus_frames,
    )
    def progress(log):
        print(f"stage {log.stage:2d} epoch {log.epoch}: loss {log.mean_loss:.4f} "
              f"(lr {log.learning_rate:g})")

    logs = run_schedule(model, cfg.schedule(), corpus, args.seed,
                        batch_size=cfg.settings.batch_size, callback=progress)
    save_checkpoint(args.out, model, extra={"seed": args.seed})
    log_path = args.log or str(args.out) + ".stages.csv"
    report.write_csv(log_path, ["stage", "epoch", "mean_loss", "lr"],
                     [(l.stage, l.epoch, l.mean_loss, l.learning_rate) for l in logs])
    report.plot_stage_logs(logs, Path(log_path).with_suffix(".png"))
    print(f"checkpoint written to {args.out}; stage logs in {log_path}")
    return 0


def cmd_encode(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    frames = _load_frames(args)
    lam_pos = _parse_lambda_arg(args.lambda_index)
    result = harness.encode_sequence(model, frames, lam_pos, args.intra_period)
    with open(args.out, "wb") as fh:
        fh.write(result.stream)
    bpp = result.bpp(frames.shape[3], frames.shape[2])
    print(f"{len(frames)} frames -> {len(result.stream)} bytes "
          f"({bpp:.4f} bpp, mean PSNR {result.mean_psnr():.2f} dB)")
    return 0


def cmd_decode(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    with open(args.infile, "rb") as fh:
        data = fh.read()
    frames = harness.decode_sequence(model, data)
    write_raw_video(args.out, frames, fps=args.fps)
    print(f"decoded {frames.shape[0]} frames of {frames.shape[3]}x{frames.shape[2]} to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    frames = _load_frames(args)
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    emit = [name.strip() for name in args.emit.split(",") if name.strip()]
    lam_positions = (0.0, 1.0, 2.0, 3.0)
    for name in emit:
        if name == "rd.csv":
            points = harness.evaluate_rd(model, [frames], lam_positions,
                                         args.intra_period, label="model")
            report.write_csv(outdir / "rd.csv", ["lambda_pos", "bpp", "psnr"],
                             [(p.label.split("@")[1], p.bpp, p.quality) for p in points])
            report.plot_rd_curves({"model": points}, outdir / "rd.png")
            print(f"wrote {outdir / 'rd.csv'} and rd.png")
        elif name == "frames.csv":
            lam_pos = _parse_lambda_arg(args.lambda_index)
            rows = harness.per_frame_rows(model, frames, lam_pos, args.intra_period)
            report.write_csv(outdir / "frames.csv", ["frame", "psnr", "bits"], rows)
            report.plot_frame_curves(rows, outdir / "frames.png")
            print(f"wrote {outdir / 'frames.csv'} and frames.png")
        else:
            raise ContractError(f"unknown --emit artifact {name!r}")
    return 0


def _parse_grid(text: str) -> list:
    labels = ablation_labels()
    if ".." in text:
        lo, hi = text.split("..", 1)
        if lo not in labels or hi not in labels:
            raise ContractError(f"grid bounds must be in {labels}")
        return labels[labels.index(lo):labels.index(hi) + 1]
    picked = [t.strip() for t in text.split(",") if t.strip()]
    for p in picked:
        if p not in labels:
            raise ContractError(f"unknown grid label {p!r}")
    return picked


def cmd_ablate(args) -> int:
    labels = _parse_grid(args.grid)
    seeds = list(range(args.seeds))
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    result = harness.run_ablation(
        labels, seeds,
        TrainSettings(corpus_size=args.corpus_size),
        EvalSettings(sequences=args.eval_sequences),
        progress=lambda msg: print(msg, flush=True),
    )
    rows = [(c.label, c.seed, c.bd_rate) for c in result.cells]
    report.write_csv(outdir / "ablation.csv", ["config", "seed", "bd_rate_vs_m1"], rows)
    medians = [(label, result.median(label)) for label in labels]
    report.write_csv(outdir / "ablation_median.csv", ["config", "median_bd_rate"], medians)
    report.plot_bd_table(medians, outdir / "ablation.png")
    for label, med in medians:
        print(f"{label}: median BD-rate vs m1 = {med:+.2f}%")
    print(f"wrote {outdir / 'ablation.csv'}, ablation_median.csv, ablation.png")
    return 0


def cmd_gen(args) -> int:
    spec = SequenceSpec(width=args.width, height=args.height, frame_count=args.frames)
    options = {}
    if args.shift:
        dx, dy = (int(v) for v in args.shift.split(","))
        options["shift"] = (dx, dy)
    frames = gen_synthetic_sequence(spec, args.generator, args.seed, **options)
    write_raw_video(args.out, frames, fps=args.fps)
    print(f"wrote {args.frames} frames of {args.width}x{args.height} to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxcodec",
        description="Toy conditional learned video codec with confidence-gated "
                    "contexts and reference-adaptive filtering.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("train", help="train a model on the synthetic corpus")
    p.add_argument("--config", help="key-value config file (defaults used when omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="stage-log CSV path (default <out>.stages.csv)")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("encode", help="encode a sequence to a bitstream")
    p.add_argument("--ckpt", required=True)
    _add_source_args(p)
    p.add_argument("--lambda-index", default="3",
                   help="0..3 or interp=<f> for a fractional position")
    p.add_argument("--intra-period", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = subs.add_parser("decode", help="decode a bitstream to raw video")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fps", type=float, default=30.0)
    p.set_defaults(func=cmd_decode)

    p = subs.add_parser("eval", help="rate-distortion and per-frame curves")
    p.add_argument("--ckpt", required=True)
    _add_source_args(p)
    p.add_argument("--lambda-index", default="3")
    p.add_argument("--intra-period", type=int, default=32)
    p.add_argument("--emit", default="rd.csv,frames.csv")
    p.add_argument("--out-dir", default="eval_out")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("ablate", help="train and compare the ablation grid")
    p.add_argument("--grid", default="m1..m8", help="range m1..m8 or a comma list")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds (0..k-1)")
    p.add_argument("--corpus-size", type=int, default=24)
    p.add_argument("--eval-sequences", type=int, default=2)
    p.add_argument("--out-dir", default="ablation_out")
    p.set_defaults(func=cmd_ablate)

    p = subs.add_parser("gen", help="write a synthetic raw sequence")
    p.add_argument("--generator", required=True, choices=GENERATORS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--frames", type=int, default=33)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--shift", help="translate generator shift 'dx,dy'")
    p.set_defaults(func=cmd_gen)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, DimensionError) as exc:
        print(f"contract error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
