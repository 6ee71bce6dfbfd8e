"""Command-line surface: train, generate, bench, analyze.

Exit codes: 0 success, 2 usage/config error, 3 numeric failure. The
HISTREAM_THREADS env var caps BLAS parallelism (default 1 so timings and
bit-equality checks are reproducible).
"""

from __future__ import annotations

import argparse
import os
import sys

from . import analysis, config, report
from .engine import GenerationRequest, export_frames, generate
from .errors import ConfigError, ContractError, NumericError, TensorIOError
from .model import Denoiser
from .training import train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="histream",
                                     description="Streaming autoregressive diffusion engine (toy scale)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train the toy denoiser on synthetic videos")
    p_train.add_argument("--config", required=True, help="JSON config file")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--out", required=True, help="output directory (checkpoint + loss.csv)")

    p_gen = sub.add_parser("generate", help="run autoregressive generation")
    p_gen.add_argument("--ckpt", required=True, help="checkpoint directory")
    p_gen.add_argument("--mode", required=True)
    p_gen.add_argument("--chunks", type=int, required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--shift", type=float, default=7.0)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--export", choices=("hstn", "pgm"), default="hstn")

    p_bench = sub.add_parser("bench", help="per-chunk latency/FLOP comparison across modes")
    p_bench.add_argument("--ckpt", required=True)
    p_bench.add_argument("--modes", required=True, help="comma-separated mode list")
    p_bench.add_argument("--chunks", type=int, default=7)
    p_bench.add_argument("--repeats", type=int, default=3)
    p_bench.add_argument("--shift", type=float, default=7.0)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--out", required=True)

    p_an = sub.add_parser("analyze", help="attention-sink stats or frame-drop ablation")
    p_an.add_argument("--ckpt", required=True)
    group = p_an.add_mutually_exclusive_group(required=True)
    group.add_argument("--attn", action="store_true")
    group.add_argument("--drop", help="comma-separated retention masks")
    p_an.add_argument("--mode", default="no_agsw", help="generation mode for --attn (needs full history)")
    p_an.add_argument("--chunks", type=int, default=4)
    p_an.add_argument("--shift", type=float, default=7.0)
    p_an.add_argument("--seed", type=int, default=0)
    p_an.add_argument("--out", required=True)
    return parser


def _cmd_train(args) -> int:
    cfg = config.load_config(args.config)
    model = Denoiser.init(cfg.model, seed=args.seed)
    result = train(model, cfg.train, cfg.video, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    ckpt_dir = os.path.join(args.out, "checkpoint")
    model.save(ckpt_dir)
    report.write_csv(os.path.join(args.out, "loss.csv"), result.csv_rows(),
                     fields=("step", "loss", "ema_loss"))
    print(f"trained {cfg.train.steps} steps: loss {result.losses[0]:.5f} -> {result.losses[-1]:.5f} "
          f"(ema {result.ema[-1]:.5f})")
    print(f"checkpoint: {ckpt_dir}")
    return EXIT_OK


def _cmd_generate(args) -> int:
    model = Denoiser.load(args.ckpt)
    req = GenerationRequest(mode=args.mode, n_chunks=args.chunks, seed=args.seed, shift=args.shift)
    result = generate(model, req)
    os.makedirs(args.out, exist_ok=True)
    export_frames(result, os.path.join(args.out, "frames"), fmt=args.export)
    with open(os.path.join(args.out, "run_report.txt"), "w") as fh:
        fh.write(result.report.to_text() + "\n")
    report.write_csv(os.path.join(args.out, "run_report.csv"), result.report.csv_rows())
    print(result.report.to_text())
    return EXIT_OK


def _cmd_bench(args) -> int:
    model = Denoiser.load(args.ckpt)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    if not modes:
        raise ConfigError("--modes must name at least one mode")
    result = analysis.bench(model, modes, n_chunks=args.chunks, repeats=args.repeats,
                            seed=args.seed, shift=args.shift)
    os.makedirs(args.out, exist_ok=True)
    report.write_csv(os.path.join(args.out, "bench.csv"), result.rows)
    print(result.table)
    return EXIT_OK


def _cmd_analyze(args) -> int:
    model = Denoiser.load(args.ckpt)
    os.makedirs(args.out, exist_ok=True)
    if args.attn:
        stats = analysis.attn_sink_stats(model, n_chunks=args.chunks, seed=args.seed,
                                         shift=args.shift, mode=args.mode)
        report.write_csv(os.path.join(args.out, "attn.csv"), stats.csv_rows(),
                         fields=analysis.ATTN_CSV_FIELDS)
        print("context frames ranked by mean attention mass:")
        for frame, mass in stats.rank_frames():
            print(f"  frame {frame}: {mass:.6f}")
    else:
        masks = [m.strip() for m in args.drop.split(",") if m.strip()]
        if not masks:
            raise ConfigError("--drop must name at least one mask")
        rows, _base, _runs = analysis.frame_drop_ablation(model, seed=args.seed, masks=masks,
                                                          n_chunks=args.chunks, shift=args.shift)
        out_rows = [{**r, "mse": f"{r['mse']:.10f}"} for r in rows]
        report.write_csv(os.path.join(args.out, "drop.csv"), out_rows,
                         fields=analysis.DROP_CSV_FIELDS)
        for row in out_rows:
            print(f"mask {row['mask_id']} chunk {row['chunk']}: mse {row['mse']}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    limit = int(os.environ.get("HISTREAM_THREADS", "1"))
    try:
        import threadpoolctl

        ctl = threadpoolctl.threadpool_limits(limits=limit)
    except ImportError:  # pragma: no cover - threadpoolctl ships with the package deps
        ctl = None
    try:
        handler = {"train": _cmd_train, "generate": _cmd_generate,
                   "bench": _cmd_bench, "analyze": _cmd_analyze}[args.command]
        return handler(args)
    except (ConfigError, ContractError, TensorIOError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if ctl is not None:
            ctl.unregister()


if __name__ == "__main__":
    sys.exit(main())
