"""Command-line interface: gen-data, train-tracker, train-refiner, infer,
evaluate, gradcheck. VIDSEG_LOG controls log verbosity (debug/info/warning).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import TrainConfig


def _setup_logging() -> None:
    level = os.environ.get("VIDSEG_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", type=Path, default=None)


def main(argv=None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(prog="vidseg")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic video dataset")
    _add_common(p)
    p.add_argument("--videos", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--objects", type=int, default=None)
    p.add_argument("--occlusion-rate", type=float, default=None)
    p.add_argument("--swap-hazard-rate", type=float, default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--permute", action="store_true", default=None)

    for stage in ("tracker", "refiner"):
        p = sub.add_parser(f"train-{stage}", help=f"train the {stage} stage")
        _add_common(p)
        p.add_argument("--dataset", type=Path, default=None)
        p.add_argument("--iterations", type=int, default=None)
        p.add_argument("--clip-length", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--noise-strategy", default=None)
        p.add_argument("--noise-probability", type=float, default=None)
        if stage == "refiner":
            p.add_argument("--tracker-checkpoint", type=Path, default=None)

    p = sub.add_parser("infer", help="run inference on one dataset video")
    _add_common(p)
    p.add_argument("--video", type=Path, required=True)
    p.add_argument("--tracker", type=Path, required=True)
    p.add_argument("--refiner", type=Path, default=None)
    p.add_argument("--mode", choices=("online", "offline"), default="online")

    p = sub.add_parser("evaluate", help="score a prediction file against its dataset")
    _add_common(p)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--metrics", default="ap,vpq,mvc,miou")

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p)
    p.add_argument("--scope", choices=("ops", "blocks", "losses", "all"), default="all")
    p.add_argument("--points", type=int, default=3)
    p.add_argument("--tolerance", type=float, default=1e-4)

    args = parser.parse_args(argv)
    return _dispatch(args)


def _dispatch(args) -> int:
    if args.command == "gen-data":
        return _cmd_gen_data(args)
    if args.command in ("train-tracker", "train-refiner"):
        return _cmd_train(args)
    if args.command == "infer":
        return _cmd_infer(args)
    if args.command == "evaluate":
        return _cmd_evaluate(args)
    if args.command == "gradcheck":
        return _cmd_gradcheck(args)
    raise AssertionError(args.command)


def _cmd_gen_data(args) -> int:
    from .fileio import write_video
    from .scene import SceneConfig, generate_video

    base = {}
    videos = 10
    if args.config:
        with open(args.config) as f:
            data = json.load(f)
        base = data.get("scene", {})
        videos = data.get("videos", videos)
    if args.videos is not None:
        videos = args.videos
    overrides = {
        "frames": args.frames,
        "object_count": args.objects,
        "occlusion_rate": args.occlusion_rate,
        "swap_hazard_rate": args.swap_hazard_rate,
        "query_noise_sigma": args.sigma,
        "permute_queries": args.permute,
    }
    for k, v in overrides.items():
        if v is not None:
            base[k] = v
    seed = args.seed if args.seed is not None else base.get("seed", 0)
    out = args.out or Path("dataset")
    out.mkdir(parents=True, exist_ok=True)
    for i in range(videos):
        cfg = SceneConfig(**{**base, "seed": seed + i})
        video = generate_video(cfg)
        write_video(out / f"video_{i:04d}.vseg", video)
    print(f"wrote {videos} videos to {out}")
    return 0


def _cmd_train(args) -> int:
    from .train import train_refiner, train_tracker

    stage = args.command.removeprefix("train-")
    overrides = {
        "seed": args.seed,
        "dataset_dir": str(args.dataset) if args.dataset else None,
        "out_checkpoint": str(args.out) if args.out else None,
        "iterations": args.iterations,
        "clip_length": args.clip_length,
        "learning_rate": args.lr,
        "noise_strategy": args.noise_strategy,
        "noise_probability": args.noise_probability,
    }
    if stage == "refiner" and args.tracker_checkpoint:
        overrides["tracker_checkpoint"] = str(args.tracker_checkpoint)
    if args.config:
        config = TrainConfig.from_file(args.config, overrides)
    else:
        required = {"dataset_dir", "out_checkpoint"}
        missing = [k for k in required if not overrides.get(k)]
        if missing:
            print(f"missing required flags without --config: {missing}", file=sys.stderr)
            return 2
        data = {k: v for k, v in overrides.items() if v is not None and not k.startswith("noise_")}
        noise = {
            k.removeprefix("noise_"): v
            for k, v in overrides.items()
            if k.startswith("noise_") and v is not None
        }
        config = TrainConfig(stage=stage, noise=_noise_from(noise), **data)
    if config.stage != stage:
        print(f"config stage {config.stage!r} does not match command", file=sys.stderr)
        return 2
    if stage == "tracker":
        _, history = train_tracker(config)
    else:
        _, history = train_refiner(config)
    print(f"trained {stage}: {config.iterations} iterations -> {config.out_checkpoint}")
    if history:
        print(f"final loss {history[-1]['loss']:.4f}")
    return 0


def _noise_from(noise: dict):
    from .noiser import NoiseConfig

    return NoiseConfig(**noise) if noise else NoiseConfig()


def _cmd_infer(args) -> int:
    from .inference import infer_to_file

    out = args.out or Path(str(args.video) + ".pred")
    infer_to_file(args.video, out, args.tracker, args.refiner, args.mode)
    print(f"wrote predictions to {out}")
    return 0


def _cmd_evaluate(args) -> int:
    from .inference import evaluate_files

    names = tuple(x.strip() for x in args.metrics.split(",") if x.strip())
    report = evaluate_files(args.pred, args.dataset, names)
    blob = json.dumps(report, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(blob + "\n")
        print(f"wrote report to {args.out}")
    else:
        print(blob)
    return 0


def _cmd_gradcheck(args) -> int:
    from .checks import run_suite

    seed = args.seed if args.seed is not None else 0
    results = run_suite(args.scope, points=args.points, tolerance=args.tolerance, seed=seed)
    width = max(len(r.name) for r in results)
    failures = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.scope:8s} {r.name:{width}s} max_err={r.max_error:.3e} {status}")
        failures += 0 if r.passed else 1
    print(f"{len(results) - failures}/{len(results)} checks passed")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
