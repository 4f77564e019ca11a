"""Command line entry point: ``egdnet <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as configio
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError
from .data import DatasetError, load_dataset, read_ppm, save_dataset, synth_generate, write_dpt, write_ppm
from .metrics import REL_DENOMINATORS
from .model import EGDNet, ModelConfig
from .nn import count_params
from .train import TrainConfig, evaluate, train


def _size(text: str) -> tuple[int, int]:
    """Parse ``WxH`` into (height, width)."""
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got '{text}'") from None
    return h, w


def _load_configs(path) -> tuple[ModelConfig, TrainConfig]:
    return configio.load_sections(path, ModelConfig, TrainConfig)


def cmd_train(args) -> int:
    model_cfg, train_cfg = _load_configs(args.config)
    dataset = list(load_dataset(args.data))
    t0 = time.perf_counter()
    ckpt = train(model_cfg, train_cfg, dataset, out_dir=args.out, deterministic=args.deterministic)
    print(f"trained {ckpt.step} steps in {time.perf_counter() - t0:.1f}s; final checkpoint {Path(args.out) / 'final.egdc'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    report = evaluate(ckpt, list(load_dataset(args.data)), rel_denominator=args.rel_denominator)
    print(report.to_text())
    print(report.to_json())
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint).build_model()
    rgb = read_ppm(args.image)
    cfg = model.config
    if rgb.shape[1:] != (cfg.input_height, cfg.input_width):
        raise ValueError(
            f"{args.image}: image is {rgb.shape[2]}x{rgb.shape[1]}, "
            f"model expects {cfg.input_width}x{cfg.input_height}"
        )
    depth, edge = model.predict(rgb[None])
    write_dpt(args.out, depth[0, 0].astype(np.float32))
    if args.edge:
        write_ppm(args.edge, np.repeat(edge[0], 3, axis=0))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import CASES, run_case, summarize

    names = [args.op] if args.op else sorted(CASES)
    failed = 0
    t0 = time.perf_counter()
    for name in names:
        report = summarize(name, run_case(name, args.instances, args.seed))
        failed += not report.passed
        print(report, flush=True)
    print(f"{len(names) - failed}/{len(names)} cases passed in {time.perf_counter() - t0:.1f}s")
    return 1 if failed else 0


def cmd_params(args) -> int:
    model_cfg = _load_configs(args.config)[0] if args.config else ModelConfig()
    model = EGDNet(model_cfg)
    groups: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        groups[top] = groups.get(top, 0) + p.size
    width = max(len(k) for k in groups)
    for name, n in groups.items():
        print(f"{name:<{width}}  {n:>10,}")
    print(f"{'total':<{width}}  {count_params(model):>10,}")
    return 0


def cmd_synth_gen(args) -> int:
    samples = synth_generate(args.seed, args.count, args.size)
    paths = save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples ({len(paths)} files) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egdnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every training step")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from scratch")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, bitwise reproducible")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rel-denominator", choices=REL_DENOMINATORS, default="ground_truth")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict depth for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="input PPM")
    p.add_argument("--out", required=True, help="output depth file (.dpt)")
    p.add_argument("--edge", help="optional edge probability map (PPM, half resolution)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--op", help="run a single case")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter counts per top-level module")
    p.add_argument("--config", help="config file (defaults when omitted)")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("synth-gen", help="write a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=_size, default=(48, 64), help="WxH, both divisible by 16 (default 64x48)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_gen)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, DatasetError, ValueError, OSError) as exc:
        print(f"egdnet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
