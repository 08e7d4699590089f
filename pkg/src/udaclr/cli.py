"""Command-line entry point: ``udaclr {synth,train,eval,ablate}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from udaclr.errors import ValidationError

log = logging.getLogger("udaclr")


def _add_config_args(p, config_flag="--config"):
    p.add_argument(config_flag, dest="config", type=Path, help="JSON file with TrainConfig fields")
    p.add_argument("--preset", choices=["desk", "paper"], default="desk")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded deterministic kernels (also UDACLR_DETERMINISTIC=1)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one TrainConfig field; repeatable")


def build_parser():
    parser = argparse.ArgumentParser(prog="udaclr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic source/target benchmark to disk")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-source", type=int, default=200)
    p.add_argument("--n-target", type=int, default=100)
    p.add_argument("--n-target-test", type=int, default=0,
                   help="labelled held-out target images written to <out>/target_test")
    p.add_argument("--shift-preset", choices=["mild", "strong"], default="strong")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train on a source and a target domain directory")
    _add_config_args(p)
    p.add_argument("--source-dir", type=Path, required=True)
    p.add_argument("--target-dir", type=Path, required=True)
    p.add_argument("--target-test-dir", type=Path, help="labelled target split scored after each epoch")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="score a checkpoint on a labelled domain directory")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threshold", type=float, help="binarisation threshold (default: checkpoint eval_threshold)")
    p.add_argument("--dump-masks", action="store_true")

    p = sub.add_parser("ablate", help="train the regulariser ablation grid over several seeds")
    _add_config_args(p, "--base-config")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", type=int, default=3, help="number of seeds (0..N-1)")
    p.add_argument("--grid", choices=["table2", "table3", "single", "baseline", "all"], default="table2")
    p.add_argument("--data-root", type=Path,
                   help="directory with source/, target/, target_test/; default: synthetic benchmark")
    p.add_argument("--shift-preset", choices=["mild", "strong"], default="strong")
    p.add_argument("--data-seed", type=int, default=0)
    return parser


def _resolve_config(args):
    from udaclr.config import make_config, parse_set

    overrides = parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic or os.environ.get("UDACLR_DETERMINISTIC") == "1":
        overrides["deterministic"] = True
    cfg = make_config(args.preset, args.config, overrides)
    print("resolved config:", cfg.to_json(indent=2, sort_keys=True))
    return cfg


def cmd_synth(args):
    from udaclr.datasets import make_benchmark, save_sample

    if min(args.n_source, args.n_target, args.n_target_test) < 0:
        raise ValidationError("sample counts must be >= 0")
    bench = make_benchmark(args.shift_preset, args.n_source, args.n_target, args.n_target_test,
                           args.size, args.seed)
    for name, samples in (("source", bench.source), ("target", bench.target), ("target_test", bench.target_test)):
        for s in samples:
            save_sample(s, args.out / name)
    n = len(bench.source) + len(bench.target) + len(bench.target_test)
    print(f"wrote {n} samples to {args.out}")
    return 0


def cmd_train(args):
    from udaclr.datasets import load_domain, stack_samples
    from udaclr.reports import training_curves
    from udaclr.trainer import fit

    cfg = _resolve_config(args)
    source = load_domain(args.source_dir, "source", require_masks=True)
    target = load_domain(args.target_dir, "target")
    test = load_domain(args.target_test_dir, "target", require_masks=True) if args.target_test_dir else None
    for s in source + target + (test or []):
        if s.shape != (cfg.input_size, cfg.input_size):
            raise ValidationError(f"{s.id}: image is {s.shape}, config input_size is {cfg.input_size}")
    state, hist = fit(cfg, stack_samples(source), stack_samples(target, use_masks=False),
                      stack_samples(test) if test else None, out_dir=args.out, progress=True)
    training_curves(args.out)
    last = hist[-1]
    if "dice_cup" in last:
        print(f"final target Dice: disc {last['dice_disc']:.4f} cup {last['dice_cup']:.4f}")
    print(f"outputs in {args.out}")
    return 0


def cmd_eval(args):
    from udaclr.datasets import load_domain
    from udaclr.evaluation import evaluate
    from udaclr.trainer import load_checkpoint

    if not args.checkpoint.is_file():
        raise ValidationError(f"checkpoint {args.checkpoint} not found")
    state = load_checkpoint(args.checkpoint)
    data = load_domain(args.data, require_masks=True)
    threshold = args.threshold if args.threshold is not None else state.config.eval_threshold
    res = evaluate(state, data, threshold, out_dir=args.out, dump_masks=args.dump_masks)
    print(f"Dice disc {res.dice_disc:.4f} cup {res.dice_cup:.4f} over {len(res.per_image)} images")
    return 0


def cmd_ablate(args):
    from udaclr.datasets import Benchmark, load_domain, make_benchmark
    from udaclr.evaluation import GRIDS, run_ablation

    cfg = _resolve_config(args)
    if args.seeds < 1:
        raise ValidationError("--seeds must be >= 1")
    if args.data_root:
        r = args.data_root
        data = Benchmark(load_domain(r / "source", "source", True), load_domain(r / "target", "target"),
                         load_domain(r / "target_test", "target", True), preset=str(r))
    else:
        data = make_benchmark(args.shift_preset, size=cfg.input_size, seed=args.data_seed)
    grid = GRIDS["table2"] + GRIDS["table3"][:1] if args.grid == "all" else GRIDS[args.grid]
    run_ablation(cfg, grid, data, seeds=range(args.seeds), out_dir=args.out, progress=True)
    print((args.out / "summary.md").read_text())
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"udaclr {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("udaclr %s failed", args.command)
        print(f"udaclr {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
