"""Train the component ablation (and the UGNA pair) on the synthetic benchmark.

    python scripts/run_ablation.py --out runs/ablation --seeds 3
    python scripts/run_ablation.py --out runs/ugna --grid table3 --set dropout=0.5
"""

import argparse
import logging
from pathlib import Path

from udaclr.config import make_config, parse_set
from udaclr.datasets import make_benchmark
from udaclr.evaluation import GRIDS, run_ablation, write_ablation_report


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--grid", choices=sorted(GRIDS), default="table2")
    ap.add_argument("--shift-preset", default="strong")
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = make_config("desk", overrides=parse_set(args.set))
    data = make_benchmark(args.shift_preset, size=cfg.input_size)
    records = run_ablation(cfg, GRIDS[args.grid], data, seeds=range(args.seeds), out_dir=args.out, progress=True)
    table = write_ablation_report(records, args.out)
    base = table.get("baseline")
    for name, row in table.items():
        delta = f"  (cup {row['cup_mean'] - base['cup_mean']:+.4f} vs baseline)" if base else ""
        print(f"{name:40s} disc {row['disc_mean']:.4f}  cup {row['cup_mean']:.4f}{delta}")


if __name__ == "__main__":
    main()
