#!/usr/bin/env python3
"""Full default closed-loop run: dataset, pretraining, three feedback
iterations, report.csv under runs/default/."""

import argparse

from itercomp.config import default_config
from itercomp.iterate import run_itercomp


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workdir", default="runs/default")
    parser.add_argument("--iters", type=int, default=None)
    parser.add_argument("--resume", action="store_true")
    args = parser.parse_args()

    config = default_config(seed=args.seed)
    config.workdir = args.workdir
    report = run_itercomp(config, iterations=args.iters, resume=args.resume)
    for row in report.rows:
        rank = row.get("median_policy_insert_rank")
        suffix = f", median insert rank {rank:.1f}" if rank is not None else ""
        print(f"iteration {row['iteration']}: composite {row['composite']:.4f}{suffix}")


if __name__ == "__main__":
    main()
