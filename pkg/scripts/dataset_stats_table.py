#!/usr/bin/env python3
"""Build the preference dataset at paper scale (1500/1000/1000 prompts) and
print the accounting table plus ranked-first proportions per category."""

import argparse

from itercomp.config import default_config, paper_scale_counts
from itercomp.prefs import build_dataset
from itercomp.rng import substream


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--desk", action="store_true", help="use 500 prompts per category instead")
    args = parser.parse_args()

    config = default_config(seed=args.seed)
    if not args.desk:
        config.prompt_counts = paper_scale_counts()
    _, stats = build_dataset(
        config.prompt_counts, config.make_gallery(), config.raters,
        substream(config.seed, "dataset"), config.oracles,
    )
    print(f"{'category':<14} {'texts':>7} {'images':>8} {'pairs':>8}")
    for category in sorted(stats.per_category):
        e = stats.per_category[category]
        print(f"{category:<14} {e['texts']:>7} {e['images']:>8} {e['pairs']:>8}")
    t = stats.totals
    print(f"{'total':<14} {t['texts']:>7} {t['images']:>8} {t['pairs']:>8}")
    print()
    for category, fractions in stats.ranked_first.items():
        ordered = sorted(fractions.items(), key=lambda kv: -kv[1])
        line = ", ".join(f"{name} {frac:.2f}" for name, frac in ordered)
        print(f"ranked first [{category}]: {line}")


if __name__ == "__main__":
    main()
