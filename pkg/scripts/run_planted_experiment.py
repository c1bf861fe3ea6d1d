#!/usr/bin/env python3
"""Run the planted domain-shift experiment over several seeds and print the
no-adapt / fine-tune-all / selective comparison plus selection precision."""

import argparse
import json

import numpy as np

from sleepalign import pipeline


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--out", help="optional JSON file for the raw results")
    args = parser.parse_args()

    results = []
    print(f"{'seed':>4} {'no-adapt':>9} {'all':>9} {'selective':>10} {'precision':>10}")
    for seed in range(args.seeds):
        r = pipeline.run_planted_protocol(seed=seed)
        results.append(r)
        print(f"{seed:>4} {r['no_adapt_accuracy']:>9.4f} "
              f"{r['finetune_all_accuracy']:>9.4f} {r['selective_accuracy']:>10.4f} "
              f"{r['selection_precision']:>10.4f}")

    mean = lambda key: float(np.mean([r[key] for r in results]))
    print(f"{'mean':>4} {mean('no_adapt_accuracy'):>9.4f} "
          f"{mean('finetune_all_accuracy'):>9.4f} {mean('selective_accuracy'):>10.4f} "
          f"{mean('selection_precision'):>10.4f}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(results, f, indent=2)


if __name__ == "__main__":
    main()
