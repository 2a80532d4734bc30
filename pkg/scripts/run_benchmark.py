"""Train every benchmark setting on every seed and summarize the medians.

Usage: python scripts/run_benchmark.py [--out results.jsonl] [--seeds 10] [--settings reference,p2,...]
"""

import argparse
import json
import time

import numpy as np

from unrolled_sgg.benchmark import SETTINGS, run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="benchmark_results.jsonl")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--settings", default=",".join(SETTINGS))
    args = ap.parse_args()
    names = args.settings.split(",")
    rows = []
    start = time.time()
    with open(args.out, "w") as fh:
        for seed in range(args.seeds):
            for name in names:
                row = run(name, seed)
                rows.append(row)
                fh.write(json.dumps(row) + "\n")
                fh.flush()
    print(f"{len(rows)} runs in {time.time() - start:.0f}s")
    print(f"{'setting':16s} {'sgcls obj acc':>14s} {'predcls R@100':>14s} {'predcls mR@100':>15s}")
    for name in names:
        mine = [r for r in rows if r["setting"] == name]
        acc = np.median([r["sgcls"]["object_accuracy"] for r in mine])
        rec = np.median([r["predcls"]["R@100"] for r in mine])
        mrec = np.median([r["predcls"]["mR@100"] for r in mine])
        print(f"{name:16s} {acc:14.4f} {rec:14.4f} {mrec:15.4f}")


if __name__ == "__main__":
    main()
