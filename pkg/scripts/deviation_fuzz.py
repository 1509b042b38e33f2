"""Fuzz single upward bid deviations against the max-min fair auction.

Instances have 1-6 users, 2-3 tasks and costs on a 0.05 grid.  Every
profitable deviation is written to a CSV with the kind of round in which the
deviated bid was decided.
"""

import argparse
import collections
import csv
import time

import numpy as np

from mmfl.auctions import BidMatrix, upward_deviations


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--instances", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", default="deviations.csv")
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    grid = np.round(np.arange(1, 21) * 0.05, 2)
    budgets = np.round(np.arange(1, 13) * 0.25, 2)
    kinds = collections.Counter()
    gaps = collections.Counter()
    checked = 0
    start = time.perf_counter()
    with open(args.csv, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["instance", "budget", "user", "task", "cost", "bid", "gain", "round_type", "maxmin_gap"])
        for k in range(args.instances):
            n, S = int(rng.integers(1, 7)), int(rng.integers(2, 4))
            costs = rng.choice(grid, size=(n, S))
            B = float(rng.choice(budgets))
            for i, s, v, r in upward_deviations(BidMatrix(costs, costs), B, grid):
                checked += 1
                gaps[round(r.maxmin_gap, 6)] += 1
                if r.profitable:
                    kinds[r.deviation_round_type] += 1
                    out.writerow([k, B, i, s, costs[i, s], v,
                                  r.deviated_utility - r.truthful_utility,
                                  r.deviation_round_type, r.maxmin_gap])
    print(f"{checked} deviations checked in {time.perf_counter() - start:.1f}s")
    print("profitable by round type:", dict(kinds))
    print("largest maxmin gap:", max(gaps))


if __name__ == "__main__":
    main()
