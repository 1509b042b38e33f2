"""How often the highest-loss task's selection term falls as alpha grows.

Compares the plain sum over non-empty selections with the version
conditioned on the task receiving at least one client.
"""

import argparse

import numpy as np

from mmfl.analysis import selection_term


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--vectors", type=int, default=100)
    ap.add_argument("--tasks", type=int, default=3)
    ap.add_argument("--clients", type=int, nargs="+", default=[2, 4, 8, 16])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    vectors = rng.uniform(0.05, 1.0, size=(args.vectors, args.tasks))
    alphas = np.arange(1, 9)
    print("K  plain_monotone  conditional_monotone")
    for K in args.clients:
        counts = []
        for cond in (False, True):
            ok = 0
            for f in vectors:
                vals = np.array([selection_term(f, a, K, conditional=cond) for a in alphas])
                ok += bool(np.all(np.diff(vals) <= 1e-12))
            counts.append(ok)
        print(f"{K:<3d}{counts[0]:>8d}/{args.vectors}{counts[1]:>14d}/{args.vectors}")


if __name__ == "__main__":
    main()
