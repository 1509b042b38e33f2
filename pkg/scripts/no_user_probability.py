"""Probability that some task recruits nobody, closed form against simulation.

Two tasks; each task's cheapest bid is exponential with rate lambda.
"""

import argparse

import numpy as np

from mmfl.auctions import no_user_probability_exp, no_user_probability_mc


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lam", type=float, default=1.0)
    ap.add_argument("--budgets", type=float, nargs="+", default=[0.5, 1.0, 2.0, 4.0])
    ap.add_argument("--users", type=int, default=3)
    ap.add_argument("-n", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    print("B     mechanism    closed     mc        z")
    for B in args.budgets:
        for mech in ("maxmin", "budget-fair"):
            exact = no_user_probability_exp(args.lam, B, mechanism=mech)
            p, se = no_user_probability_mc(args.lam, B, mech, args.n, rng, n_users=args.users)
            z = (p - exact) / se if se > 0 else 0.0
            print(f"{B:<6g}{mech:<13s}{exact:.5f}   {p:.5f}   {z:+.2f}")


if __name__ == "__main__":
    main()
