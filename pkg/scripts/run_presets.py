"""Run experiment presets and the fairness analysis on their outputs.

    python3 scripts/run_presets.py --out results exp1-desk exp4-alpha
"""

import argparse
import json
from pathlib import Path

from mmfl.cli import main as cli_main
from mmfl.config import PRESETS, parse_config, preset
from mmfl.harness import run_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("presets", nargs="*", default=sorted(PRESETS))
    ap.add_argument("--out", default="results")
    ap.add_argument("--seeds", type=int, nargs="+")
    args = ap.parse_args()

    for name in args.presets:
        doc = preset(name)
        if args.seeds:
            doc["seeds"] = args.seeds
        out = Path(args.out) / name
        summary = run_scenario(parse_config(doc), out)
        if "curves" in summary:
            for row in summary["curves"]:
                print(name, json.dumps(row))
            continue
        for group, s in summary.items():
            print(f"{name:14s} {group:28s} mean={s.get('mean_accuracy', float('nan')):.4f} "
                  f"min={s.get('mean_min_accuracy', float('nan')):.4f} "
                  f"var={s.get('mean_variance', float('nan')):.5f}")
        cli_main(["analyze", "--in", str(out)])


if __name__ == "__main__":
    main()
