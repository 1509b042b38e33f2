"""Command-line entry point: ``mmfl simulate | auction | analyze``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    ConvergenceConstants,
    bound_rhs,
    fairness_metrics,
    gamma_s,
    global_optimum,
    minibatch_second_moment,
    minibatch_variance,
    smoothness_constants,
)
from .auctions import MECHANISMS, BidMatrix, run_mechanism
from .config import PRESETS, load_config, parse_config, preset
from .errors import ConfigError, MMFLError
from .harness import build_scenario, run_scenario

log = logging.getLogger("mmfl")


def _simulate(args) -> int:
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset", key="config")
    if args.preset:
        cfg = parse_config(preset(args.preset))
    elif args.config:
        cfg = load_config(args.config)
    else:
        raise ConfigError("one of --config or --preset is required", key="config")
    if args.seeds:
        doc = cfg.to_dict()
        doc["seeds"] = args.seeds
        cfg = parse_config(doc)
    out = args.out or cfg.output_dir
    if not out:
        raise ConfigError("no output directory (use --out)", key="output_dir")
    summary = run_scenario(cfg, Path(out))
    print(json.dumps({"out": str(out), "groups": sorted(summary)}, indent=2))
    return 0


def _auction(args) -> int:
    doc = json.loads(Path(args.bids).read_text())
    if isinstance(doc, dict):
        bids, costs = doc.get("bids"), doc.get("costs")
    else:
        bids, costs = doc, None
    matrix = BidMatrix(np.array(bids, dtype=float), None if costs is None else np.array(costs, dtype=float))
    outcome = run_mechanism(args.mechanism, matrix.bids, args.budget, trace=args.trace)
    result = outcome.to_dict()
    if costs is not None:
        result["utility"] = outcome.utility(matrix.costs).tolist()
    if args.trace:
        result["trace"] = outcome.trace
    print(json.dumps(result, indent=2))
    return 0


def _run_summaries(root: Path) -> dict[str, list[dict]]:
    groups: dict[str, list[dict]] = {}
    for path in sorted(root.rglob("seed*.json")):
        doc = json.loads(path.read_text())
        if "final_accuracy" not in doc:
            continue
        groups.setdefault(str(path.parent.relative_to(root)), []).append(doc)
    return groups


def bound_table(cfg, seed: int, horizons=(50, 100, 200)) -> list[dict]:
    """Decaying-rate bound per task with constants measured on the generated data.

    G^2 and sigma^2 are taken at the zero start and at the optimum, inflated
    by 10%; selection skew bounds are set to one.  Tasks without strong
    convexity (softmax with l2 = 0) are reported with an empty bound.
    """
    scenario = build_scenario(cfg, seed)
    tau, bs = cfg.training.tau, cfg.training.batch_size
    rows = []
    for s, spec in enumerate(scenario.tasks):
        clients = scenario.clients[s]
        L, mu = smoothness_constants(clients)
        row = {"task_id": s, "L": L, "mu": mu}
        if mu <= 0:
            rows.append({**row, "T": "", "bound": "", "note": "not strongly convex"})
            continue
        w_star = global_optimum(clients)
        w0 = np.zeros(spec.n_params)
        G2 = 1.1 * max(minibatch_second_moment(c, w, bs) for c in clients for w in (w0, w_star))
        sigma2 = 1.1 * max(minibatch_variance(c, w, bs) for c in clients for w in (w0, w_star))
        consts = ConvergenceConstants(L, mu, sigma2, G2, max(gamma_s(clients, w_star), 0.0))
        gamma = max(8 * L / mu, tau)
        for T in horizons:
            value = bound_rhs("decaying_rate", consts, T=T * tau, gamma=gamma, tau=tau,
                              dist0=float(w_star @ w_star))
            rows.append({**row, "T": T, "bound": value, "note": ""})
    return rows


def _analyze(args) -> int:
    root = Path(args.inp)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a directory", key="in")
    groups = _run_summaries(root)
    if not groups:
        raise ConfigError(f"no run summaries found under {root}", key="in")
    report = {}
    for name, runs in groups.items():
        per_run = {str(r["seed"]): fairness_metrics(r["final_accuracy"]).to_dict() for r in runs}
        finals = np.array([r["final_accuracy"] for r in runs])
        report[name] = {
            "runs": per_run,
            "mean": fairness_metrics(finals.mean(axis=0)).to_dict(),
            "mean_variance": float(np.mean([v["variance"] for v in per_run.values()])),
            "mean_min": float(np.mean([v["min"] for v in per_run.values()])),
        }
    (root / "fairness.json").write_text(json.dumps(report, indent=2) + "\n")

    cfg_path = root / "config.json"
    if cfg_path.exists():
        cfg = load_config(cfg_path)
        rows = bound_table(cfg, cfg.seeds[0])
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        (root / "bounds.csv").write_text(buf.getvalue())
    print(json.dumps(report, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmfl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a scenario and write CSV/JSON results")
    sim.add_argument("--config", help="scenario JSON file")
    sim.add_argument("--preset", choices=sorted(PRESETS))
    sim.add_argument("--out", help="output directory")
    sim.add_argument("--seeds", type=int, nargs="+", help="override the configured seeds")
    sim.set_defaults(func=_simulate)

    auc = sub.add_parser("auction", help="run one recruitment mechanism on a bid matrix")
    auc.add_argument("--mechanism", choices=MECHANISMS, required=True)
    auc.add_argument("--bids", required=True,
                     help="JSON users x tasks matrix, or {\"bids\": ..., \"costs\": ...}")
    auc.add_argument("--budget", type=float, required=True)
    auc.add_argument("--trace", action="store_true", help="include the per-round event log")
    auc.set_defaults(func=_auction)

    ana = sub.add_parser("analyze", help="fairness report and bound table for a results directory")
    ana.add_argument("--in", dest="inp", required=True)
    ana.set_defaults(func=_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}" + (f" (key: {exc.key})" if exc.key else ""), file=sys.stderr)
        return 2
    except (MMFLError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
