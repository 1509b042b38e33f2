"""Seed fan-out, per-run artifacts, cross-seed aggregates and the auction pipeline."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .auctions import experiment_bids, run_mechanism
from .config import ScenarioConfig, parse_config
from .fedtrain import Recruitment, TrainingResult, run_training, write_run
from .model import generate_scenario

log = logging.getLogger(__name__)

AGG_METRICS = ("loss", "accuracy", "n_selected")


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("MMFL_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_jobs))


def _fan_out(fn, jobs: list[tuple]):
    """Run ``fn(*job)`` for every job, in a process pool when allowed."""
    workers = worker_count(len(jobs))
    if workers == 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        return [f.result() for f in futures]


def build_scenario(cfg: ScenarioConfig, seed: int):
    return generate_scenario(
        cfg.tasks, cfg.n_clients, cfg.points_per_client, cfg.noniid_fraction,
        seed=cfg.scenario_seed(seed), test_size=cfg.test_size,
    )


def draw_bids(cfg: ScenarioConfig, rng: np.random.Generator, n_users: int) -> np.ndarray:
    S = len(cfg.tasks)
    if cfg.auction is not None and cfg.auction.bids == "uniform":
        return rng.random((n_users, S))
    return experiment_bids(rng, n_users, S)


def recruit(cfg: ScenarioConfig, mechanism: str, budget: float, seed: int):
    """Run one recruitment auction for ``seed``; returns (Recruitment, outcome)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    bids = draw_bids(cfg, rng, cfg.n_clients)
    outcome = run_mechanism(mechanism, bids, budget)
    return Recruitment(outcome.winners), outcome


def _train_job(doc: dict, policy_index: int, seed: int, mechanism: str | None, budget: float | None):
    cfg = parse_config(doc)
    scenario = build_scenario(cfg, seed)
    policy = cfg.policies[policy_index]
    recruitment, outcome = None, None
    if mechanism is not None:
        recruitment, outcome = recruit(cfg, mechanism, budget, seed)
        for s, n in enumerate(recruitment.recruited_counts()):
            if n == 0:
                log.warning("task %d recruited no clients under %s; it stays frozen", s, mechanism)
    result = run_training(scenario, policy, cfg.training, seed, recruitment)
    return result, (outcome.to_dict() if outcome is not None else None)


def aggregate_csv(results: list[TrainingResult]) -> str:
    """mean/min/max of every metric per round and task across seeds."""
    buf = io.StringIO()
    fields = ["round", "task_id", "n_seeds"] + [
        f"{m}_{stat}" for m in AGG_METRICS for stat in ("mean", "min", "max")
    ]
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    if not results or not results[0].metrics:
        return buf.getvalue()
    n_rounds = len(results[0].metrics)
    n_tasks = len(results[0].metrics[0].loss)
    for t in range(n_rounds):
        for s in range(n_tasks):
            row = [t, s, len(results)]
            for m in AGG_METRICS:
                vals = np.array([getattr(r.metrics[t], m)[s] for r in results], dtype=float)
                row += [repr(float(vals.mean())), repr(float(vals.min())), repr(float(vals.max()))]
            writer.writerow(row)
    return buf.getvalue()


def _group_summary(results: list[TrainingResult]) -> dict:
    finals = np.array([r.final_accuracy for r in results], dtype=float)
    if finals.size == 0:
        return {"seeds": [r.seed for r in results]}
    return {
        "seeds": [r.seed for r in results],
        "mean_final_accuracy": finals.mean(axis=0).tolist(),
        "mean_min_accuracy": float(finals.min(axis=1).mean()),
        "mean_variance": float(finals.var(axis=1).mean()),
        "mean_accuracy": float(finals.mean()),
        "cumulative_selected": np.mean([r.cumulative_counts() for r in results], axis=0).tolist(),
    }


def _write_group(directory: Path, results: list[TrainingResult], extra: dict | None = None) -> dict:
    directory.mkdir(parents=True, exist_ok=True)
    for r in results:
        write_run(r, directory, f"seed{r.seed}")
    (directory / "aggregate.csv").write_text(aggregate_csv(results))
    summary = _group_summary(results)
    if extra:
        summary.update(extra)
    (directory / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def run_scenario(cfg: ScenarioConfig, out_dir: Path) -> dict:
    """Train every policy on every seed; one directory per policy (or mechanism)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    if cfg.auction is not None and cfg.auction.mode == "sweep":
        summary = run_auction_sweep(cfg, out_dir)
    elif cfg.auction is not None:
        summary = run_pipeline(cfg, out_dir)
    else:
        doc = cfg.to_dict()
        jobs = [(doc, i, seed, None, None) for i in range(len(cfg.policies)) for seed in cfg.seeds]
        results = [r for r, _ in _fan_out(_train_job, jobs)]
        summary = {}
        for i, policy in enumerate(cfg.policies):
            group = [r for r in results if r.policy == policy]
            summary[policy.label] = _write_group(out_dir / policy.label, group)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def run_pipeline(cfg: ScenarioConfig, out_dir: Path) -> dict:
    """Auction recruitment followed by alpha-fair training restricted to recruited tasks."""
    doc = cfg.to_dict()
    summary = {}
    combos = [(m, b) for m in cfg.auction.mechanisms for b in cfg.auction.budgets]
    jobs = [
        (doc, i, seed, m, b)
        for m, b in combos for i in range(len(cfg.policies)) for seed in cfg.seeds
    ]
    outputs = _fan_out(_train_job, jobs)
    for m, b in combos:
        for i, policy in enumerate(cfg.policies):
            picked = [
                out for job, out in zip(jobs, outputs) if job[3] == m and job[4] == b and job[1] == i
            ]
            results = [r for r, _ in picked]
            auctions = {str(r.seed): o for r, o in picked}
            name = f"{m}-B{b:g}-{policy.label}"
            directory = out_dir / name
            directory.mkdir(parents=True, exist_ok=True)
            (directory / "recruitment.json").write_text(json.dumps(auctions, indent=2) + "\n")
            counts = [float(np.min(np.array(o["take_up"]))) for o in auctions.values()]
            summary[name] = _write_group(directory, results, {"min_recruited": counts})
    return summary


def _sweep_job(doc: dict, seed: int):
    cfg = parse_config(doc)
    a = cfg.auction
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    instances = [draw_bids(cfg, rng, a.n_users) for _ in range(a.instances)]
    rows = []
    for b in a.budgets:
        for m in a.mechanisms:
            take = np.array([run_mechanism(m, bids, b).take_up for bids in instances])
            mins = take.min(axis=1)
            rows.append({
                "seed": seed, "budget": b, "mechanism": m,
                "min_take_up": float(mins.mean()),
                "min_take_up_se": float(mins.std(ddof=1) / np.sqrt(len(mins))) if len(mins) > 1 else 0.0,
                "take_up_gap": float(np.mean(take.max(axis=1) - mins)),
                **{f"take_up_task{s}": float(take[:, s].mean()) for s in range(take.shape[1])},
            })
    return rows


def _write_rows(path: Path, rows: list[dict]):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    path.write_text(buf.getvalue())


def run_auction_sweep(cfg: ScenarioConfig, out_dir: Path) -> dict:
    """Budget sweep of the recruitment mechanisms on sampled bid matrices."""
    doc = cfg.to_dict()
    per_seed = _fan_out(_sweep_job, [(doc, seed) for seed in cfg.seeds])
    for seed, rows in zip(cfg.seeds, per_seed):
        _write_rows(out_dir / f"auction_seed{seed}.csv", rows)
    flat = [r for rows in per_seed for r in rows]
    curves = []
    mechs = cfg.auction.mechanisms
    for b in cfg.auction.budgets:
        row = {"budget": b}
        for m in mechs:
            vals = np.array([r["min_take_up"] for r in flat if r["budget"] == b and r["mechanism"] == m])
            row[f"min_take_up_{m}"] = float(vals.mean())
            row[f"min_take_up_{m}_min"] = float(vals.min())
            row[f"min_take_up_{m}_max"] = float(vals.max())
            gaps = [r["take_up_gap"] for r in flat if r["budget"] == b and r["mechanism"] == m]
            row[f"difference_{m}"] = float(np.mean(gaps))
        if "maxmin" in mechs and "budget-fair" in mechs:
            row["maxmin_gain"] = row["min_take_up_maxmin"] - row["min_take_up_budget-fair"]
        curves.append(row)
    _write_rows(out_dir / "curves.csv", curves)
    return {"curves": curves}
