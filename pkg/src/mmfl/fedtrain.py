"""Round loop for concurrent training of several tasks over one client pool."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .allocation import (
    AllocationPolicy,
    RoundAssignment,
    aggregation_weights,
    assign_tasks,
    qfel_update_scale,
    sample_active,
)
from .errors import NumericError, TrainingAborted
from .model import (
    ParamVector,
    Scenario,
    TrainingConfig,
    data_loss,
    evaluate_accuracy,
    evaluate_loss,
    local_sgd,
)

CSV_FIELDS = ("round", "task_id", "loss", "accuracy", "n_selected")


@dataclass
class GlobalState:
    round: int
    weights: list[ParamVector]
    signal_history: list[np.ndarray]
    rng: np.random.Generator

    @property
    def signals(self) -> np.ndarray:
        if self.signal_history:
            return self.signal_history[-1]
        # before any evaluation every task looks the same
        return np.ones(len(self.weights))


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    loss: tuple[float, ...]
    accuracy: tuple[float, ...]
    n_selected: tuple[int, ...]
    wall_ms: float = 0.0

    def rows(self):
        for s, (loss, acc, n) in enumerate(zip(self.loss, self.accuracy, self.n_selected)):
            yield {"round": self.round, "task_id": s, "loss": loss, "accuracy": acc, "n_selected": n}


@dataclass
class Recruitment:
    """Which tasks each client agreed to train, from an auction outcome.

    ``participation[k, s]`` is 1 for a full winner, a value in (0, 1) for a
    fractional winner (available in each round with that probability) and 0
    for clients never assigned to the task.
    """

    participation: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.participation, dtype=float)
        if x.ndim != 2 or np.any(x < 0) or np.any(x > 1):
            raise ValueError("participation must be a K x S matrix with entries in [0, 1]")
        self.participation = x

    @property
    def is_vacuous(self) -> bool:
        return bool(np.all(self.participation == 1))

    def recruited_counts(self) -> np.ndarray:
        return self.participation.sum(axis=0)

    def feasible(self, rng: np.random.Generator) -> dict[int, list[int]]:
        x = self.participation
        out = {}
        for k in range(x.shape[0]):
            tasks = []
            for s in range(x.shape[1]):
                v = x[k, s]
                if v >= 1.0 or (v > 0.0 and rng.random() < v):
                    tasks.append(s)
            out[k] = tasks
        return out


@dataclass
class TrainingResult:
    metrics: list[RoundMetrics]
    weights: list[ParamVector]
    policy: AllocationPolicy
    seed: int

    @property
    def final_accuracy(self) -> tuple[float, ...]:
        return self.metrics[-1].accuracy if self.metrics else ()

    def cumulative_counts(self) -> np.ndarray:
        if not self.metrics:
            return np.zeros(len(self.weights), dtype=int)
        return np.sum([m.n_selected for m in self.metrics], axis=0)

    def summary(self) -> dict:
        acc = list(self.final_accuracy)
        return {
            "policy": self.policy.label,
            "seed": self.seed,
            "rounds": len(self.metrics),
            "final_accuracy": acc,
            "min_accuracy": min(acc) if acc else None,
            "mean_accuracy": float(np.mean(acc)) if acc else None,
            "variance": float(np.var(acc)) if acc else None,
            "cumulative_selected": self.cumulative_counts().tolist(),
        }


def initial_state(scenario: Scenario, seed: int) -> GlobalState:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return GlobalState(0, [ParamVector.zeros(t) for t in scenario.tasks], [], rng)


def _aggregate(uploads, weights):
    return ParamVector(
        np.sum([a * w.values for a, w in zip(weights, uploads)], axis=0),
        uploads[0].task_id,
    )


def run_round(
    state: GlobalState,
    scenario: Scenario,
    policy: AllocationPolicy,
    config: TrainingConfig,
    recruitment: Recruitment | None = None,
) -> tuple[GlobalState, RoundMetrics, RoundAssignment]:
    """One global round: activity, assignment, local training, aggregation, evaluation.

    Local step counters are global (``round * tau + i``), so a decaying
    schedule keeps decaying across rounds.
    """
    if state.round >= config.rounds:
        raise ValueError(f"round {state.round} is past the configured horizon {config.rounds}")
    start = time.perf_counter()
    t, rng = state.round, state.rng
    n_tasks = scenario.n_tasks
    active = sample_active(scenario.n_clients, config.participation, rng)
    feasible = None
    if recruitment is not None and not recruitment.is_vacuous:
        available = recruitment.feasible(rng)
        feasible = {k: available[k] for k in active}
    assignment = assign_tasks(policy, state.signals, active, t, rng, feasible)

    scales = qfel_update_scale(state.signals, policy.q) if policy.kind == "qfel" else None
    new_weights = list(state.weights)
    for s in range(n_tasks):
        members = sorted(assignment.sel.get(s, ()))
        if not members:
            continue
        w_s = state.weights[s]
        uploads = []
        for k in members:
            try:
                uploads.append(
                    local_sgd(
                        scenario.clients[s][k], w_s, config.tau, config.lr_schedule,
                        config.batch_size, rng, step_offset=t * config.tau,
                    )
                )
            except NumericError as exc:
                raise NumericError(
                    f"round {t}, task {s}, client {k}: {exc}",
                    step=exc.step,
                    context={**exc.context, "round": t},
                ) from exc
        agg = _aggregate(uploads, aggregation_weights([scenario.clients[s][k].weight for k in members]))
        if scales is not None:
            agg = ParamVector(w_s.values + scales[s] * (agg.values - w_s.values), s)
        new_weights[s] = agg

    losses, accs, signals = [], [], []
    for s in range(n_tasks):
        X, y = scenario.pooled(s)
        losses.append(data_loss(scenario.tasks[s], X, y, new_weights[s]))
        acc = evaluate_accuracy(scenario.test[s], new_weights[s])
        accs.append(acc)
        if policy.signal == "error_rate":
            signals.append(1.0 - acc)
        else:
            signals.append(evaluate_loss(scenario.test[s], new_weights[s]))

    new_state = GlobalState(t + 1, new_weights, state.signal_history + [np.array(signals)], rng)
    metrics = RoundMetrics(
        t,
        tuple(losses),
        tuple(accs),
        tuple(assignment.counts(n_tasks)),
        (time.perf_counter() - start) * 1e3,
    )
    return new_state, metrics, assignment


def run_training(
    scenario: Scenario,
    policy: AllocationPolicy,
    config: TrainingConfig,
    seed: int,
    recruitment: Recruitment | None = None,
    on_round: Callable[[RoundMetrics, RoundAssignment], None] | None = None,
) -> TrainingResult:
    state = initial_state(scenario, seed)
    metrics: list[RoundMetrics] = []
    for _ in range(config.rounds):
        try:
            state, m, assignment = run_round(state, scenario, policy, config, recruitment)
        except Exception as exc:
            raise TrainingAborted(f"training aborted in round {state.round}: {exc}", metrics) from exc
        metrics.append(m)
        if on_round is not None:
            on_round(m, assignment)
    return TrainingResult(metrics, state.weights, policy, seed)


def metrics_csv(metrics: list[RoundMetrics]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for m in metrics:
        for row in m.rows():
            writer.writerow({**row, "loss": repr(row["loss"]), "accuracy": repr(row["accuracy"])})
    return buf.getvalue()


def write_run(result: TrainingResult, directory: Path, stem: str) -> tuple[Path, Path]:
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{stem}.csv"
    json_path = directory / f"{stem}.json"
    csv_path.write_text(metrics_csv(result.metrics))
    json_path.write_text(json.dumps(result.summary(), indent=2) + "\n")
    return csv_path, json_path
