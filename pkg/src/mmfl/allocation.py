"""Client activity sampling and per-round client-to-task assignment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, EmptyRoundError, EmptySelection

POLICY_KINDS = ("alpha_fair", "random", "round_robin", "qfel")
SIGNAL_MODES = ("error_rate", "loss")
SIGNAL_FLOOR = 1e-6


@dataclass(frozen=True)
class AllocationPolicy:
    kind: str = "alpha_fair"
    alpha: float = 3.0
    q: float = 0.0
    signal: str = "error_rate"

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError(f"unknown policy kind {self.kind!r}", key="policy")
        if self.signal not in SIGNAL_MODES:
            raise ConfigError(f"unknown signal mode {self.signal!r}", key="signal")
        if self.kind == "alpha_fair" and not self.alpha >= 1:
            raise ConfigError("alpha must be >= 1", key="alpha")
        if self.kind == "qfel" and not self.q >= 0:
            raise ConfigError("q must be >= 0", key="q")

    @property
    def label(self) -> str:
        if self.kind == "alpha_fair":
            return f"alpha_fair-a{self.alpha:g}"
        if self.kind == "qfel":
            return f"qfel-q{self.q:g}"
        return self.kind


@dataclass
class RoundAssignment:
    active_clients: frozenset[int]
    sel: dict[int, frozenset[int]] = field(default_factory=dict)

    def task_of(self, client: int) -> int | None:
        for s, members in self.sel.items():
            if client in members:
                return s
        return None

    def counts(self, n_tasks: int) -> list[int]:
        return [len(self.sel.get(s, ())) for s in range(n_tasks)]


def clamp_signals(signals) -> np.ndarray:
    return np.maximum(np.asarray(signals, dtype=float), SIGNAL_FLOOR)


def alpha_fair_probabilities(signals, alpha: float) -> np.ndarray:
    """p_s proportional to f_s ** (alpha - 1).

    Evaluated in log space so that large alpha does not overflow.
    """
    f = np.asarray(signals, dtype=float)
    if f.ndim != 1 or f.size == 0:
        raise ValueError("signals must be a non-empty vector")
    if np.any(~(f > 0)):
        raise ValueError(f"signals must be strictly positive, got {f}")
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    if alpha == 1:
        return np.full(f.size, 1.0 / f.size)
    logw = (alpha - 1.0) * np.log(f)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def active_count(K: int, C: float) -> int:
    return int(math.floor(C * K + 0.5))


def sample_active(K: int, C: float, rng: np.random.Generator) -> frozenset[int]:
    """Uniform subset of round(C*K) client ids."""
    if not 0 < C <= 1:
        raise ValueError("participation rate must lie in (0, 1]")
    m = active_count(K, C)
    if m == 0:
        raise EmptyRoundError(f"round(C*K) = 0 for K={K}, C={C}")
    if m == K:
        return frozenset(range(K))
    return frozenset(rng.choice(K, size=m, replace=False).tolist())


def task_probabilities(policy: AllocationPolicy, signals) -> np.ndarray:
    f = clamp_signals(signals)
    if policy.kind == "alpha_fair":
        return alpha_fair_probabilities(f, policy.alpha)
    return np.full(f.size, 1.0 / f.size)


def assign_tasks(
    policy: AllocationPolicy,
    signals,
    active_clients,
    round_index: int,
    rng: np.random.Generator,
    feasible: Mapping[int, Sequence[int]] | None = None,
) -> RoundAssignment:
    """Assign every active client to exactly one task.

    ``feasible`` optionally restricts client k to the listed tasks; the
    policy's probabilities are renormalised over that set (round robin walks
    the feasible list instead of all tasks).  Clients with an empty feasible
    set are dropped from the active set.
    """
    if policy.kind not in POLICY_KINDS:
        raise ConfigError(f"unknown policy kind {policy.kind!r}", key="policy")
    n_tasks = len(signals)
    if n_tasks == 0:
        raise ValueError("no tasks to assign")
    probs = task_probabilities(policy, signals)
    ordered = sorted(active_clients)
    sel: dict[int, set[int]] = {s: set() for s in range(n_tasks)}
    assigned = set()

    for pos, k in enumerate(ordered):
        options = None if feasible is None else list(feasible.get(k, ()))
        if options is not None and not options:
            continue
        if policy.kind == "round_robin":
            if options is None:
                task = (pos + round_index) % n_tasks
            else:
                task = options[(pos + round_index) % len(options)]
        elif options is None or len(options) == n_tasks:
            task = int(rng.choice(n_tasks, p=probs))
        else:
            sub = probs[options]
            task = int(options[rng.choice(len(options), p=sub / sub.sum())])
        sel[task].add(k)
        assigned.add(k)
    return RoundAssignment(
        frozenset(assigned), {s: frozenset(m) for s, m in sel.items()}
    )


def aggregation_weights(p_ks) -> np.ndarray:
    """Renormalise the selected clients' data fractions to sum to one."""
    p = np.asarray(p_ks, dtype=float)
    if p.size == 0:
        raise EmptySelection("task has no selected clients this round")
    return p / p.sum()


def qfel_update_scale(signals, q: float) -> np.ndarray:
    """Per-task update multipliers proportional to f_s ** q, with mean one."""
    f = clamp_signals(signals)
    if q < 0:
        raise ValueError("q must be >= 0")
    if q == 0:
        return np.ones(f.size)
    logw = q * np.log(f)
    w = np.exp(logw - logw.max())
    return f.size * w / w.sum()
