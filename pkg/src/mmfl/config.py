"""Scenario configuration: JSON documents, validation and experiment presets."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .allocation import AllocationPolicy
from .auctions import MECHANISMS
from .errors import ConfigError
from .model import ConstantLR, DecayingLR, TaskSpec, TrainingConfig

TOP_KEYS = {
    "name", "tasks", "n_clients", "points_per_client", "noniid_fraction", "test_size",
    "participation", "policies", "training", "auction", "seeds", "data_seed", "output_dir",
}
TASK_KEYS = {"task_id", "difficulty", "input_dim", "n_classes", "loss_kind", "l2", "data_seed"}
POLICY_KEYS = {"kind", "alpha", "q", "signal"}
TRAINING_KEYS = {"tau", "batch_size", "rounds", "lr", "lr_schedule"}
SCHEDULE_KEYS = {"kind", "eta", "mu", "gamma"}
AUCTION_KEYS = {"mechanisms", "budgets", "n_users", "bids", "instances", "mode"}
AUCTION_MODES = ("sweep", "recruit")
BID_SOURCES = ("experiment", "uniform")


@dataclass
class AuctionConfig:
    mechanisms: list[str]
    budgets: list[float]
    n_users: int
    bids: str = "experiment"
    instances: int = 200
    mode: str = "sweep"


@dataclass
class ScenarioConfig:
    name: str
    tasks: list[TaskSpec]
    n_clients: int
    participation: float
    policies: list[AllocationPolicy]
    training: TrainingConfig
    seeds: list[int]
    points_per_client: tuple[int, int] = (150, 250)
    noniid_fraction: float = 0.0
    test_size: int = 1000
    data_seed: int = 100
    auction: AuctionConfig | None = None
    output_dir: str | None = None
    raw: dict = field(default_factory=dict, repr=False)

    def scenario_seed(self, seed: int) -> int:
        return self.data_seed + seed

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def _reject_unknown(doc: dict, allowed: set[str], where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be an object", key=where)
    extra = sorted(set(doc) - allowed)
    if extra:
        key = f"{where}.{extra[0]}" if where else extra[0]
        raise ConfigError(f"unknown key {key!r}", key=key)


def _get(doc: dict, key: str, kind, where: str, default=None, required=False):
    full = f"{where}.{key}" if where else key
    if key not in doc:
        if required:
            raise ConfigError(f"missing required key {full!r}", key=full)
        return default
    value = doc[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if isinstance(value, bool) and kind is not bool or not isinstance(value, kind):
        raise ConfigError(f"{full!r} must be {kind.__name__}, got {value!r}", key=full)
    return value


def _wrap(key: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError as exc:
        # locate the field inside the document
        inner = {"policy": "kind"}.get(exc.key, exc.key)
        full = f"{key}.{inner}" if inner else key
        raise ConfigError(f"{full}: {exc}", key=full) from exc
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{key}: {exc}", key=key) from exc


def _schedule(doc: dict, where: str):
    if "lr" in doc and "lr_schedule" in doc:
        raise ConfigError(f"give either {where}.lr or {where}.lr_schedule", key=f"{where}.lr")
    if "lr_schedule" not in doc:
        return _wrap(f"{where}.lr", ConstantLR, _get(doc, "lr", float, where, 0.1))
    sched = doc["lr_schedule"]
    key = f"{where}.lr_schedule"
    _reject_unknown(sched, SCHEDULE_KEYS, key)
    kind = _get(sched, "kind", str, key, required=True)
    if kind == "constant":
        return _wrap(key, ConstantLR, _get(sched, "eta", float, key, required=True))
    if kind == "decaying":
        return _wrap(key, DecayingLR, _get(sched, "mu", float, key, required=True),
                     _get(sched, "gamma", float, key, required=True))
    raise ConfigError(f"{key}.kind must be 'constant' or 'decaying'", key=f"{key}.kind")


def parse_config(doc: dict) -> ScenarioConfig:
    """Validate a configuration document.  Errors name the offending key."""
    _reject_unknown(doc, TOP_KEYS, "")
    name = _get(doc, "name", str, "", "scenario")

    tasks_doc = _get(doc, "tasks", list, "", required=True)
    if not tasks_doc:
        raise ConfigError("tasks must not be empty", key="tasks")
    tasks = []
    for i, t in enumerate(tasks_doc):
        where = f"tasks[{i}]"
        _reject_unknown(t, TASK_KEYS, where)
        tasks.append(_wrap(where, TaskSpec,
            task_id=_get(t, "task_id", int, where, i),
            difficulty=_get(t, "difficulty", float, where, required=True),
            input_dim=_get(t, "input_dim", int, where, required=True),
            n_classes=_get(t, "n_classes", int, where, 2),
            loss_kind=_get(t, "loss_kind", str, where, "logistic"),
            l2=_get(t, "l2", float, where, 0.0),
            data_seed=_get(t, "data_seed", int, where),
        ))
    ids = [t.task_id for t in tasks]
    if ids != list(range(len(tasks))):
        raise ConfigError("task ids must be 0..S-1 in order", key="tasks")

    n_clients = _get(doc, "n_clients", int, "", required=True)
    if n_clients < 1:
        raise ConfigError("n_clients must be >= 1", key="n_clients")
    participation = _get(doc, "participation", float, "", 1.0)
    if not 0 < participation <= 1:
        raise ConfigError("participation must lie in (0, 1]", key="participation")
    ppc = _get(doc, "points_per_client", list, "", [150, 250])
    if len(ppc) != 2 or not all(isinstance(v, int) for v in ppc) or not 1 <= ppc[0] <= ppc[1]:
        raise ConfigError("points_per_client must be [lo, hi] with 1 <= lo <= hi",
                          key="points_per_client")
    noniid = _get(doc, "noniid_fraction", float, "", 0.0)
    if not 0 <= noniid <= 1:
        raise ConfigError("noniid_fraction must lie in [0, 1]", key="noniid_fraction")
    test_size = _get(doc, "test_size", int, "", 1000)
    if test_size < 1:
        raise ConfigError("test_size must be >= 1", key="test_size")

    policies = []
    for i, p in enumerate(_get(doc, "policies", list, "", [{"kind": "alpha_fair", "alpha": 3.0}])):
        where = f"policies[{i}]"
        _reject_unknown(p, POLICY_KEYS, where)
        policies.append(_wrap(where, AllocationPolicy,
            kind=_get(p, "kind", str, where, required=True),
            alpha=_get(p, "alpha", float, where, 3.0),
            q=_get(p, "q", float, where, 0.0),
            signal=_get(p, "signal", str, where, "error_rate"),
        ))
    if not policies:
        raise ConfigError("policies must not be empty", key="policies")
    labels = [p.label for p in policies]
    if len(set(labels)) != len(labels):
        raise ConfigError("duplicate policy entries", key="policies")

    tr = _get(doc, "training", dict, "", {})
    _reject_unknown(tr, TRAINING_KEYS, "training")
    training = _wrap("training", TrainingConfig,
        tau=_get(tr, "tau", int, "training", 5),
        batch_size=_get(tr, "batch_size", int, "training", 16),
        lr_schedule=_schedule(tr, "training"),
        rounds=_get(tr, "rounds", int, "training", 100),
        participation=participation,
    )

    seeds = _get(doc, "seeds", list, "", required=True)
    if not seeds:
        raise ConfigError("seeds must not be empty", key="seeds")
    if not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        raise ConfigError("seeds must be non-negative integers", key="seeds")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct", key="seeds")

    auction = None
    if "auction" in doc:
        a = doc["auction"]
        _reject_unknown(a, AUCTION_KEYS, "auction")
        mechs = _get(a, "mechanisms", list, "auction", ["maxmin"])
        for m in mechs:
            if m not in MECHANISMS:
                raise ConfigError(f"unknown mechanism {m!r}", key="auction.mechanisms")
        budgets = [float(b) for b in _get(a, "budgets", list, "auction", required=True)]
        if not budgets or any(b <= 0 for b in budgets):
            raise ConfigError("budgets must be a non-empty list of positive numbers",
                              key="auction.budgets")
        mode = _get(a, "mode", str, "auction", "sweep")
        if mode not in AUCTION_MODES:
            raise ConfigError(f"auction.mode must be one of {AUCTION_MODES}", key="auction.mode")
        n_users = _get(a, "n_users", int, "auction", n_clients)
        if mode == "recruit" and n_users != n_clients:
            raise ConfigError("recruitment needs n_users == n_clients", key="auction.n_users")
        if n_users < 1:
            raise ConfigError("n_users must be >= 1", key="auction.n_users")
        bids = _get(a, "bids", str, "auction", "experiment")
        if bids not in BID_SOURCES:
            raise ConfigError(f"auction.bids must be one of {BID_SOURCES}", key="auction.bids")
        instances = _get(a, "instances", int, "auction", 200)
        if instances < 1:
            raise ConfigError("instances must be >= 1", key="auction.instances")
        auction = AuctionConfig(mechs, budgets, n_users, bids, instances, mode)

    return ScenarioConfig(
        name=name, tasks=tasks, n_clients=n_clients, participation=participation,
        policies=policies, training=training, seeds=list(seeds),
        points_per_client=(ppc[0], ppc[1]), noniid_fraction=noniid, test_size=test_size,
        data_seed=_get(doc, "data_seed", int, "", 100), auction=auction,
        output_dir=_get(doc, "output_dir", str, ""), raw=copy.deepcopy(doc),
    )


def load_config(path: str | Path) -> ScenarioConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(doc)


# -- presets ----------------------------------------------------------------

_DESK_TASKS = [
    {"task_id": 0, "difficulty": 1.0, "input_dim": 5, "n_classes": 2},
    {"task_id": 1, "difficulty": 2.0, "input_dim": 10, "n_classes": 4},
    {"task_id": 2, "difficulty": 4.0, "input_dim": 40, "n_classes": 10},
]
_DESK_TRAINING = {"tau": 5, "batch_size": 2, "rounds": 200, "lr": 0.3}

PRESETS: dict[str, dict[str, Any]] = {
    "exp1-desk": {
        "name": "exp1-desk",
        "tasks": _DESK_TASKS,
        "n_clients": 60,
        "participation": 0.35,
        "policies": [
            {"kind": "alpha_fair", "alpha": 3.0},
            {"kind": "random"},
            {"kind": "round_robin"},
        ],
        "training": _DESK_TRAINING,
        "seeds": [0, 1, 2, 3, 4],
    },
    "exp2-tasks": {
        "name": "exp2-tasks",
        "tasks": _DESK_TASKS + [
            {"task_id": 3, "difficulty": 3.0, "input_dim": 20, "n_classes": 6},
            {"task_id": 4, "difficulty": 1.5, "input_dim": 8, "n_classes": 3},
        ],
        "n_clients": 60,
        "participation": 0.35,
        "policies": [
            {"kind": "alpha_fair", "alpha": 3.0},
            {"kind": "random"},
            {"kind": "qfel", "q": 1.0},
        ],
        "training": {**_DESK_TRAINING, "rounds": 150},
        "seeds": [0, 1, 2],
    },
    "exp3-clients": {
        "name": "exp3-clients",
        "tasks": _DESK_TASKS,
        "n_clients": 120,
        "participation": 0.35,
        "policies": [
            {"kind": "alpha_fair", "alpha": 3.0},
            {"kind": "random"},
        ],
        "training": {**_DESK_TRAINING, "rounds": 100},
        "seeds": [0, 1, 2],
    },
    "exp4-alpha": {
        "name": "exp4-alpha",
        "tasks": _DESK_TASKS,
        "n_clients": 60,
        "participation": 0.35,
        "policies": [{"kind": "alpha_fair", "alpha": a} for a in (1.0, 2.0, 3.0, 6.0, 64.0)],
        "training": _DESK_TRAINING,
        "seeds": [0, 1, 2],
    },
    "exp5-auctions": {
        "name": "exp5-auctions",
        "tasks": [
            {"task_id": 0, "difficulty": 1.0, "input_dim": 5, "n_classes": 2},
            {"task_id": 1, "difficulty": 2.0, "input_dim": 10, "n_classes": 4},
        ],
        "n_clients": 100,
        "policies": [{"kind": "alpha_fair", "alpha": 3.0}],
        "training": {"rounds": 0},
        "auction": {
            "mode": "sweep",
            "mechanisms": ["budget-fair", "maxmin", "gmmfair"],
            "budgets": [1.0, 2.0, 4.0, 8.0, 12.0, 16.0, 24.0, 32.0],
            "n_users": 100,
            "instances": 200,
        },
        "seeds": [0, 1, 2, 3, 4],
    },
    "exp6-pipeline": {
        "name": "exp6-pipeline",
        "tasks": _DESK_TASKS[:2],
        "n_clients": 60,
        "participation": 0.35,
        "policies": [{"kind": "alpha_fair", "alpha": 3.0}],
        "training": {**_DESK_TRAINING, "rounds": 100},
        "auction": {
            "mode": "recruit",
            "mechanisms": ["budget-fair", "maxmin"],
            "budgets": [6.0],
        },
        "seeds": [0, 1, 2],
    },
}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}", key="preset")
    return copy.deepcopy(PRESETS[name])
