"""Synthetic convex tasks, client shards, losses and the local SGD trainer.

Every task is a linear classifier over ``n_classes`` outputs (weights plus a
bias column) trained either with softmax cross-entropy (``logistic``) or with
squared error against one-hot targets (``least-squares``).  Parameters are
stored flat so that aggregation is plain vector arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ScenarioError, ShapeError

LOSS_KINDS = ("logistic", "least-squares")


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    difficulty: float
    input_dim: int
    n_classes: int = 2
    loss_kind: str = "logistic"
    l2: float = 0.0
    # Tasks sharing a data_seed get identical data regardless of task_id.
    data_seed: int | None = None

    def __post_init__(self):
        if not self.difficulty > 0:
            raise ScenarioError(f"difficulty must be > 0, got {self.difficulty}")
        if self.input_dim < 1:
            raise ScenarioError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.n_classes < 2:
            raise ScenarioError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.loss_kind not in LOSS_KINDS:
            raise ScenarioError(f"unknown loss_kind {self.loss_kind!r}")
        if self.l2 < 0:
            raise ScenarioError("l2 must be non-negative")

    @property
    def label_noise(self) -> float:
        """Probability that an observed label is drawn from a wrong class."""
        return min(0.4, 0.04 * self.difficulty)

    @property
    def class_spread(self) -> float:
        # std of the class means; harder tasks have closer class centres
        return 2.0 / math.sqrt(self.difficulty)

    @property
    def n_params(self) -> int:
        return self.n_classes * (self.input_dim + 1)


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    task: TaskSpec
    X: np.ndarray
    y: np.ndarray
    weight: float = 1.0

    @property
    def task_id(self) -> int:
        return self.task.task_id

    @property
    def size(self) -> int:
        return len(self.y)

    @property
    def points(self) -> list[tuple[np.ndarray, int]]:
        return [(x, int(label)) for x, label in zip(self.X, self.y)]


@dataclass(frozen=True)
class TestSet:
    __test__ = False  # not a pytest class

    task: TaskSpec
    X: np.ndarray
    y: np.ndarray


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    task_id: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise NumericError(f"non-finite parameters for task {self.task_id}")

    @classmethod
    def zeros(cls, spec: TaskSpec) -> "ParamVector":
        return cls(np.zeros(spec.n_params), spec.task_id)


@dataclass(frozen=True)
class ConstantLR:
    eta: float

    def __post_init__(self):
        if self.eta < 0:
            raise ScenarioError("learning rate must be non-negative")

    def __call__(self, t: int) -> float:
        return self.eta


@dataclass(frozen=True)
class DecayingLR:
    """eta_t = 1 / (mu * (t + gamma))."""

    mu: float
    gamma: float

    def __post_init__(self):
        if not (self.mu > 0 and self.gamma > 0):
            raise ScenarioError("decaying schedule needs mu > 0 and gamma > 0")

    def __call__(self, t: int) -> float:
        return 1.0 / (self.mu * (t + self.gamma))


@dataclass(frozen=True)
class TrainingConfig:
    tau: int = 5
    batch_size: int = 16
    lr_schedule: ConstantLR | DecayingLR = field(default_factory=lambda: ConstantLR(0.1))
    rounds: int = 100
    participation: float = 1.0

    def __post_init__(self):
        if self.tau < 1:
            raise ScenarioError("tau must be >= 1")
        if self.batch_size < 1:
            raise ScenarioError("batch_size must be >= 1")
        if self.rounds < 0:
            raise ScenarioError("rounds must be >= 0")
        if not 0 < self.participation <= 1:
            raise ScenarioError("participation rate must lie in (0, 1]")


@dataclass
class Scenario:
    tasks: list[TaskSpec]
    clients: list[list[ClientDataset]]  # clients[s][k]
    test: list[TestSet]
    _pooled: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def n_clients(self) -> int:
        return len(self.clients[0])

    def pooled(self, s: int) -> tuple[np.ndarray, np.ndarray]:
        """All training points of task ``s``; their mean loss equals the global loss."""
        if s not in self._pooled:
            shards = self.clients[s]
            self._pooled[s] = (
                np.concatenate([c.X for c in shards]),
                np.concatenate([c.y for c in shards]),
            )
        return self._pooled[s]


def _task_rng(spec: TaskSpec, seed: int) -> np.random.Generator:
    key = spec.data_seed if spec.data_seed is not None else spec.task_id
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


def _sample_points(spec, means, observed, rng):
    # latent class differs from the observed label with probability label_noise
    n = len(observed)
    true = observed.copy()
    flip = rng.random(n) < spec.label_noise
    if flip.any():
        shift = rng.integers(1, spec.n_classes, size=int(flip.sum()))
        true[flip] = (observed[flip] + shift) % spec.n_classes
    X = means[true] + rng.standard_normal((n, spec.input_dim))
    return X, observed


def generate_scenario(
    task_specs: Sequence[TaskSpec],
    n_clients: int,
    points_per_client: tuple[int, int] = (150, 250),
    noniid_fraction: float = 0.0,
    seed: int = 0,
    test_size: int = 1000,
) -> Scenario:
    """Build per-client shards and a held-out test set for every task.

    Clients marked non-iid draw labels from a random half of the classes; iid
    clients see every class at least once.  Everything is a function of
    ``seed`` and the task fields.
    """
    if not task_specs:
        raise ScenarioError("scenario needs at least one task")
    if n_clients < 1:
        raise ScenarioError("n_clients must be >= 1")
    lo, hi = points_per_client
    if not 1 <= lo <= hi:
        raise ScenarioError(f"bad points_per_client range {points_per_client}")
    if not 0.0 <= noniid_fraction <= 1.0:
        raise ScenarioError("noniid_fraction must lie in [0, 1]")

    clients, tests = [], []
    for spec in task_specs:
        rng = _task_rng(spec, seed)
        C = spec.n_classes
        means = rng.standard_normal((C, spec.input_dim)) * spec.class_spread
        n_noniid = int(round(noniid_fraction * n_clients))
        noniid = set(rng.permutation(n_clients)[:n_noniid].tolist())
        half = max(1, C // 2)

        shards = []
        for k in range(n_clients):
            n_k = int(rng.integers(lo, hi + 1))
            allowed = np.sort(rng.choice(C, half, replace=False)) if k in noniid else np.arange(C)
            m = min(len(allowed), n_k)
            observed = np.concatenate(
                [rng.permutation(allowed)[:m], rng.choice(allowed, n_k - m)]
            )
            observed = rng.permutation(observed)
            X, y = _sample_points(spec, means, observed, rng)
            shards.append((k, X, y))

        total = sum(len(y) for _, _, y in shards)
        clients.append(
            [ClientDataset(k, spec, X, y, len(y) / total) for k, X, y in shards]
        )
        observed = rng.integers(0, C, size=test_size)
        X, y = _sample_points(spec, means, observed, rng)
        tests.append(TestSet(spec, X, y))
    return Scenario(list(task_specs), clients, tests)


# -- losses ---------------------------------------------------------------


def _as_matrix(spec: TaskSpec, w) -> np.ndarray:
    values = w.values if isinstance(w, ParamVector) else np.asarray(w, dtype=float)
    if values.size != spec.n_params:
        raise ShapeError(f"expected {spec.n_params} parameters, got {values.size}")
    return values.reshape(spec.n_classes, spec.input_dim + 1)


def _scores(spec, W, X):
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ShapeError(f"features must have {spec.input_dim} columns, got {X.shape}")
    return X @ W[:, :-1].T + W[:, -1]


def _pointwise(spec, Z, y):
    if spec.loss_kind == "logistic":
        zmax = Z.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(Z - zmax).sum(axis=1))
        return lse - Z[np.arange(len(y)), y]
    R = Z.copy()
    R[np.arange(len(y)), y] -= 1.0
    return 0.5 * np.sum(R * R, axis=1)


def pointwise_loss(spec: TaskSpec, X: np.ndarray, y: np.ndarray, w) -> np.ndarray:
    """Per-point loss, without the l2 term."""
    return _pointwise(spec, _scores(spec, _as_matrix(spec, w), X), y)


def data_loss(spec: TaskSpec, X: np.ndarray, y: np.ndarray, w) -> float:
    W = _as_matrix(spec, w)
    loss = float(np.mean(_pointwise(spec, _scores(spec, W, X), y)))
    if spec.l2:
        loss += 0.5 * spec.l2 * float(np.sum(W * W))
    return loss


def data_gradient(spec: TaskSpec, X: np.ndarray, y: np.ndarray, w) -> np.ndarray:
    """Gradient of ``data_loss`` as a flat vector."""
    W = _as_matrix(spec, w)
    Z = _scores(spec, W, X)
    if spec.loss_kind == "logistic":
        Z = np.exp(Z - Z.max(axis=1, keepdims=True))
        Z /= Z.sum(axis=1, keepdims=True)
    Z[np.arange(len(y)), y] -= 1.0
    Z /= len(y)
    G = np.empty_like(W)
    G[:, :-1] = Z.T @ X
    G[:, -1] = Z.sum(axis=0)
    if spec.l2:
        G += spec.l2 * W
    return G.ravel()


def local_loss(client: ClientDataset, w) -> float:
    """F_k(w): mean pointwise loss on the client's shard (plus l2 if set)."""
    return data_loss(client.task, client.X, client.y, w)


def local_gradient(client: ClientDataset, w) -> np.ndarray:
    return data_gradient(client.task, client.X, client.y, w)


def global_loss(clients: Sequence[ClientDataset], w) -> float:
    """Data-weighted average of the clients' local losses."""
    if not clients:
        raise ScenarioError("global loss needs at least one client")
    task_ids = {c.task_id for c in clients}
    if len(task_ids) != 1:
        raise ScenarioError(f"clients span several tasks: {sorted(task_ids)}")
    weights = np.array([c.weight for c in clients], dtype=float)
    losses = np.array([local_loss(c, w) for c in clients])
    return float(weights @ losses / weights.sum())


def local_sgd(
    client: ClientDataset,
    w_init: ParamVector,
    tau: int,
    lr: float | Callable[[int], float],
    batch_size: int,
    rng: np.random.Generator,
    step_offset: int = 0,
) -> ParamVector:
    """Run ``tau`` minibatch SGD steps from ``w_init``.

    Minibatches are drawn uniformly with replacement; ``batch_size >= |D|``
    means full-batch gradient descent.  A callable ``lr`` is evaluated at
    ``step_offset + i`` for step ``i``.
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    rate = lr if callable(lr) else (lambda _t, eta=float(lr): eta)
    spec = client.task
    w = np.array(w_init.values, dtype=float)
    n = client.size
    for i in range(tau):
        if batch_size >= n:
            g = data_gradient(spec, client.X, client.y, w)
        else:
            idx = rng.integers(0, n, size=batch_size)
            g = data_gradient(spec, client.X[idx], client.y[idx], w)
        if not np.all(np.isfinite(g)):
            raise NumericError(
                f"non-finite gradient at local step {i}",
                step=i,
                context={"client": client.client_id, "task": client.task_id},
            )
        eta = rate(step_offset + i)
        if eta:
            w = w - eta * g
        if not np.all(np.isfinite(w)):
            raise NumericError(
                f"parameters diverged at local step {i}",
                step=i,
                context={"client": client.client_id, "task": client.task_id},
            )
    return ParamVector(w, w_init.task_id)


def predict(spec: TaskSpec, X: np.ndarray, w) -> np.ndarray:
    # np.argmax returns the lowest index among ties
    return np.argmax(_scores(spec, _as_matrix(spec, w), X), axis=1)


def evaluate_accuracy(test: TestSet, w) -> float:
    if len(test.y) == 0:
        raise ScenarioError("empty test set")
    return float(np.mean(predict(test.task, test.X, w) == test.y))


def evaluate_loss(test: TestSet, w) -> float:
    return data_loss(test.task, test.X, test.y, w)
