"""Client recruitment auctions run before training.

Three mechanisms share one outcome type:

* ``budget_fair_auction``: a proportional-share auction per task, each task
  holding ``B / S`` of the budget.
* ``gmmfair``: greedy max-min optimum that pays every winner its bid (not
  truthful).
* ``maxmin_fair_auction``: rounds of proportional-share admissions with budget
  moved between tasks when one falls behind, ending in an optional fractional
  round.

Bid matrices are ``N x S`` (users by tasks).  Ties between equal bids go to
the lower user id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

# Slack for threshold and budget comparisons.  Grid bids such as 0.7/7 do not
# survive float division exactly.
EPS = 1e-12

MECHANISMS = ("budget-fair", "gmmfair", "maxmin")


@dataclass(frozen=True)
class BidMatrix:
    bids: np.ndarray
    costs: np.ndarray | None = None

    def __post_init__(self):
        b = np.atleast_2d(np.asarray(self.bids, dtype=float))
        if not np.all(np.isfinite(b)) or np.any(b < 0):
            raise ValueError("bids must be finite and non-negative")
        object.__setattr__(self, "bids", b)
        if self.costs is not None:
            c = np.atleast_2d(np.asarray(self.costs, dtype=float))
            if c.shape != b.shape:
                raise ValueError("costs and bids must have the same shape")
            if not np.all(np.isfinite(c)) or np.any(c < 0):
                raise ValueError("costs must be finite and non-negative")
            object.__setattr__(self, "costs", c)

    @classmethod
    def truthful(cls, costs) -> "BidMatrix":
        c = np.atleast_2d(np.asarray(costs, dtype=float))
        return cls(c.copy(), c)

    @property
    def n_users(self) -> int:
        return self.bids.shape[0]

    @property
    def n_tasks(self) -> int:
        return self.bids.shape[1]

    def with_bid(self, user: int, task: int, value: float) -> "BidMatrix":
        b = self.bids.copy()
        b[user, task] = value
        return BidMatrix(b, self.costs)


@dataclass
class AuctionOutcome:
    mechanism: str
    winners: np.ndarray  # x[i, s] in [0, 1]
    payments: np.ndarray  # total payment to user i for task s
    budgets: np.ndarray  # per-task budget held at the end
    total_budget: float
    trace: list[dict] = field(default_factory=list)
    # (user, task) -> (round, round kind) for every bid the auction reached
    decisions: dict[tuple[int, int], tuple[int, str]] = field(default_factory=dict)

    @property
    def take_up(self) -> np.ndarray:
        return self.winners.sum(axis=0)

    @property
    def full_winners(self) -> np.ndarray:
        return (self.winners >= 1.0).sum(axis=0)

    @property
    def maxmin(self) -> float:
        return float(self.take_up.min()) if self.winners.size else 0.0

    @property
    def spent(self) -> np.ndarray:
        return (self.payments * np.ceil(self.winners)).sum(axis=0)

    def utility(self, costs) -> np.ndarray:
        """p - c * x on participation, zero otherwise."""
        c = np.asarray(costs, dtype=float)
        return np.where(self.winners > 0, self.payments - c * self.winners, 0.0)

    def to_dict(self) -> dict:
        return {
            "mechanism": self.mechanism,
            "budget": self.total_budget,
            "winners": self.winners.tolist(),
            "payments": self.payments.tolist(),
            "take_up": self.take_up.tolist(),
            "maxmin": self.maxmin,
            "spent": self.spent.tolist(),
        }


def _as_matrix(bids) -> np.ndarray:
    if isinstance(bids, BidMatrix):
        return bids.bids
    return BidMatrix(bids).bids


def _ascending(column: np.ndarray) -> list[int]:
    return sorted(range(len(column)), key=lambda i: (column[i], i))


def _proportional_share_column(column, budget):
    """(winner ids, common payment) for one task.

    Winners are paid the threshold min(budget / winners, first losing bid):
    paying budget / winners alone would let a loser underbid, take a
    winner's place and collect more than its cost.
    """
    order = _ascending(column)
    k = len(order) + 1
    for pos, i in enumerate(order, start=1):
        if column[i] > budget / pos + EPS:
            k = pos
            break
    if k == 1:
        return [], 0.0
    price = budget / (k - 1)
    if k <= len(order):
        price = min(price, float(column[order[k - 1]]))
    return order[: k - 1], price


def proportional_share(bids, budget: float) -> AuctionOutcome:
    """Single-task proportional share.

    Walk the bids in ascending order; the first bid exceeding
    ``budget / position`` is the first loser and everyone before it wins.
    Winners share one price, min(budget / winners, first losing bid).  With
    no loser all bidders win and split the budget.
    """
    column = np.asarray(bids, dtype=float).ravel()
    if budget <= 0 and column.size:
        raise ValueError("budget must be positive")
    winners = np.zeros((column.size, 1))
    payments = np.zeros((column.size, 1))
    if column.size:
        ids, price = _proportional_share_column(column, budget)
        winners[ids, 0] = 1.0
        payments[ids, 0] = price
    return AuctionOutcome("proportional-share", winners, payments, np.array([budget]), budget)


def budget_fair_auction(bids, total_budget: float) -> AuctionOutcome:
    b = _as_matrix(bids)
    if total_budget <= 0:
        raise ValueError("budget must be positive")
    n, S = b.shape
    winners = np.zeros((n, S))
    payments = np.zeros((n, S))
    share = total_budget / S
    for s in range(S):
        ids, price = _proportional_share_column(b[:, s], share)
        winners[ids, s] = 1.0
        payments[ids, s] = price
    return AuctionOutcome("budget-fair", winners, payments, np.full(S, share), total_budget)


def gmmfair(bids, total_budget: float) -> AuctionOutcome:
    """Greedy max-min: add every task's next-cheapest bid while all of them fit."""
    b = _as_matrix(bids)
    n, S = b.shape
    orders = [_ascending(b[:, s]) for s in range(S)]
    winners = np.zeros((n, S))
    payments = np.zeros((n, S))
    spent = 0.0
    trace = []
    for t in range(n):
        cost = sum(b[orders[s][t], s] for s in range(S))
        if spent + cost > total_budget + EPS:
            trace.append({"round": t + 1, "event": "end", "reason": "budget", "cost": cost})
            break
        spent += cost
        for s in range(S):
            i = orders[s][t]
            winners[i, s] = 1.0
            payments[i, s] = b[i, s]
        trace.append({"round": t + 1, "event": "admit", "cost": cost, "spent": spent})
    return AuctionOutcome("gmmfair", winners, payments, payments.sum(axis=0), total_budget, trace)


def waterfill(surplus: dict[int, float], amount: float) -> dict[int, float]:
    """Take ``amount`` from the largest surpluses first, equalising what remains."""
    if amount <= 0:
        return {s: 0.0 for s in surplus}
    keys = sorted(surplus, key=lambda s: (-surplus[s], s))
    values = [surplus[s] for s in keys]
    if amount >= sum(values):
        return dict(surplus)
    level = 0.0
    running = 0.0
    for j, v in enumerate(values, start=1):
        running += v
        level = (running - amount) / j
        nxt = values[j] if j < len(values) else -math.inf
        if level >= nxt:
            break
    return {s: max(surplus[s] - level, 0.0) for s in surplus}


def maxmin_fair_auction(bids, total_budget: float, trace: bool = False) -> AuctionOutcome:
    """Max-min fair auction with budget reallocation and a fractional last round.

    Round t looks at each task's t-th cheapest bid and admits it when it is at
    most ``B_s / t``.  If some tasks fall short, ``A`` is what they need and
    ``C`` is the surplus the admitting tasks hold above ``t * bid``.  When
    ``A < C`` the shortfall is covered by waterfilling from the donors and the
    auction continues; otherwise ``C`` is split evenly over the short tasks as
    a fractional admission and the auction ends.

    Full winners of a task are always paid ``B_s / n_s`` under the task's
    current budget, so a donation lowers the donor's earlier payments too.
    """
    b = _as_matrix(bids)
    if total_budget <= 0:
        raise ValueError("budget must be positive")
    n, S = b.shape
    orders = [_ascending(b[:, s]) for s in range(S)]
    budget = np.full(S, total_budget / S)
    count = np.zeros(S, dtype=int)
    fractional: dict[int, tuple[int, float, float]] = {}
    events: list[dict] = []
    decisions: dict[tuple[int, int], tuple[int, str]] = {}

    for t in range(1, n + 1):
        cand = [orders[s][t - 1] for s in range(S)]
        bid = np.array([b[cand[s], s] for s in range(S)])
        ok = [s for s in range(S) if bid[s] <= budget[s] / t + EPS]
        short = [s for s in range(S) if s not in ok]
        if trace:
            for s in range(S):
                events.append({
                    "round": t, "event": "admit" if s in ok else "short", "task": s,
                    "user": cand[s], "bid": float(bid[s]), "threshold": float(budget[s] / t),
                })
        if not short:
            count += 1
            for s in range(S):
                decisions[(cand[s], s)] = (t, "normal")
            continue

        need = {s: bid[s] * t - budget[s] for s in short}
        surplus = {s: budget[s] - bid[s] * t for s in ok}
        A = sum(need.values())
        C = sum(surplus.values())
        if trace:
            events.append({"round": t, "event": "shortfall", "A": float(A), "C": float(C),
                           "short": short, "donors": ok})
        if A < C:
            take = waterfill(surplus, A)
            for s in ok:
                budget[s] -= take[s]
            for s in short:
                budget[s] = bid[s] * t
            count += 1
            for s in range(S):
                decisions[(cand[s], s)] = (t, "reallocation")
            if trace:
                events.append({
                    "round": t, "event": "reallocate",
                    "from": {str(s): float(v) for s, v in take.items()},
                    "to": {str(s): float(need[s]) for s in short},
                    "note": "donor payments drop to the reduced B_s / n_s",
                })
            continue

        for s in ok:
            budget[s] = bid[s] * t
            count[s] += 1
        for s in range(S):
            decisions[(cand[s], s)] = (t, "fractional")
        if C > 0:
            share = C / len(short)
            for s in short:
                if bid[s] <= share:
                    fractional[s] = (cand[s], 1.0, float(bid[s]))
                else:
                    fractional[s] = (cand[s], float(share / bid[s]), float(share))
        if trace:
            events.append({
                "round": t, "event": "fractional", "C": float(C),
                "entries": {str(s): {"user": int(u), "x": float(x), "payment": float(p)}
                            for s, (u, x, p) in fractional.items()},
            })
        break
    else:
        if trace:
            events.append({"round": n, "event": "end", "reason": "bids exhausted"})

    winners = np.zeros((n, S))
    payments = np.zeros((n, S))
    for s in range(S):
        if count[s]:
            ids = orders[s][: count[s]]
            winners[ids, s] = 1.0
            payments[ids, s] = budget[s] / count[s]
    for s, (u, x, p) in fractional.items():
        winners[u, s] = x
        payments[u, s] = p
    return AuctionOutcome("maxmin", winners, payments, budget.copy(), total_budget, events, decisions)


def run_mechanism(name: str, bids, total_budget: float, trace: bool = False) -> AuctionOutcome:
    if name == "budget-fair":
        return budget_fair_auction(bids, total_budget)
    if name == "gmmfair":
        return gmmfair(bids, total_budget)
    if name == "maxmin":
        return maxmin_fair_auction(bids, total_budget, trace=trace)
    raise ValueError(f"unknown mechanism {name!r}; choose from {MECHANISMS}")


# -- truthfulness ---------------------------------------------------------


@dataclass(frozen=True)
class DeviationReport:
    truthful_utility: float
    deviated_utility: float
    profitable: bool
    deviation_round_type: str  # normal | reallocation | fractional | not-winning
    maxmin_gap: float


def _deviation(truthful: AuctionOutcome, costs, matrix: BidMatrix, user, task, deviated_bid, budget):
    deviated = maxmin_fair_auction(matrix.with_bid(user, task, deviated_bid), budget)
    u_true = float(truthful.utility(costs)[user, task])
    u_dev = float(deviated.utility(costs)[user, task])
    kind = deviated.decisions.get((user, task), (None, "not-winning"))[1]
    return DeviationReport(
        u_true, u_dev, u_dev > u_true + EPS, kind, truthful.maxmin - deviated.maxmin
    )


def deviation_harness(matrix: BidMatrix, user: int, task: int, deviated_bid: float,
                      budget: float) -> DeviationReport:
    """Compare user ``user``'s utility on ``task`` when bidding its cost vs ``deviated_bid``.

    Both runs use the max-min fair auction; all other bids are the costs.
    ``deviation_round_type`` is the kind of round in which the deviated run
    reached the deviated bid.
    """
    if matrix.costs is None:
        raise ValueError("deviation analysis needs private costs")
    truth = BidMatrix.truthful(matrix.costs)
    truthful = maxmin_fair_auction(truth, budget)
    return _deviation(truthful, matrix.costs, truth, user, task, deviated_bid, budget)


def upward_deviations(matrix: BidMatrix, budget: float, grid) -> list[tuple[int, int, float, DeviationReport]]:
    """Every single upward deviation onto ``grid`` for every user and task."""
    truth = BidMatrix.truthful(matrix.costs)
    truthful = maxmin_fair_auction(truth, budget)
    out = []
    for i in range(truth.n_users):
        for s in range(truth.n_tasks):
            c = truth.costs[i, s]
            for v in grid:
                if v > c + EPS:
                    out.append((i, s, float(v), _deviation(truthful, truth.costs, truth, i, s, v, budget)))
    return out


# -- take-up probabilities ------------------------------------------------


@dataclass(frozen=True)
class JoinEstimate:
    full: float
    full_se: float
    partial: float
    partial_se: float
    n: int


def join_probability(
    sampler: Callable[[np.random.Generator, int, int], np.ndarray],
    bid: float,
    budget: float,
    n_tasks: int,
    mechanism: str,
    n_mc: int,
    rng: np.random.Generator,
    n_users: int,
    task: int = 0,
) -> JoinEstimate:
    """Monte-Carlo take-up of a user (user 0) bidding ``bid`` on ``task``.

    ``sampler(rng, n_users, n_tasks)`` draws a full bid matrix; user 0's bid
    on ``task`` is then overwritten.  ``full`` estimates P(x = 1) and
    ``partial`` estimates E[x ; 0 < x < 1], the expected fractional share.
    """
    if n_mc < 1000:
        raise ValueError("n_mc must be at least 1000")
    if budget <= 0:
        return JoinEstimate(0.0, 0.0, 0.0, 0.0, n_mc)
    full = np.empty(n_mc)
    part = np.empty(n_mc)
    for r in range(n_mc):
        m = np.array(sampler(rng, n_users, n_tasks), dtype=float)
        m[0, task] = bid
        x = run_mechanism(mechanism, m, budget).winners[0, task]
        full[r] = x >= 1.0
        part[r] = x if 0.0 < x < 1.0 else 0.0
    se = lambda v: float(v.std(ddof=1) / math.sqrt(n_mc))
    return JoinEstimate(float(full.mean()), se(full), float(part.mean()), se(part), n_mc)


def no_user_probability_exp(lam: float, budget: float, n_tasks: int = 2,
                            mechanism: str = "maxmin") -> float:
    """P(some task ends with no full user) when each task's lowest bid is Exp(lam).

    Closed forms exist for two tasks only.
    """
    if n_tasks != 2:
        raise NotImplementedError("closed form is only available for two tasks")
    if lam <= 0 or budget <= 0:
        raise ValueError("lam and budget must be positive")
    z = lam * budget
    if mechanism == "maxmin":
        return math.exp(-z) * (1.0 + z)
    if mechanism == "budget-fair":
        return math.exp(-z) * (2.0 * math.exp(z / 2.0) - 1.0)
    raise ValueError(f"no closed form for mechanism {mechanism!r}")


def no_user_probability_mc(lam: float, budget: float, mechanism: str, n: int,
                           rng: np.random.Generator, n_users: int = 1,
                           n_tasks: int = 2) -> tuple[float, float]:
    """Monte-Carlo version running the actual mechanism.

    Bids are Exp(lam / n_users), so each task's minimum bid is Exp(lam).
    Returns (estimate, standard error).
    """
    hits = np.empty(n)
    for r in range(n):
        bids = rng.exponential(n_users / lam, size=(n_users, n_tasks))
        out = run_mechanism(mechanism, bids, budget)
        hits[r] = np.any(out.full_winners == 0)
    p = float(hits.mean())
    return p, math.sqrt(p * (1 - p) / n)


# -- bid distributions used by the experiment presets ---------------------


def truncated_gaussian_bids(rng: np.random.Generator, n: int, mean: float = 0.4,
                            sd: float = 0.2) -> np.ndarray:
    out = np.empty(0)
    while out.size < n:
        draw = rng.normal(mean, sd, size=2 * n)
        out = np.concatenate([out, draw[(draw >= 0) & (draw <= 1)]])
    return out[:n]


def increasing_linear_bids(rng: np.random.Generator, n: int) -> np.ndarray:
    # density 2x on [0, 1]
    return np.sqrt(rng.random(n))


def experiment_bids(rng: np.random.Generator, n_users: int, n_tasks: int = 2) -> np.ndarray:
    """Task 0 bids are truncated Gaussian, task 1 increasing-linear, alternating beyond."""
    cols = []
    for s in range(n_tasks):
        cols.append(truncated_gaussian_bids(rng, n_users) if s % 2 == 0
                    else increasing_linear_bids(rng, n_users))
    return np.column_stack(cols)
