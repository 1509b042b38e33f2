"""Fairness metrics, convergence-bound calculators and brute-force oracles."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import OptimizationError, UndefinedSkewError
from .model import ClientDataset, TaskSpec, data_gradient, data_loss, local_loss

BOUND_KINDS = ("one_round", "decaying_rate", "auction_decaying_rate")


@dataclass(frozen=True)
class ConvergenceConstants:
    L: float
    mu: float
    sigma2: float = 0.0
    G2: float = 0.0
    Gamma: float = 0.0
    rho_lower: float = 1.0
    rho_upper: float = 1.0

    def __post_init__(self):
        if not (self.L > 0 and self.mu > 0):
            raise ValueError("L and mu must be positive")
        if self.mu > self.L * (1 + 1e-12):
            raise ValueError(f"mu={self.mu} exceeds L={self.L}")
        if self.sigma2 < 0 or self.G2 < 0 or self.Gamma < 0:
            raise ValueError("sigma2, G2 and Gamma must be non-negative")
        if not 0 < self.rho_lower <= self.rho_upper:
            raise ValueError("need 0 < rho_lower <= rho_upper")


@dataclass(frozen=True)
class FairnessReport:
    values: tuple[float, ...]
    minimum: float
    mean: float
    variance: float
    cosine_ratio: float

    def to_dict(self) -> dict:
        return {
            "values": list(self.values),
            "min": self.minimum,
            "mean": self.mean,
            "variance": self.variance,
            "cosine_ratio": self.cosine_ratio,
        }


def fairness_metrics(values: Sequence[float]) -> FairnessReport:
    """Population variance and sum(f) / sqrt(sum(f^2)) of per-task values.

    The ratio is sqrt(S) times the cosine similarity between the value vector
    and the all-ones vector, so it lies in [1, sqrt(S)] for positive values.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("need at least one task")
    norm = math.sqrt(float(v @ v))
    ratio = float(v.sum() / norm) if norm > 0 else float("nan")
    # shifting by one entry keeps equal values at exactly zero variance
    var = float((v - v[0]).var())
    return FairnessReport(tuple(v.tolist()), float(v.min()), float(v.mean()), var, ratio)


# -- selection probabilities ----------------------------------------------


def selection_fraction(losses, alpha: float, task: int) -> float:
    """f_s^alpha / sum f^alpha, the per-client probability of joining ``task``."""
    f = np.asarray(losses, dtype=float)
    logw = alpha * np.log(f)
    w = np.exp(logw - logw.max())
    return float(w[task] / w.sum())


def selection_set_probability(q: float, K: int, sel_size: int) -> float:
    """Probability of one specific client subset of size ``sel_size`` (no binomial factor)."""
    if not 0 <= q <= 1:
        raise ValueError("q must lie in [0, 1]")
    if not 0 <= sel_size <= K:
        raise ValueError("sel_size must lie in [0, K]")
    return q**sel_size * (1 - q) ** (K - sel_size)


def _subsets(K: int):
    for mask in range(1, 1 << K):
        yield [k for k in range(K) if mask >> k & 1]


def selection_variance_term(q: float, p: Sequence[float]) -> float:
    """sum over Sel of B_Sel * sum_{k in Sel} (p_k / sum_Sel p)^2."""
    p = np.asarray(p, dtype=float)
    K = p.size
    total = 0.0
    for sel in _subsets(K):
        ps = p[sel]
        total += selection_set_probability(q, K, len(sel)) * float(np.sum((ps / ps.sum()) ** 2))
    return total


def pairwise_weight(p_sel: Sequence[float]) -> float:
    """sum over k != k' in Sel of p_k p_k' / (sum_Sel p)^2."""
    ps = np.asarray(p_sel, dtype=float)
    tot = ps.sum()
    return float((tot**2 - np.sum(ps**2)) / tot**2)


def selection_term(losses, alpha: float, K: int, task: int | None = None,
                    conditional: bool = False) -> float:
    """sum_{j=1}^K (1/j) C(K, j) fbar^j (1 - fbar)^(K - j) with fbar = f_s^a / sum f^a.

    The j = 0 (empty selection) mass is left out, as in the printed sum.
    ``conditional=True`` divides by 1 - (1 - fbar)^K, i.e. the average of 1/j
    over non-empty selections.
    """
    f = np.asarray(losses, dtype=float)
    if np.any(f <= 0):
        raise ValueError("losses must be positive")
    s = int(np.argmax(f)) if task is None else task
    fbar = selection_fraction(f, alpha, s)
    term = sum(math.comb(K, j) * fbar**j * (1 - fbar) ** (K - j) / j for j in range(1, K + 1))
    if conditional:
        nonempty = 1.0 - (1.0 - fbar) ** K
        return term / nonempty if nonempty > 0 else float("nan")
    return term


# -- optima, heterogeneity gap and selection skew ---------------------------


def _hessian(spec: TaskSpec, X: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, d1 = X.shape[0], spec.input_dim + 1
    Xt = np.hstack([X, np.ones((n, 1))])
    C = spec.n_classes
    H = np.zeros((C * d1, C * d1))
    if spec.loss_kind == "least-squares":
        block = Xt.T @ Xt / n
        for a in range(C):
            H[a * d1:(a + 1) * d1, a * d1:(a + 1) * d1] = block
    else:
        W = w.reshape(C, d1)
        Z = Xt @ W.T
        P = np.exp(Z - Z.max(axis=1, keepdims=True))
        P /= P.sum(axis=1, keepdims=True)
        for a in range(C):
            for b in range(a, C):
                coef = P[:, a] * ((a == b) - P[:, b]) / n
                blk = (Xt * coef[:, None]).T @ Xt
                H[a * d1:(a + 1) * d1, b * d1:(b + 1) * d1] = blk
                H[b * d1:(b + 1) * d1, a * d1:(a + 1) * d1] = blk.T
    if spec.l2:
        H += spec.l2 * np.eye(C * d1)
    return H


def solve_optimum(spec: TaskSpec, X: np.ndarray, y: np.ndarray, tol: float = 1e-8,
                  max_iter: int = 100, w0=None) -> np.ndarray:
    """Minimise the data loss by damped Newton steps until ||grad|| < tol."""
    w = np.zeros(spec.n_params) if w0 is None else np.array(w0, dtype=float)
    for _ in range(max_iter):
        g = data_gradient(spec, X, y, w)
        if np.linalg.norm(g) < tol:
            return w
        H = _hessian(spec, X, y, w)
        step = np.linalg.lstsq(H, g, rcond=None)[0]
        f0 = data_loss(spec, X, y, w)
        eta = 1.0
        while eta > 1e-10:
            cand = w - eta * step
            if data_loss(spec, X, y, cand) <= f0 - 1e-4 * eta * float(g @ step):
                break
            eta *= 0.5
        w = cand
    g = data_gradient(spec, X, y, w)
    if np.linalg.norm(g) < tol:
        return w
    raise OptimizationError(f"gradient norm {np.linalg.norm(g):.3e} after {max_iter} Newton steps")


def _normalized_weights(clients: Sequence[ClientDataset]) -> np.ndarray:
    p = np.array([c.weight for c in clients], dtype=float)
    return p / p.sum()


def global_optimum(clients: Sequence[ClientDataset], tol: float = 1e-8) -> np.ndarray:
    """Minimiser of sum_k p_k F_k, solved on the pooled data with matching weights."""
    spec = clients[0].task
    p = _normalized_weights(clients)
    # repeat-free pooling: weight each point by p_k / |D_k|
    X = np.concatenate([c.X for c in clients])
    y = np.concatenate([c.y for c in clients])
    sizes = np.array([c.size for c in clients])
    if np.allclose(p, sizes / sizes.sum(), rtol=0, atol=1e-12):
        return solve_optimum(spec, X, y, tol)
    # unequal weighting: minimise sum_k p_k F_k directly by gradient-weighted Newton
    return _weighted_optimum(clients, p, tol)


def _weighted_optimum(clients, p, tol, max_iter=100):
    spec = clients[0].task
    w = np.zeros(spec.n_params)
    for _ in range(max_iter):
        g = sum(pk * data_gradient(spec, c.X, c.y, w) for pk, c in zip(p, clients))
        if np.linalg.norm(g) < tol:
            return w
        H = sum(pk * _hessian(spec, c.X, c.y, w) for pk, c in zip(p, clients))
        w = w - np.linalg.lstsq(H, g, rcond=None)[0]
    raise OptimizationError("weighted global optimum did not converge")


def gamma_s(clients: Sequence[ClientDataset], global_opt=None, local_opts=None,
            tol: float = 1e-8) -> float:
    """f* - sum_k p_k F_k*: gap between the global optimum and the clients' own optima."""
    p = _normalized_weights(clients)
    w_star = global_optimum(clients, tol) if global_opt is None else global_opt
    if local_opts is None:
        local_opts = [solve_optimum(c.task, c.X, c.y, tol) for c in clients]
    f_star = float(sum(pk * local_loss(c, w_star) for pk, c in zip(p, clients)))
    local = float(sum(pk * local_loss(c, wk) for pk, c, wk in zip(p, clients, local_opts)))
    return f_star - local


def selection_skew(clients: Sequence[ClientDataset], w_eval, q: float,
                   local_optimal_losses: Sequence[float] | None = None,
                   max_clients: int = 12) -> float:
    """Expected selected-client objective gap over the all-client gap.

    Every subset Sel is weighted by q^|Sel| (1-q)^(K-|Sel|); the empty set adds
    nothing to the numerator.
    """
    K = len(clients)
    if K > max_clients:
        raise ValueError(f"enumeration over 2^{K} subsets is disabled above K={max_clients}")
    p = _normalized_weights(clients)
    if local_optimal_losses is None:
        local_optimal_losses = [
            local_loss(c, solve_optimum(c.task, c.X, c.y)) for c in clients
        ]
    gaps = np.array([local_loss(c, w_eval) for c in clients]) - np.asarray(local_optimal_losses)
    denom = float(p @ gaps)
    if abs(denom) < 1e-15:
        raise UndefinedSkewError("all-client gap is zero at the evaluation point")
    num = 0.0
    for sel in _subsets(K):
        ps = p[sel]
        num += selection_set_probability(q, K, len(sel)) * float(ps @ gaps[sel] / ps.sum())
    return num / denom


# -- constants --------------------------------------------------------------


def smoothness_constants(clients: Sequence[ClientDataset]) -> tuple[float, float]:
    """(L, mu) valid for every client's local loss.

    Least-squares uses the exact Hessian spectrum.  For softmax the Hessian is
    bounded by half the feature second-moment matrix, and strong convexity
    comes from the l2 term alone.
    """
    L, mu = 0.0, math.inf
    for c in clients:
        Xt = np.hstack([c.X, np.ones((c.size, 1))])
        eig = np.linalg.eigvalsh(Xt.T @ Xt / c.size)
        if c.task.loss_kind == "least-squares":
            L = max(L, eig[-1] + c.task.l2)
            mu = min(mu, max(eig[0], 0.0) + c.task.l2)
        else:
            L = max(L, 0.5 * eig[-1] + c.task.l2)
            mu = min(mu, c.task.l2)
    return float(L), float(mu)


def per_point_gradients(spec: TaskSpec, X: np.ndarray, y: np.ndarray, w) -> np.ndarray:
    """Row i is the gradient of point i's loss (l2 term included)."""
    d1 = spec.input_dim + 1
    W = np.asarray(w, dtype=float).reshape(spec.n_classes, d1)
    Xt = np.hstack([X, np.ones((len(y), 1))])
    R = Xt @ W.T
    if spec.loss_kind == "logistic":
        R = np.exp(R - R.max(axis=1, keepdims=True))
        R /= R.sum(axis=1, keepdims=True)
    R[np.arange(len(y)), y] -= 1.0
    G = np.einsum("nc,nd->ncd", R, Xt).reshape(len(y), -1)
    if spec.l2:
        G += spec.l2 * W.ravel()
    return G


def minibatch_variance(client: ClientDataset, w, batch_size: int) -> float:
    """Exact E||g_batch - grad F||^2 for uniform sampling with replacement.

    Zero when the batch covers the shard, since the trainer then uses the
    full gradient.
    """
    if batch_size >= client.size:
        return 0.0
    G = per_point_gradients(client.task, client.X, client.y, w)
    return float(np.mean(np.sum((G - G.mean(axis=0)) ** 2, axis=1)) / batch_size)


def minibatch_second_moment(client: ClientDataset, w, batch_size: int) -> float:
    """E||g_batch||^2 = ||grad F||^2 + minibatch variance."""
    full = data_gradient(client.task, client.X, client.y, w)
    return float(full @ full) + minibatch_variance(client, w, batch_size)


# -- bound evaluators -------------------------------------------------------


def join_weight_sum(p_join: Sequence[float]) -> float:
    """sum over non-empty winner sets W of prod_{i in W} p_i prod_{j not in W} (1 - p_j)."""
    p = np.asarray(p_join, dtype=float)
    return float(1.0 - np.prod(1.0 - p))


def bound_rhs(kind: str, constants: ConvergenceConstants, *, T: float | None = None,
              gamma: float | None = None, tau: int = 1, dist0: float = 0.0,
              eta: float | None = None, dist2: float | None = None,
              variance_term: float | None = None, p_join: Sequence[float] | None = None,
              join_sum: float | None = None) -> float:
    """Right-hand side of one of the convergence bounds.

    one_round
        One-round envelope on E||w_{t+1} - w*||^2 from ``dist2`` (the current
        expected squared distance), ``eta`` and ``variance_term``.
    decaying_rate
        Error after ``T`` iterations with eta_t = 1/(mu (t + gamma)) from an
        initial squared distance ``dist0``.
    auction_decaying_rate
        As decaying_rate with the local-drift term weighted by the winner-set
        probabilities (``p_join`` or a precomputed ``join_sum``).
    """
    c = constants
    if kind not in BOUND_KINDS:
        raise ValueError(f"unknown bound kind {kind!r}")
    if tau < 1:
        raise ValueError("tau must be >= 1")
    rl, ru = c.rho_lower, c.rho_upper
    if kind == "one_round":
        if eta is None or dist2 is None or variance_term is None:
            raise ValueError("one_round needs eta, dist2 and variance_term")
        return (
            (1 - eta * c.mu * (1 + 3 * rl / 8)) * dist2
            + 2 * eta * c.Gamma * (ru - rl)
            + eta**2 * c.sigma2 * variance_term
            + eta**2 * (32 * tau**2 * c.G2 + 6 * rl * c.L * c.Gamma)
        )
    if T is None or gamma is None:
        raise ValueError(f"{kind} needs T and gamma")
    if T < 0 or gamma <= 0:
        raise ValueError("need T >= 0 and gamma > 0")
    if kind == "decaying_rate":
        drift = 4 * (16 * tau**2 * c.G2 + c.sigma2)
    else:
        J = join_weight_sum(p_join) if join_sum is None else join_sum
        if p_join is None and join_sum is None:
            raise ValueError("auction_decaying_rate needs p_join or join_sum")
        drift = 64 * tau**2 * c.G2 * J + 4 * c.sigma2
    leading = (
        drift / (3 * rl * c.mu**2)
        + 8 * c.L**2 * c.Gamma / c.mu**2
        + c.L * gamma * dist0 / 2
    )
    return leading / (T + gamma) + 8 * c.L * c.Gamma / (3 * c.mu) * (ru / rl - 1)


# -- discrete alpha-fair surrogate -------------------------------------------


@dataclass(frozen=True)
class AllocationOptimum:
    counts: tuple[int, ...]
    losses: tuple[float, ...]
    variance: float
    cosine_ratio: float


def brute_force_alpha_fair_optimum(curves: Sequence[Callable[[int], float] | Sequence[float]],
                                   K: int, alpha: float) -> AllocationOptimum:
    """Minimise sum_s f_s(n_s)^alpha over integer splits with sum n_s <= K.

    ``curves[s]`` gives task s's loss with n clients, either as a callable or
    as a table indexed by n.  Ties keep the lexicographically first split.
    """
    S = len(curves)
    table = np.array([[c(n) if callable(c) else c[n] for n in range(K + 1)] for c in curves],
                     dtype=float)
    best, best_val = None, math.inf
    for split in itertools.product(range(K + 1), repeat=S):
        if sum(split) > K:
            continue
        val = float(sum(table[s, n] ** alpha for s, n in enumerate(split)))
        if val < best_val:
            best, best_val = split, val
    losses = [float(table[s, n]) for s, n in enumerate(best)]
    report = fairness_metrics(losses)
    return AllocationOptimum(tuple(best), tuple(losses), report.variance, report.cosine_ratio)


# -- local/global model discrepancy --------------------------------------------


def model_discrepancy(clients: Sequence[ClientDataset], w, q: float, tau: int,
                      lr: float) -> tuple[float, float, float]:
    """Full-batch local runs from ``w`` for every selection set.

    Returns (measured expected discrepancy, bound, measured G^2) where the
    bound is 16 eta^2 tau^2 G^2 sum_Sel B_Sel P2(Sel) and G^2 is the largest
    squared gradient norm seen on the local trajectories.
    """
    K = len(clients)
    p = _normalized_weights(clients)
    w = np.asarray(w, dtype=float)
    finals, G2 = [], 0.0
    for c in clients:
        v = w.copy()
        for _ in range(tau):
            g = data_gradient(c.task, c.X, c.y, v)
            G2 = max(G2, float(g @ g))
            v = v - lr * g
        finals.append(v)
    finals = np.array(finals)
    measured, weight = 0.0, 0.0
    for sel in _subsets(K):
        B = selection_set_probability(q, K, len(sel))
        ps = p[sel] / p[sel].sum()
        avg = ps @ finals[sel]
        measured += B * float(ps @ np.sum((finals[sel] - avg) ** 2, axis=1))
        weight += B * pairwise_weight(p[sel])
    return measured, 16 * lr**2 * tau**2 * G2 * weight, G2


# -- empirical bound envelope --------------------------------------------------


@dataclass(frozen=True)
class EnvelopeRow:
    T: int
    measured_gap: float
    bound: float

    @property
    def holds(self) -> bool:
        return self.measured_gap <= self.bound


def bound_envelope(clients: Sequence[ClientDataset], tau: int, batch_size: int,
                   horizons: Sequence[int], seeds: Sequence[int],
                   margin: float = 1.1) -> tuple[ConvergenceConstants, float, list[EnvelopeRow]]:
    """Measured E[f(w_T)] - f* against the decaying-rate bound for one task.

    Every client trains every round, so the selection skew is exactly one.
    L and mu come from the Hessian spectrum, G^2 and sigma^2 are the largest
    values seen at the global iterates of all runs, times ``margin``.  The
    schedule is eta_t = 1/(mu (t + gamma)) with gamma = max(8 L / mu, tau).
    Horizons count local iterations and must be multiples of ``tau``.
    """
    from .allocation import AllocationPolicy
    from .fedtrain import initial_state, run_round
    from .model import DecayingLR, Scenario, TestSet, TrainingConfig, global_loss

    if any(T % tau for T in horizons):
        raise ValueError("horizons must be multiples of tau")
    spec = clients[0].task
    L, mu = smoothness_constants(clients)
    if mu <= 0:
        raise ValueError("task is not strongly convex")
    gamma = max(8 * L / mu, float(tau))
    rounds = max(horizons) // tau
    config = TrainingConfig(tau, batch_size, DecayingLR(mu, gamma), rounds, 1.0)
    X = np.concatenate([c.X for c in clients])
    y = np.concatenate([c.y for c in clients])
    scenario = Scenario([spec], [list(clients)], [TestSet(spec, X, y)])
    policy = AllocationPolicy("random")

    w_star = global_optimum(clients)
    f_star = global_loss(clients, w_star)
    gaps = {T: [] for T in horizons}
    G2 = sig2 = 0.0
    for seed in seeds:
        state = initial_state(scenario, seed)
        points = [state.weights[0].values]
        for r in range(rounds):
            state, _, _ = run_round(state, scenario, policy, config)
            points.append(state.weights[0].values)
            if (r + 1) * tau in gaps:
                gaps[(r + 1) * tau].append(global_loss(clients, state.weights[0]) - f_star)
        for w in points:
            for c in clients:
                G2 = max(G2, minibatch_second_moment(c, w, batch_size))
                sig2 = max(sig2, minibatch_variance(c, w, batch_size))
    consts = ConvergenceConstants(L, mu, margin * sig2, margin * G2,
                                  max(gamma_s(clients, w_star), 0.0))
    dist0 = float(w_star @ w_star)  # runs start from zero
    rows = [
        EnvelopeRow(T, float(np.mean(gaps[T])),
                    bound_rhs("decaying_rate", consts, T=T, gamma=gamma, tau=tau, dist0=dist0))
        for T in horizons
    ]
    return consts, gamma, rows
