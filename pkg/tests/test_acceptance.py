"""Acceptance checks.  Each test records one PASS/FAIL line for the summary.

Run ``python3 tests/test_acceptance.py`` to print the lines without pytest.
"""

import itertools
import time
from pathlib import Path

import numpy as np
import pytest

from mmfl.allocation import alpha_fair_probabilities
from mmfl.analysis import (
    bound_envelope,
    brute_force_alpha_fair_optimum,
    selection_term,
)
from mmfl.auctions import (
    EPS,
    BidMatrix,
    gmmfair,
    no_user_probability_exp,
    no_user_probability_mc,
    proportional_share,
    upward_deviations,
)
from mmfl.config import PRESETS, parse_config, preset
from mmfl.fedtrain import run_training
from mmfl.harness import build_scenario, run_scenario
from mmfl.model import TaskSpec, generate_scenario

_RESULTS: dict[int, tuple[bool, str]] = {}


def _line(n: int) -> str:
    ok, detail = _RESULTS[n]
    return f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def report_lines() -> list[str]:
    return [_line(n) for n in sorted(_RESULTS)]


def _record(n: int, ok: bool, detail: str):
    _RESULTS[n] = (bool(ok), detail)
    assert ok, detail


# -- 1 ------------------------------------------------------------------------


def check_allocation():
    start = time.perf_counter()
    ok = np.allclose(alpha_fair_probabilities([0.9, 0.3], 3), [0.9, 0.1], rtol=0, atol=1e-12)
    ok &= np.allclose(alpha_fair_probabilities([0.5, 0.5, 0.5], 3), [1 / 3] * 3, rtol=0, atol=1e-12)
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        f = rng.uniform(0.01, 1.0, size=rng.integers(1, 6))
        ok &= np.allclose(alpha_fair_probabilities(f, 1.0), 1 / f.size, rtol=0, atol=1e-12)
        a = rng.uniform(1, 10)
        c = rng.uniform(0.01, 100)
        worst = max(worst, float(np.abs(
            alpha_fair_probabilities(c * f, a) - alpha_fair_probabilities(f, a)).max()))
    ok &= worst <= 1e-12
    elapsed = time.perf_counter() - start
    ok &= elapsed < 1.0
    return ok, f"hand examples, alpha=1 uniform, scale invariance err {worst:.1e}, {elapsed:.2f}s"


def test_criterion_1_allocation_exactness():
    _record(1, *check_allocation())


# -- 2 ------------------------------------------------------------------------


def _monotone_share(K, conditional, n=100, alphas=(1, 2, 3, 4, 5)):
    rng = np.random.default_rng(2024 + K)
    good = 0
    for _ in range(n):
        f = rng.uniform(0.05, 1.0, size=3)
        vals = [selection_term(f, a, K, conditional=conditional) for a in alphas]
        good += all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))
    return good


def check_selection_term(conditional=False):
    start = time.perf_counter()
    counts = {K: _monotone_share(K, conditional) for K in (2, 4, 8)}
    elapsed = time.perf_counter() - start
    ok = all(c == 100 for c in counts.values()) and elapsed < 10
    detail = ", ".join(f"K={K}: {c}/100 monotone" for K, c in counts.items())
    return ok, f"{detail} ({elapsed:.2f}s)"


def test_criterion_2_selection_term_monotone():
    # Known red: the j >= 1 sum is not monotone for small K (see README).
    _record(2, *check_selection_term())


def test_conditional_selection_term_is_monotone():
    ok, detail = check_selection_term(conditional=True)
    assert ok, detail


# -- 3 ------------------------------------------------------------------------


def check_fairness_orderings(n_instances=200, K=10):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    var_ok = cos_ok = 0
    for _ in range(n_instances):
        curves = []
        for _s in range(2):
            a, b, c = rng.uniform(0.5, 2.0), rng.uniform(0.3, 1.5), rng.uniform(0.0, 0.3)
            curves.append([c + a / (1 + n) ** b for n in range(K + 1)])
        o1 = brute_force_alpha_fair_optimum(curves, K, 1.0)
        o2 = brute_force_alpha_fair_optimum(curves, K, 2.0)
        var_ok += o2.variance <= o1.variance
        cos_ok += o2.cosine_ratio >= o1.cosine_ratio
    elapsed = time.perf_counter() - start
    ok = var_ok == n_instances and cos_ok == n_instances and elapsed < 30
    return ok, f"variance {var_ok}/{n_instances}, cosine {cos_ok}/{n_instances} ({elapsed:.1f}s)"


def test_criterion_3_fairness_orderings():
    _record(3, *check_fairness_orderings())


# -- 4 ------------------------------------------------------------------------

GRID4 = (0.1, 0.2, 0.3, 0.4, 0.5)
BUDGETS4 = (0.3, 0.6, 1.0, 1.5, 2.4)


def _min_cost_by_size(col):
    """Cheapest subset of every size, by enumerating all subsets."""
    n = len(col)
    masks = np.array(list(itertools.product((0, 1), repeat=n)), dtype=float)
    costs = masks @ np.asarray(col)
    sizes = masks.sum(axis=1).astype(int)
    return [float(costs[sizes == j].min()) for j in range(n + 1)]


def maxmin_oracle(best0, best1, budget):
    top = 0
    for j0, c0 in enumerate(best0):
        for j1, c1 in enumerate(best1):
            if c0 + c1 <= budget + EPS:
                top = max(top, min(j0, j1))
    return top


def check_gmmfair():
    start = time.perf_counter()
    checked = mismatches = 0
    for n in range(1, 7):
        columns = list(itertools.combinations_with_replacement(GRID4, n))
        best = {col: _min_cost_by_size(col) for col in columns}
        for c0 in columns:
            for c1 in columns:
                bids = np.column_stack([c0, c1])
                for B in BUDGETS4:
                    checked += 1
                    if gmmfair(bids, B).maxmin != maxmin_oracle(best[c0], best[c1], B):
                        mismatches += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 120
    return ok, f"{checked} instances, {mismatches} mismatches ({elapsed:.0f}s)"


@pytest.mark.slow
def test_criterion_4_gmmfair_optimality():
    _record(4, *check_gmmfair())


# -- 5 ------------------------------------------------------------------------

GRID5 = tuple(round(0.1 * i, 1) for i in range(1, 11))
DEVIATIONS5 = tuple(round(0.1 * i, 1) for i in range(0, 16))


def ps_profitable_deviations(budgets=(1.0, 2.0)):
    checked = profitable = 0
    for n in range(1, 6):
        for costs in itertools.combinations_with_replacement(GRID5, n):
            costs = np.array(costs)
            for B in budgets:
                base = proportional_share(costs, B)
                for i in range(n):
                    u_true = base.payments[i, 0] - costs[i] if base.winners[i, 0] else 0.0
                    for v in DEVIATIONS5:
                        if v == costs[i]:
                            continue
                        bids = costs.copy()
                        bids[i] = v
                        dev = proportional_share(bids, B)
                        u_dev = dev.payments[i, 0] - costs[i] if dev.winners[i, 0] else 0.0
                        checked += 1
                        profitable += u_dev > u_true + EPS
    return checked, profitable


def maxmin_fuzz(n_instances=10_000, seed=0):
    rng = np.random.default_rng(seed)
    grid = np.round(np.arange(1, 21) * 0.05, 2)
    budgets = np.round(np.arange(1, 13) * 0.25, 2)
    profitable = misplaced = 0
    max_gap = 0.0
    for _ in range(n_instances):
        n, S = int(rng.integers(1, 7)), int(rng.integers(2, 4))
        costs = rng.choice(grid, size=(n, S))
        B = float(rng.choice(budgets))
        for _i, _s, _v, r in upward_deviations(BidMatrix(costs, costs), B, grid):
            max_gap = max(max_gap, r.maxmin_gap)
            if r.profitable:
                profitable += 1
                misplaced += r.deviation_round_type not in ("reallocation", "fractional")
    return profitable, misplaced, max_gap


def check_truthfulness():
    start = time.perf_counter()
    checked, ps_bad = ps_profitable_deviations()
    profitable, misplaced, max_gap = maxmin_fuzz()
    elapsed = time.perf_counter() - start
    ok = ps_bad == 0 and misplaced == 0 and max_gap <= 2 and elapsed < 300
    return ok, (
        f"PS: {ps_bad} profitable of {checked}; max-min: {profitable} profitable, "
        f"{misplaced} outside reallocation/fractional rounds, max gap {max_gap:g} ({elapsed:.0f}s)"
    )


@pytest.mark.slow
def test_criterion_5_truthfulness():
    _record(5, *check_truthfulness())


# -- 6 ------------------------------------------------------------------------


def check_no_user_probability():
    start = time.perf_counter()
    mm = no_user_probability_exp(1, 2, 2, "maxmin")
    bf = no_user_probability_exp(1, 2, 2, "budget-fair")
    ok = abs(mm - 0.40601) < 1e-4 and abs(bf - 0.60042) < 1e-4
    rng = np.random.default_rng(6)
    zs = []
    for mech, exact in (("maxmin", mm), ("budget-fair", bf)):
        est, se = no_user_probability_mc(1.0, 2.0, mech, 100_000, rng, n_users=3)
        zs.append(abs(est - exact) / se)
    ok &= all(z <= 3 for z in zs)
    grid_ok = all(
        no_user_probability_exp(lam, B, 2, "maxmin") <= no_user_probability_exp(lam, B, 2, "budget-fair")
        for lam in (0.25, 0.5, 1.0, 2.0, 4.0) for B in (0.5, 1.0, 2.0, 4.0, 8.0)
    )
    ok &= grid_ok
    elapsed = time.perf_counter() - start
    ok &= elapsed < 60
    return ok, (f"maxmin {mm:.5f}, budget-fair {bf:.5f}, MC |z| = {zs[0]:.2f}, {zs[1]:.2f}, "
                f"ordering on 25-point grid {'holds' if grid_ok else 'fails'} ({elapsed:.0f}s)")


@pytest.mark.slow
def test_criterion_6_no_user_probability():
    _record(6, *check_no_user_probability())


# -- 7 ------------------------------------------------------------------------


def check_experiment1():
    start = time.perf_counter()
    cfg = parse_config(preset("exp1-desk"))
    alpha, rand = cfg.policies[0], cfg.policies[1]
    finals = {alpha.label: [], rand.label: []}
    for seed in cfg.seeds:
        scenario = build_scenario(cfg, seed)
        for policy in (alpha, rand):
            finals[policy.label].append(run_training(scenario, policy, cfg.training, seed).final_accuracy)
    a, r = np.array(finals[alpha.label]), np.array(finals[rand.label])
    wins = int(np.sum(a.min(axis=1) >= r.min(axis=1)))
    var_a, var_r = a.var(axis=1).mean(), r.var(axis=1).mean()
    diff = abs(a.mean() - r.mean())
    elapsed = time.perf_counter() - start
    ok = wins >= 4 and var_a < var_r and diff <= 0.02 and elapsed < 300
    return ok, (f"min-acc wins {wins}/5, variance {var_a:.5f} vs {var_r:.5f}, "
                f"mean {a.mean():.4f} vs {r.mean():.4f} ({elapsed:.0f}s)")


@pytest.mark.slow
def test_criterion_7_experiment1_analogue():
    _record(7, *check_experiment1())


# -- 8 ------------------------------------------------------------------------


def check_alpha_sweep():
    start = time.perf_counter()
    cfg = parse_config(preset("exp4-alpha"))
    seed = cfg.seeds[0]
    scenario = build_scenario(cfg, seed)
    hardest = len(cfg.tasks) - 1
    shares, argmax_ok = [], True
    for policy in cfg.policies:
        result = run_training(scenario, policy, cfg.training, seed)
        counts = result.cumulative_counts()
        shares.append(counts[hardest] / counts.sum())
        if policy.alpha == 64:
            errors = 1 - np.array([m.accuracy for m in result.metrics])
            argmax_ok = bool(np.all(errors.argmax(axis=1) == hardest))
    monotone = all(b >= a for a, b in zip(shares, shares[1:]))
    elapsed = time.perf_counter() - start
    ok = monotone and shares[-1] >= 0.9 and argmax_ok and elapsed < 600
    text = ", ".join(f"{p.alpha:g}:{s:.3f}" for p, s in zip(cfg.policies, shares))
    return ok, f"hardest-task share {text}; argmax throughout at alpha=64: {argmax_ok} ({elapsed:.0f}s)"


@pytest.mark.slow
def test_criterion_8_alpha_sweep():
    _record(8, *check_alpha_sweep())


# -- 9 ------------------------------------------------------------------------


def check_bound_envelope():
    start = time.perf_counter()
    spec = TaskSpec(0, 1.0, 3, 2, "least-squares")
    clients = generate_scenario([spec], 2, (100, 100), seed=3).clients[0]
    _consts, _gamma, rows = bound_envelope(clients, tau=2, batch_size=4,
                                           horizons=(50, 100, 200), seeds=range(20))
    elapsed = time.perf_counter() - start
    ok = all(r.holds for r in rows) and elapsed < 120
    text = ", ".join(f"T={r.T}: {r.measured_gap:.4f} <= {r.bound:.2f}" for r in rows)
    return ok, f"{text} ({elapsed:.0f}s)"


@pytest.mark.slow
def test_criterion_9_bound_envelope():
    _record(9, *check_bound_envelope())


# -- 10 -----------------------------------------------------------------------


def _csv_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


def check_determinism(tmp_path: Path):
    start = time.perf_counter()
    differing = []
    for name in sorted(PRESETS):
        doc = preset(name)
        doc["seeds"] = doc["seeds"][:1]
        cfg = parse_config(doc)
        outs = []
        for rep in range(2):
            out = tmp_path / f"{name}-{rep}"
            run_scenario(cfg, out)
            outs.append(_csv_bytes(out))
        if outs[0] != outs[1] or not outs[0]:
            differing.append(name)
    elapsed = time.perf_counter() - start
    state = f"differing: {', '.join(differing)}" if differing else "all byte-identical"
    return not differing, f"{len(PRESETS)} presets, {state} ({elapsed:.0f}s)"


@pytest.mark.slow
def test_criterion_10_determinism(tmp_path):
    _record(10, *check_determinism(tmp_path))


if __name__ == "__main__":
    import tempfile

    checks = [check_allocation, check_selection_term, check_fairness_orderings, check_gmmfair,
              check_truthfulness, check_no_user_probability, check_experiment1, check_alpha_sweep,
              check_bound_envelope]
    for n, fn in enumerate(checks, start=1):
        _RESULTS[n] = fn()
        print(_line(n), flush=True)
    with tempfile.TemporaryDirectory() as tmp:
        _RESULTS[10] = check_determinism(Path(tmp))
    print(_line(10))
