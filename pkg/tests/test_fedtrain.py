import json

import numpy as np
import pytest

from mmfl.allocation import AllocationPolicy, active_count
from mmfl.errors import TrainingAborted
from mmfl.fedtrain import (
    CSV_FIELDS,
    Recruitment,
    initial_state,
    metrics_csv,
    run_round,
    run_training,
    write_run,
)
from mmfl.model import (
    ConstantLR,
    DecayingLR,
    ParamVector,
    TaskSpec,
    TrainingConfig,
    generate_scenario,
    local_sgd,
)

RANDOM = AllocationPolicy("random")
ALPHA3 = AllocationPolicy("alpha_fair", 3.0)


def test_degenerate_round_is_local_sgd():
    sc = generate_scenario([TaskSpec(0, 1.0, 3)], 1, (15, 15), seed=1)
    cfg = TrainingConfig(tau=3, batch_size=100, lr_schedule=ConstantLR(0.2), rounds=1)
    state, m, _ = run_round(initial_state(sc, 0), sc, RANDOM, cfg)
    ref = local_sgd(sc.clients[0][0], ParamVector.zeros(sc.tasks[0]), 3, 0.2, 100,
                    np.random.default_rng(0))
    assert np.array_equal(state.weights[0].values, ref.values)
    assert m.n_selected == (1,)


def test_two_client_aggregate_is_average():
    sc = generate_scenario([TaskSpec(0, 1.0, 3)], 2, (20, 20), seed=2)
    cfg = TrainingConfig(tau=1, batch_size=100, lr_schedule=ConstantLR(0.5), rounds=1)
    state, _, _ = run_round(initial_state(sc, 0), sc, RANDOM, cfg)
    w0 = ParamVector.zeros(sc.tasks[0])
    ups = [local_sgd(c, w0, 1, 0.5, 100, np.random.default_rng(0)).values for c in sc.clients[0]]
    assert np.allclose(state.weights[0].values, (ups[0] + ups[1]) / 2, atol=1e-15)


def test_empty_selection_leaves_weights_untouched():
    sc = generate_scenario([TaskSpec(0, 1.0, 2), TaskSpec(1, 1.0, 2)], 4, (10, 10), seed=3)
    cfg = TrainingConfig(tau=1, batch_size=4, lr_schedule=ConstantLR(0.3), rounds=3,
                         participation=0.25)
    state = initial_state(sc, 0)
    state.weights[1] = ParamVector(np.full(6, 0.7), 1)
    rr = AllocationPolicy("round_robin")
    new, m, a = run_round(state, sc, rr, cfg)
    idle = 1 - a.task_of(next(iter(a.active_clients)))
    assert m.n_selected[idle] == 0
    assert new.weights[idle].values.tobytes() == state.weights[idle].values.tobytes()


def test_round_past_horizon_rejected(small_scenario):
    cfg = TrainingConfig(rounds=1)
    state, _, _ = run_round(initial_state(small_scenario, 0), small_scenario, RANDOM, cfg)
    with pytest.raises(ValueError):
        run_round(state, small_scenario, RANDOM, cfg)


def test_round_invariants(small_scenario):
    cfg = TrainingConfig(tau=2, batch_size=4, rounds=15, participation=0.5)
    state = initial_state(small_scenario, 4)
    for t in range(15):
        state, m, a = run_round(state, small_scenario, ALPHA3, cfg)
        assert sum(m.n_selected) == len(a.active_clients) == active_count(6, 0.5)
        seen = [k for members in a.sel.values() for k in members]
        assert len(seen) == len(set(seen))
        assert len(state.signal_history) == t + 1
        assert all(np.all(np.isfinite(w.values)) for w in state.weights)


def test_aggregate_is_convex_combination():
    sc = generate_scenario([TaskSpec(0, 1.0, 1)], 3, (10, 10), seed=5)
    cfg = TrainingConfig(tau=4, batch_size=2, rounds=1, lr_schedule=ConstantLR(0.4))
    state, _, _ = run_round(initial_state(sc, 9), sc, RANDOM, cfg)
    # replay the uploads with the same generator stream
    rng = np.random.default_rng(np.random.SeedSequence(9))
    rng.choice(1, p=[1.0]); rng.choice(1, p=[1.0]); rng.choice(1, p=[1.0])
    w0 = ParamVector.zeros(sc.tasks[0])
    ups = np.array([local_sgd(c, w0, 4, 0.4, 2, rng).values for c in sc.clients[0]])
    lo, hi = ups.min(axis=0), ups.max(axis=0)
    w = state.weights[0].values
    assert np.all(w >= lo - 1e-12) and np.all(w <= hi + 1e-12)


def test_training_is_deterministic(small_scenario):
    cfg = TrainingConfig(tau=2, batch_size=4, rounds=10, participation=0.5)
    a = run_training(small_scenario, ALPHA3, cfg, seed=11)
    b = run_training(small_scenario, ALPHA3, cfg, seed=11)
    assert metrics_csv(a.metrics) == metrics_csv(b.metrics)
    c = run_training(small_scenario, ALPHA3, cfg, seed=12)
    assert metrics_csv(a.metrics) != metrics_csv(c.metrics)


def test_zero_rounds(small_scenario):
    r = run_training(small_scenario, RANDOM, TrainingConfig(rounds=0), seed=0)
    assert r.metrics == []
    assert all(not np.any(w.values) for w in r.weights)
    assert r.final_accuracy == ()


def test_hard_task_gets_most_clients():
    specs = [TaskSpec(0, 1.0, 3, 2), TaskSpec(1, 1.5, 4, 2), TaskSpec(2, 5.0, 10, 6)]
    sc = generate_scenario(specs, 20, (30, 40), seed=6)
    cfg = TrainingConfig(tau=2, batch_size=8, rounds=30, participation=0.5,
                         lr_schedule=ConstantLR(0.2))
    counts = run_training(sc, ALPHA3, cfg, seed=0).cumulative_counts()
    assert counts.argmax() == 2


def test_symmetric_tasks_under_random():
    specs = [TaskSpec(s, 2.0, 4, 3, data_seed=42) for s in range(3)]
    sc = generate_scenario(specs, 20, (30, 40), seed=1)
    cfg = TrainingConfig(tau=2, batch_size=8, rounds=40, participation=0.6,
                         lr_schedule=ConstantLR(0.2))
    spreads = []
    for seed in range(5):
        acc = np.array(run_training(sc, RANDOM, cfg, seed).final_accuracy)
        spreads.append(acc.max() - acc.min())
    assert np.mean(spreads) < 0.03


def test_decaying_schedule_windowed_loss_trend():
    sc = generate_scenario([TaskSpec(0, 1.0, 3, 2, "least-squares")], 6, (30, 30), seed=2)
    cfg = TrainingConfig(tau=2, batch_size=4, rounds=100, participation=0.5,
                         lr_schedule=DecayingLR(mu=0.5, gamma=40.0))
    losses = np.array([m.loss[0] for m in run_training(sc, RANDOM, cfg, 3).metrics])
    windows = losses.reshape(5, 20).mean(axis=1)
    assert np.all(np.diff(windows) <= 1e-9)


def test_failure_keeps_partial_metrics():
    sc = generate_scenario([TaskSpec(0, 1.0, 3, 2, "least-squares")], 2, (10, 10), seed=0)
    cfg = TrainingConfig(tau=5, batch_size=10, rounds=50, lr_schedule=ConstantLR(1e3))
    with np.errstate(all="ignore"), pytest.raises(TrainingAborted) as info:
        run_training(sc, RANDOM, cfg, seed=0)
    assert 0 < len(info.value.metrics) < 50


def test_csv_and_json_output(small_scenario, tmp_path):
    cfg = TrainingConfig(tau=1, batch_size=4, rounds=3, participation=0.5)
    r = run_training(small_scenario, RANDOM, cfg, seed=0)
    text = metrics_csv(r.metrics)
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_FIELDS)
    assert len(lines) == 1 + 3 * 2
    csv_path, json_path = write_run(r, tmp_path, "run")
    assert csv_path.read_text() == text
    summary = json.loads(json_path.read_text())
    assert summary["min_accuracy"] == min(summary["final_accuracy"])
    assert summary["variance"] == pytest.approx(np.var(summary["final_accuracy"]))


def test_recruitment_frequency_and_respect(small_scenario):
    x = np.zeros((6, 2))
    x[:3, 0] = 1.0
    x[3:, 1] = 1.0
    x[0, 1] = 0.5
    rec = Recruitment(x)
    rng = np.random.default_rng(0)
    n = 20_000
    hits = sum(1 in rec.feasible(rng)[0] for _ in range(n))
    assert abs(hits / n - 0.5) <= 3 * np.sqrt(0.25 / n)

    cfg = TrainingConfig(tau=1, batch_size=4, rounds=20, participation=1.0)
    seen = []
    run_training(small_scenario, ALPHA3, cfg, 0, rec, on_round=lambda m, a: seen.append(a))
    for a in seen:
        for s, members in a.sel.items():
            assert all(x[k, s] > 0 for k in members)


def test_vacuous_recruitment_changes_nothing(small_scenario):
    cfg = TrainingConfig(tau=1, batch_size=4, rounds=5, participation=0.5)
    plain = run_training(small_scenario, ALPHA3, cfg, 0)
    full = run_training(small_scenario, ALPHA3, cfg, 0, Recruitment(np.ones((6, 2))))
    assert metrics_csv(plain.metrics) == metrics_csv(full.metrics)


def test_recruitment_validation():
    with pytest.raises(ValueError):
        Recruitment(np.array([[1.5]]))
    with pytest.raises(ValueError):
        Recruitment(np.ones(3))
