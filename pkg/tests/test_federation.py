import copy

import numpy as np
import pytest

from splitmix import rngs
from splitmix.base_models import build_base_models, members_for_width
from splitmix.baselines import fedavg_individual
from splitmix.data import LabeledDataset
from splitmix.errors import ProtocolError
from splitmix.federation import (
    AggregationAccumulator, ClientSpec, TrainingSchedule, build_clients,
    clone_base, init_server, learning_rate, local_train, run_round,
    select_participants,
)
from splitmix.nn import layers as L
from splitmix.nn.losses import cross_entropy
from splitmix.nn.optim import SGD

ARCH = {
    "id": "fed", "input_shape": [4], "num_classes": 2,
    "layers": [{"kind": "dense", "out": 8}, {"kind": "bn"}, {"kind": "relu"},
               {"kind": "dense", "out": 2}],
}


def toy_dataset(n=24, seed=0, classes=2, dim=4):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (n, dim))
    y = rng.integers(0, classes, n).astype(np.int64)
    return LabeledDataset(x, y, classes)


def make_clients(num, *, budget=1.0, n=24):
    shards = [toy_dataset(n=n, seed=100 + k) for k in range(num)]
    budgets = [budget] * num if np.isscalar(budget) else list(budget)
    return build_clients(shards, budgets, val_fraction=0.1, seed=0)


# ---------------------------------------------------------------------------
# local training

def test_zero_epochs_leave_parameters_unchanged():
    base_set = build_base_models(ARCH, 0.5, master_seed=0)
    model = clone_base(base_set, 0)
    before = model.state()
    local_train({0: model}, toy_dataset(), epochs=0, lr=0.1, batch_size=8,
                momentum=0.9, weight_decay=5e-4, batch_rng=rngs.rng_for(0, 1))
    for key, arr in model.state().items():
        assert np.array_equal(arr, before[key])


def test_single_batch_single_step_equals_direct_sgd_application():
    base_set = build_base_models(ARCH, 1.0, master_seed=1)
    ds = toy_dataset(n=8)
    model = clone_base(base_set, 0)
    local_train({0: model}, ds, epochs=1, lr=0.05, batch_size=8,
                momentum=0.9, weight_decay=5e-4, batch_rng=rngs.rng_for(0, 2))

    # replay: a single full batch (order irrelevant for one batch)
    reference = clone_base(base_set, 0)
    idx = rngs.rng_for(0, 2).permutation(8)
    logits = reference.forward(ds.x[idx], L.TRAIN)
    _, dlogits = cross_entropy(logits, ds.y[idx])
    reference.backward(dlogits)
    SGD(0.9, 5e-4).step(reference.params(), reference.grads(), 0.05)
    for key, arr in model.state().items():
        assert np.array_equal(arr, reference.state()[key]), key


def test_parallel_and_sequential_base_training_are_bit_identical():
    ds = toy_dataset(n=32, seed=3)
    base_set = build_base_models(ARCH, 0.5, master_seed=2)

    together = {i: clone_base(base_set, i) for i in range(2)}
    local_train(together, ds, epochs=2, lr=0.1, batch_size=8, momentum=0.9,
                weight_decay=5e-4, batch_rng=rngs.rng_for(0, 3))

    for i in range(2):
        alone = {i: clone_base(base_set, i)}
        local_train(alone, ds, epochs=2, lr=0.1, batch_size=8, momentum=0.9,
                    weight_decay=5e-4, batch_rng=rngs.rng_for(0, 3))
        for key, arr in alone[i].state().items():
            assert np.array_equal(arr, together[i].state()[key]), (i, key)


# ---------------------------------------------------------------------------
# aggregation

def test_single_contributor_is_returned_exactly():
    acc = AggregationAccumulator()
    state = {"w": np.array([1.5, -2.0])}
    acc.add(0, state, 17.0)
    np.testing.assert_array_equal(acc.finalize(0)["w"], state["w"])


def test_two_client_weighted_mean_hand_case():
    acc = AggregationAccumulator()
    acc.add(0, {"w": np.array([1.0])}, 1.0)   # a, |D|=1
    acc.add(0, {"w": np.array([5.0])}, 3.0)   # b, |D|=3
    np.testing.assert_array_equal(acc.finalize(0)["w"], [(1.0 + 3 * 5.0) / 4.0])


def test_untrained_base_finalizes_to_none():
    acc = AggregationAccumulator()
    acc.add(0, {"w": np.array([1.0])}, 2.0)
    assert acc.finalize(1) is None
    assert acc.weight(1) == 0.0


def test_aggregate_stays_in_per_coordinate_convex_hull():
    rng = np.random.default_rng(9)
    acc = AggregationAccumulator()
    states = [{"w": rng.standard_normal(6)} for _ in range(5)]
    weights = rng.uniform(0.5, 4.0, 5)
    for st, w in zip(states, weights):
        acc.add(0, st, float(w))
    out = acc.finalize(0)["w"]
    stack = np.stack([s["w"] for s in states])
    assert np.all(out >= stack.min(0) - 1e-12)
    assert np.all(out <= stack.max(0) + 1e-12)


# ---------------------------------------------------------------------------
# rounds

def test_round_bookkeeping_matches_budget_caps():
    clients = make_clients(4, budget=[1.0, 0.5, 0.25, 0.25])
    base_set = build_base_models(ARCH, 0.25, master_seed=4)
    server = init_server(base_set, seed=0)
    schedule = TrainingSchedule(rounds=1, local_epochs=1, batch_size=8)
    record = run_round(server, clients, 0, schedule)
    sizes = [len(record.assignments[c.id]) for c in clients]
    assert sizes == [4, 2, 1, 1]
    # per-base accumulated weights sum to the total assignment mass
    total_weight = sum(record.base_weights.values())
    assert total_weight == sum(len(clients[k].train) * sizes[k] for k in range(4))
    per_base = record.uploaded_params // sum(sizes)
    assert record.uploaded_params == per_base * sum(sizes)


def test_untrained_base_keeps_previous_parameters():
    clients = make_clients(1, budget=0.5)      # one client, half budget
    base_set = build_base_models(ARCH, 0.5, master_seed=5)
    before = [b.state() for b in base_set.bases]
    server = init_server(base_set, seed=1)
    schedule = TrainingSchedule(rounds=1, local_epochs=1, batch_size=8)
    record = run_round(server, clients, 0, schedule)
    trained = record.assignments[0]
    assert len(trained) == 1
    untouched = 1 - trained[0]
    for key, arr in base_set.bases[untouched].state().items():
        assert np.array_equal(arr, before[untouched][key])
    changed = any(not np.array_equal(arr, before[trained[0]][key])
                  for key, arr in base_set.bases[trained[0]].state().items())
    assert changed


def test_budget_below_atom_width_raises_protocol_error():
    clients = make_clients(1, budget=0.25)
    base_set = build_base_models(ARCH, 0.5, master_seed=5)
    server = init_server(base_set, seed=1)
    with pytest.raises(ProtocolError):
        run_round(server, clients, 0, TrainingSchedule(rounds=1))


def test_completion_order_does_not_change_results():
    clients = make_clients(4, budget=[1.0, 0.5, 0.5, 0.25])
    schedule = TrainingSchedule(rounds=1, local_epochs=1, batch_size=8)

    def run_with_order(order):
        base_set = build_base_models(ARCH, 0.25, master_seed=6)
        server = init_server(base_set, seed=2)
        run_round(server, clients, 0, schedule, completion_order=order)
        return [b.state() for b in base_set.bases]

    forward = run_with_order([0, 1, 2, 3])
    backward = run_with_order([3, 2, 1, 0])
    shuffled = run_with_order([2, 0, 3, 1])
    for a, b, c in zip(forward, backward, shuffled):
        for key in a:
            assert np.array_equal(a[key], b[key]), key
            assert np.array_equal(a[key], c[key]), key


def test_participation_subset_is_uniform_and_reproducible():
    rng = rngs.rng_for(0, rngs.PARTICIPATION, 5)
    subset = select_participants(10, 5, rng)
    assert subset == select_participants(10, 5, rngs.rng_for(0, rngs.PARTICIPATION, 5))
    counts = np.zeros(8)
    for t in range(4000):
        for i in select_participants(8, 1, rngs.rng_for(1, rngs.PARTICIPATION, t)):
            counts[i] += 1
    freqs = counts / 4000
    assert np.all(np.abs(freqs - 1 / 8) < 0.02)


def test_learning_rate_schedules():
    s = TrainingSchedule(rounds=400, lr_kind="step", base_lr=0.01,
                         milestones=(150, 250), lr_gamma=0.1)
    assert learning_rate(s, 0) == 0.01
    assert learning_rate(s, 150) == pytest.approx(0.001)
    assert learning_rate(s, 260) == pytest.approx(0.0001)
    c = TrainingSchedule(rounds=100, lr_kind="cosine", base_lr=0.1)
    assert learning_rate(c, 0) == pytest.approx(0.1)
    assert learning_rate(c, 99) < 0.0001 * 50
    assert learning_rate(TrainingSchedule(lr_kind="constant", base_lr=0.05), 7) == 0.05


# ---------------------------------------------------------------------------
# FedAvg reduction: single-base split-mix must equal the reference exactly

def test_single_base_splitmix_is_bit_identical_to_fedavg_reference():
    clients = make_clients(3, budget=1.0, n=20)
    schedule = TrainingSchedule(rounds=10, local_epochs=1, batch_size=8,
                                lr_kind="constant", base_lr=0.1)
    base_set = build_base_models(ARCH, 1.0, master_seed=0)
    server = init_server(base_set, seed=0)
    trajectory = []
    for t in range(schedule.rounds):
        run_round(server, clients, t, schedule)
        trajectory.append(base_set.bases[0].state())

    ref_trajectory = []
    fedavg_individual(ARCH, 1.0, clients, schedule, seed=0,
                      on_round=lambda t, m: ref_trajectory.append(m.state()))
    assert len(trajectory) == len(ref_trajectory)
    for t, (a, b) in enumerate(zip(trajectory, ref_trajectory)):
        for key in a:
            assert np.array_equal(a[key], b[key]), (t, key)
