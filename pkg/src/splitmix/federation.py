"""Federated protocol engine: budgets, local training, rounds, aggregation.

A round proceeds in three phases:
  1. a strictly sequential cursor walk assigns base models to the contacted
     clients in ascending client-id order (budget-capped);
  2. clients train their assigned bases independently — task completion
     order is irrelevant and tests permute it;
  3. the server averages returned parameters weighted by local sample
     counts, again in ascending client-id order so floating-point sums are
     reproducible bit for bit.
Bases nobody trained in a round keep their previous parameters.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from splitmix import rngs
from splitmix.base_models import (
    BaseModelSet, SamplerState, init_sampler, members_for_width,
    mixture_for_width, evaluate_accuracy, sample_base_models,
)
from splitmix.data import LabeledDataset, epoch_batches, train_val_split
from splitmix.errors import ConfigError, NumericsError, ProtocolError
from splitmix.nn import layers as L
from splitmix.nn.counting import count_params
from splitmix.nn.losses import cross_entropy
from splitmix.nn.model import build_model
from splitmix.nn.optim import SGD
from splitmix.robustness import dualize, local_train_dbn


@dataclass
class ClientSpec:
    id: int
    train: LabeledDataset
    val: LabeledDataset
    budget: float
    test: LabeledDataset | None = None
    present_classes: tuple | None = None
    domain: int | None = None


@dataclass
class BudgetDistribution:
    kind: str                       # exponential_groups | more_sufficient |
                                    # step_increase | log_normal | explicit
    group_widths: list | None = None  # more_sufficient group pattern
    step: float = 0.25                # step_increase increment
    median: float = 0.45              # log_normal median budget
    sigma: float = 0.35               # log_normal shape
    formula_exponent: bool = False    # exponential_groups: start at 1/2, not 1
    values: list | None = None        # explicit per-client budgets


def _quantize(widths, atom):
    out = []
    for w in widths:
        q = math.floor(w / atom + 1e-9) * atom
        out.append(min(max(q, atom), 1.0))
    return out


def assign_budgets(num_clients, dist: BudgetDistribution, seed=0, atom=0.125):
    """Emit one width budget per client, quantized to multiples of `atom`."""
    if num_clients < 1:
        raise ConfigError("budgets: need at least one client")
    k = np.arange(1, num_clients + 1)
    if dist.kind == "exponential_groups":
        group = np.ceil(4 * k / num_clients).astype(int)      # 1..4
        exponent = group if dist.formula_exponent else group - 1
        widths = (0.5 ** exponent).tolist()
    elif dist.kind == "more_sufficient":
        pattern = dist.group_widths or [1.0, 1.0, 0.5, 0.25]
        group = np.ceil(len(pattern) * k / num_clients).astype(int)
        widths = [pattern[g - 1] for g in group]
    elif dist.kind == "step_increase":
        levels = [round(dist.step * i, 10) for i in range(1, int(round(1 / dist.step)) + 1)]
        group = np.ceil(len(levels) * k / num_clients).astype(int)
        widths = [levels[g - 1] for g in group]
    elif dist.kind == "log_normal":
        rng = rngs.rng_for(seed, rngs.PARTICIPATION, 0xB0D)
        widths = rng.lognormal(mean=math.log(dist.median), sigma=dist.sigma,
                               size=num_clients).tolist()
    elif dist.kind == "explicit":
        if not dist.values:
            raise ConfigError("budgets.values: required for explicit budgets")
        values = list(dist.values)
        widths = [values[i % len(values)] for i in range(num_clients)]
    else:
        raise ConfigError(f"budgets.kind: unknown kind {dist.kind!r}")
    return _quantize(widths, atom)


@dataclass
class TrainingSchedule:
    rounds: int = 50
    local_epochs: int = 1
    batch_size: int = 32
    lr_kind: str = "constant"       # constant | step | cosine
    base_lr: float = 0.1
    milestones: tuple = ()          # step decay round indices
    lr_gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    participants_per_round: int | None = None
    eval_every: int = 5


def learning_rate(schedule: TrainingSchedule, t):
    """Rate for 0-based round t."""
    if schedule.lr_kind == "constant":
        return schedule.base_lr
    if schedule.lr_kind == "step":
        drops = sum(1 for m in schedule.milestones if t >= m)
        return schedule.base_lr * schedule.lr_gamma ** drops
    if schedule.lr_kind == "cosine":
        return schedule.base_lr * 0.5 * (1 + math.cos(math.pi * t / schedule.rounds))
    raise ConfigError(f"schedule.lr.kind: unknown kind {schedule.lr_kind!r}")


def local_train(models: dict, ds: LabeledDataset, *, epochs, lr, batch_size,
                momentum, weight_decay, batch_rng, present_classes=None):
    """Train every model on the same minibatch stream, independently.

    Models never interact: the result is bit-identical whether they are
    processed interleaved (as here) or one after another.
    """
    opts = {bid: SGD(momentum, weight_decay) for bid in models}
    last_loss = 0.0
    for _ in range(epochs):
        for idx in epoch_batches(len(ds), batch_size, batch_rng):
            x, y = ds.x[idx], ds.y[idx]
            for bid in sorted(models):
                model = models[bid]
                logits = model.forward(x, L.TRAIN)
                loss, dlogits = cross_entropy(logits, y, present_classes)
                if not np.isfinite(loss):
                    raise NumericsError(f"non-finite loss on base {bid}")
                model.backward(dlogits)
                opts[bid].step(model.params(), model.grads(), lr)
                last_loss = loss
    return last_loss


class AggregationAccumulator:
    """Per-base weighted parameter sums with sample-count weights."""

    def __init__(self):
        self._sums = {}
        self._weights = {}

    def add(self, base_id, state: dict, weight: float):
        if weight < 0:
            raise ValueError("aggregation weight must be non-negative")
        if base_id not in self._sums:
            self._sums[base_id] = {k: weight * v for k, v in state.items()}
        else:
            sums = self._sums[base_id]
            for k, v in state.items():
                sums[k] += weight * v
        self._weights[base_id] = self._weights.get(base_id, 0.0) + weight

    def weight(self, base_id):
        return self._weights.get(base_id, 0.0)

    def finalize(self, base_id):
        """Weighted mean state, or None if the base saw no contributions."""
        w = self._weights.get(base_id, 0.0)
        if w <= 0:
            return None
        return {k: v / w for k, v in self._sums[base_id].items()}


@dataclass
class RoundRecord:
    round: int
    assignments: dict               # client id -> sampled base ids
    base_weights: dict              # base id -> accumulated sample count
    uploaded_params: int
    downloaded_params: int
    val_accuracy: dict | None = None  # width -> accuracy


@dataclass
class ServerState:
    base_set: BaseModelSet
    sampler: SamplerState
    seed: int
    local_bn_stats: dict = field(default_factory=dict)  # (client, base) -> buffers


def init_server(base_set: BaseModelSet, seed) -> ServerState:
    sampler = init_sampler(base_set.num_bases, rngs.rng_for(seed, rngs.SAMPLER))
    return ServerState(base_set=base_set, sampler=sampler, seed=seed)


def clone_base(base_set: BaseModelSet, base_id):
    proto = base_set.bases[base_id]
    model = build_model(base_set.arch, width=proto.width, init="zeros",
                        bn_mode=base_set.bn_mode, rescale_init=base_set.rescale_init,
                        rescale_layer=base_set.rescale_layer)
    if base_set.dual_bn:
        dualize(model)
    model.load_state(proto.state())
    return model


def select_participants(num_clients, m, rng):
    """Uniform subset of m client indices, ascending."""
    if not 1 <= m <= num_clients:
        raise ValueError(f"cannot contact {m} of {num_clients} clients")
    return sorted(int(i) for i in rng.choice(num_clients, size=m, replace=False))


def run_round(state: ServerState, clients, t, schedule: TrainingSchedule, *,
              attack=None, completion_order=None, completion_rng=None):
    """One communication round; mutates the server state in place.

    completion_order / completion_rng reorder phase 2 (an explicit id list or
    a shuffle source); results are independent of either by construction.
    """
    base_set = state.base_set
    m_bases = base_set.num_bases

    active = clients
    if schedule.participants_per_round and schedule.participants_per_round < len(clients):
        rng = rngs.rng_for(state.seed, rngs.PARTICIPATION, t)
        chosen = select_participants(len(clients), schedule.participants_per_round, rng)
        active = [clients[i] for i in chosen]

    # phase 1: sequential cursor walk, ascending client id
    assignments = {}
    capacity = {}
    for client in sorted(active, key=lambda c: c.id):
        cap = members_for_width(client.budget, m_bases)
        if cap < 1:
            raise ProtocolError(
                f"client {client.id} budget {client.budget} below atom width "
                f"{base_set.atom_width}")
        ids = sample_base_models(state.sampler, min(cap, m_bases), m_bases)
        if len(ids) > cap:
            raise ProtocolError(
                f"client {client.id}: assigned {len(ids)} bases, budget allows {cap}")
        assignments[client.id] = ids
        capacity[client.id] = cap

    # phase 2: independent local training; order must not matter
    by_id = {c.id: c for c in active}
    order = list(assignments)
    if completion_order is not None:
        order = list(completion_order)
        if sorted(order) != sorted(assignments):
            raise ValueError("completion_order must permute the contacted clients")
    elif completion_rng is not None:
        completion_rng.shuffle(order)
    lr = learning_rate(schedule, t)
    results = {}
    for cid in order:
        client = by_id[cid]
        models = {bid: clone_base(base_set, bid) for bid in assignments[cid]}
        _overlay_local_stats(state, cid, models)
        batch_rng = rngs.rng_for(state.seed, rngs.BATCHES, t, cid)
        if attack is not None:
            local_train_dbn(models, client.train, epochs=schedule.local_epochs,
                            lr=lr, batch_size=schedule.batch_size,
                            momentum=schedule.momentum,
                            weight_decay=schedule.weight_decay,
                            batch_rng=batch_rng, attack=attack,
                            attack_seed=(state.seed, rngs.ATTACK, t, cid),
                            present_classes=client.present_classes)
        else:
            local_train(models, client.train, epochs=schedule.local_epochs,
                        lr=lr, batch_size=schedule.batch_size,
                        momentum=schedule.momentum,
                        weight_decay=schedule.weight_decay,
                        batch_rng=batch_rng,
                        present_classes=client.present_classes)
        _capture_local_stats(state, cid, models)
        shared = base_set.bases[0].shared_state_keys()
        results[cid] = {
            bid: {k: v for k, v in model.state().items() if k in set(shared)}
            for bid, model in models.items()
        }

    # phase 3: weighted aggregation, ascending client id
    acc = AggregationAccumulator()
    for cid in sorted(results):
        weight = float(len(by_id[cid].train))
        for bid, st in results[cid].items():
            acc.add(bid, st, weight)
    for bid in range(m_bases):
        averaged = acc.finalize(bid)
        if averaged is not None:
            base_set.bases[bid].load_state(averaged)
        # weight 0: base keeps its previous-round parameters

    per_base = count_params(base_set.bases[0])
    moved = sum(len(ids) * per_base for ids in assignments.values())
    return RoundRecord(
        round=t, assignments=assignments,
        base_weights={bid: acc.weight(bid) for bid in range(m_bases)},
        uploaded_params=moved, downloaded_params=moved)


def _overlay_local_stats(state, cid, models):
    """locally_tracked mode: restore this client's own BN statistics."""
    for bid, model in models.items():
        stats = state.local_bn_stats.get((cid, bid))
        if stats:
            own = model.buffers()
            for k, v in stats.items():
                own[k][...] = v


def _capture_local_stats(state, cid, models):
    if state.base_set.bn_mode != "locally_tracked":
        return
    for bid, model in models.items():
        state.local_bn_stats[(cid, bid)] = {
            k: v.copy() for k, v in model.buffers().items()}


def evaluate_widths(base_set: BaseModelSet, clients, widths, *, split="val",
                    lam=0.0, local_stats=None, batch_size=512):
    """Per-width accuracy of prefix mixtures, averaged over clients (each
    client evaluates on its own shard; clients count equally)."""
    out = {}
    for width in widths:
        k = members_for_width(width, base_set.num_bases)
        accs = []
        for client in clients:
            ds = getattr(client, split)
            if ds is None or len(ds) == 0:
                continue
            mix = mixture_for_width(base_set, width)
            if local_stats is not None:
                with _client_stats(base_set, local_stats, client.id, k):
                    accs.append(evaluate_accuracy(mix, ds.x, ds.y, batch_size, lam))
            else:
                accs.append(evaluate_accuracy(mix, ds.x, ds.y, batch_size, lam))
        out[width] = float(np.mean(accs)) if accs else float("nan")
    return out


class _client_stats:
    """Temporarily install a client's locally tracked BN statistics."""

    def __init__(self, base_set, store, cid, k_members):
        self.base_set = base_set
        self.store = store
        self.cid = cid
        self.k = k_members
        self._saved = {}

    def __enter__(self):
        for bid in range(self.k):
            stats = self.store.get((self.cid, bid))
            if stats:
                own = self.base_set.bases[bid].buffers()
                self._saved[bid] = {k: v.copy() for k, v in own.items()}
                for k, v in stats.items():
                    own[k][...] = v
        return self

    def __exit__(self, *exc):
        for bid, saved in self._saved.items():
            own = self.base_set.bases[bid].buffers()
            for k, v in saved.items():
                own[k][...] = v
        return False


def build_clients(train_shards, budgets, *, val_fraction=0.1, seed=0,
                  test_shards=None, mask_absent_classes=False):
    """Wrap partitioned shards into client specs with budgets and splits."""
    if len(budgets) != len(train_shards):
        raise ConfigError(
            f"budgets: {len(budgets)} values for {len(train_shards)} clients")
    clients = []
    for k, shard in enumerate(train_shards):
        train, val = train_val_split(shard, val_fraction, seed, k)
        present = shard.present_classes() if mask_absent_classes else None
        test = test_shards[k] if test_shards is not None else None
        clients.append(ClientSpec(id=k, train=train, val=val, budget=budgets[k],
                                  test=test, present_classes=present,
                                  domain=shard.domain))
    return clients
