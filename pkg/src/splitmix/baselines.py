"""Reference competitors: width-individual FedAvg and slimmable HeteroFL.

The slimmable model keeps one set of full-width tensors; the width-r subnet
is the leading-corner slice of every hidden dimension, realized as numpy
views so training a subnet writes straight through to the shared storage.
Smaller widths are therefore exact sub-blocks of larger ones at all times.
Each width owns its own BN parameters, as is standard for switchable nets.
"""

import logging
from dataclasses import dataclass

import numpy as np

from splitmix import rngs
from splitmix.data import epoch_batches
from splitmix.errors import ConfigError, NumericsError, ProtocolError
from splitmix.nn import layers as L
from splitmix.nn.losses import cross_entropy
from splitmix.nn.model import Model, build_model, resolve_arch
from splitmix.nn.optim import SGD
from splitmix.federation import TrainingSchedule, learning_rate, select_participants

log = logging.getLogger("splitmix")


class SlimmableModel:
    """Full-width tensors + per-width nested views + per-width BN layers."""

    def __init__(self, arch, widths, *, seed=0, bn_mode="batch_average"):
        self.arch = resolve_arch(arch)
        self.widths = sorted(set(float(w) for w in widths))
        if not self.widths or self.widths[-1] > 1.0 or self.widths[0] <= 0.0:
            raise ConfigError(f"baseline: invalid width set {widths}")
        self.bn_mode = bn_mode
        # width-1 init matches an individually built full model bit for bit
        self.full = build_model(self.arch, width=1.0,
                                rng=rngs.rng_for(seed, rngs.INIT, 0), bn_mode=bn_mode)
        self._views = {}
        for w in self.widths:
            self._views[w] = self._make_view(w)

    def _make_view(self, width):
        view = build_model(self.arch, width=width, init="zeros", bn_mode=self.bn_mode)
        if width == 1.0:
            # reuse the full tensors AND the full model's BN layers
            for i, layer in enumerate(self.full.layers):
                view.layers[i] = layer
            return view
        for vl, fl in zip(view.layers, self.full.layers):
            if isinstance(vl, (L.Dense, L.Conv2d)):
                if isinstance(vl, L.Dense):
                    vl.w = fl.w[:vl.in_features, :vl.out_features]
                    vl.b = fl.b[:vl.out_features]
                else:
                    vl.w = fl.w[:vl.out_channels, :vl.in_channels]
                    vl.b = fl.b[:vl.out_channels]
            # BN layers stay the view's own instances: one set per width
        return view

    def subnet(self, width) -> Model:
        if width not in self._views:
            raise ConfigError(
                f"baseline: width {width} not in the active set {self.widths}")
        return self._views[width]

    def affordable(self, budget):
        return [w for w in self.widths if w <= budget + 1e-9]

    def core_param_names(self):
        """Shared conv/dense tensors of the full model (BN excluded)."""
        names = []
        for name, layer in self.full.named_layers():
            if isinstance(layer, (L.Dense, L.Conv2d)):
                names += [f"{name}.w", f"{name}.b"]
        return names

    def core_state(self):
        params = self.full.params()
        return {k: params[k].copy() for k in self.core_param_names()}

    def load_core_state(self, state):
        params = self.full.params()
        for k, v in state.items():
            params[k][...] = v

    def bn_state(self, width):
        view = self.subnet(width)
        out = {}
        for name, layer in view.named_layers():
            if isinstance(layer, L.BatchNorm):
                for pname, arr in layer.params().items():
                    out[f"{name}.{pname}"] = arr.copy()
                if layer.mode == "tracked":
                    for bname, arr in layer.buffers().items():
                        out[f"{name}.{bname}"] = arr.copy()
        return out

    def load_bn_state(self, width, state):
        view = self.subnet(width)
        own = {**view.params(), **view.buffers()}
        for k, v in state.items():
            own[k][...] = v

    def region(self, name, width):
        """Leading-corner index expression of `name` covered by `width`."""
        view_params = self.subnet(width).params()
        return tuple(slice(0, d) for d in view_params[name].shape)


def slice_subnet(model: SlimmableModel, width) -> Model:
    return model.subnet(width)


def sheterofl_local_train(slim: SlimmableModel, ds, budget, *, epochs, lr,
                          batch_size, momentum, weight_decay, batch_rng,
                          present_classes=None):
    """Bounded-slimmable local pass: every affordable width trains on each
    batch sequentially (ascending), gradients applied immediately to the
    shared tensors."""
    widths = slim.affordable(budget)
    if not widths:
        raise ProtocolError(f"budget {budget} below the smallest width {slim.widths[0]}")
    opts = {w: SGD(momentum, weight_decay) for w in widths}
    last_loss = 0.0
    for _ in range(epochs):
        for idx in epoch_batches(len(ds), batch_size, batch_rng):
            x, y = ds.x[idx], ds.y[idx]
            for w in widths:
                net = slim.subnet(w)
                logits = net.forward(x, L.TRAIN)
                loss, dlogits = cross_entropy(logits, y, present_classes)
                if not np.isfinite(loss):
                    raise NumericsError(f"non-finite loss at width {w}")
                net.backward(dlogits)
                opts[w].step(net.params(), net.grads(), lr)
                last_loss = loss
    return last_loss


def sheterofl_aggregate(slim: SlimmableModel, payloads):
    """Coverage-weighted averaging.

    Each payload is {"budget", "weight", "core", "bn": {width: state}}.  A
    coordinate of a shared tensor is averaged over exactly the clients whose
    trained region covers it; uncovered coordinates (and BN sets nobody
    trained) are retained.
    """
    if not payloads:
        return
    core = slim.full.params()
    sums = {k: np.zeros_like(core[k]) for k in slim.core_param_names()}
    weights = {k: np.zeros_like(core[k]) for k in slim.core_param_names()}
    bn_sums = {}
    bn_weights = {}
    for payload in payloads:
        wmax = max(slim.affordable(payload["budget"]), default=None)
        if wmax is None:
            raise ProtocolError(f"budget {payload['budget']} trains nothing")
        cw = float(payload["weight"])
        for name in sums:
            region = slim.region(name, wmax)
            sums[name][region] += cw * payload["core"][name][region]
            weights[name][region] += cw
        for width, state in payload["bn"].items():
            acc = bn_sums.setdefault(width, {k: np.zeros_like(v) for k, v in state.items()})
            for k, v in state.items():
                acc[k] += cw * v
            bn_weights[width] = bn_weights.get(width, 0.0) + cw
    for name in sums:
        covered = weights[name] > 0
        core[name][covered] = sums[name][covered] / weights[name][covered]
    for width, acc in bn_sums.items():
        averaged = {k: v / bn_weights[width] for k, v in acc.items()}
        slim.load_bn_state(width, averaged)


def run_sheterofl(arch, clients, schedule: TrainingSchedule, *, widths=None,
                  seed=0, bn_mode="batch_average", on_round=None):
    """Full slimmable-HeteroFL training loop over the client population."""
    if widths is None:
        widths = sorted(set(c.budget for c in clients))
    slim = SlimmableModel(arch, widths, seed=seed, bn_mode=bn_mode)
    for t in range(schedule.rounds):
        active = clients
        if schedule.participants_per_round and schedule.participants_per_round < len(clients):
            rng = rngs.rng_for(seed, rngs.PARTICIPATION, t)
            chosen = select_participants(len(clients), schedule.participants_per_round, rng)
            active = [clients[i] for i in chosen]
        lr = learning_rate(schedule, t)
        payloads = []
        for client in sorted(active, key=lambda c: c.id):
            snapshot_core = slim.core_state()
            snapshot_bn = {w: slim.bn_state(w) for w in slim.affordable(client.budget)}
            sheterofl_local_train(
                slim, client.train, client.budget, epochs=schedule.local_epochs,
                lr=lr, batch_size=schedule.batch_size, momentum=schedule.momentum,
                weight_decay=schedule.weight_decay,
                batch_rng=rngs.rng_for(seed, rngs.BATCHES, t, client.id),
                present_classes=client.present_classes)
            payloads.append({
                "budget": client.budget, "weight": float(len(client.train)),
                "core": slim.core_state(),
                "bn": {w: slim.bn_state(w) for w in slim.affordable(client.budget)},
            })
            # restore the global model before the next client trains
            slim.load_core_state(snapshot_core)
            for w, st in snapshot_bn.items():
                slim.load_bn_state(w, st)
        sheterofl_aggregate(slim, payloads)
        if on_round is not None:
            on_round(t, slim)
    return slim


def fedavg_individual(arch, width, clients, schedule: TrainingSchedule, *,
                      seed=0, bn_mode="batch_average", rescale_init=True,
                      rescale_layer=False, ignore_budgets=False, on_round=None):
    """Plain FedAvg on a single fixed-width model.

    Serves both as the budget-compatible baseline (width <= every budget)
    and, with ignore_budgets, as the unconstrained upper bound; violations
    are logged, not fatal, in that mode.
    """
    tight = [c.id for c in clients if c.budget + 1e-9 < width]
    if tight:
        if not ignore_budgets:
            raise ProtocolError(
                f"width {width} exceeds the budget of clients {tight}")
        log.warning("width %s exceeds the budget of %d client(s): %s",
                    width, len(tight), tight)
    arch = resolve_arch(arch)
    model = build_model(arch, width=width, rng=rngs.rng_for(seed, rngs.INIT, 0),
                        bn_mode=bn_mode, rescale_init=rescale_init,
                        rescale_layer=rescale_layer)
    shared = model.shared_state_keys()
    for t in range(schedule.rounds):
        active = clients
        if schedule.participants_per_round and schedule.participants_per_round < len(clients):
            rng = rngs.rng_for(seed, rngs.PARTICIPATION, t)
            chosen = select_participants(len(clients), schedule.participants_per_round, rng)
            active = [clients[i] for i in chosen]
        lr = learning_rate(schedule, t)
        sums = None
        total = 0.0
        for client in sorted(active, key=lambda c: c.id):
            local = build_model(arch, width=width, init="zeros", bn_mode=bn_mode,
                                rescale_init=rescale_init, rescale_layer=rescale_layer)
            local.load_state(model.state())
            opt = SGD(schedule.momentum, schedule.weight_decay)
            batch_rng = rngs.rng_for(seed, rngs.BATCHES, t, client.id)
            for _ in range(schedule.local_epochs):
                for idx in epoch_batches(len(client.train), schedule.batch_size, batch_rng):
                    x, y = client.train.x[idx], client.train.y[idx]
                    logits = local.forward(x, L.TRAIN)
                    loss, dlogits = cross_entropy(logits, y, client.present_classes)
                    if not np.isfinite(loss):
                        raise NumericsError(f"non-finite loss on client {client.id}")
                    local.backward(dlogits)
                    opt.step(local.params(), local.grads(), lr)
            w = float(len(client.train))
            st = local.state()
            if sums is None:
                sums = {k: w * st[k] for k in shared}
            else:
                for k in shared:
                    sums[k] += w * st[k]
            total += w
        if sums is not None:
            model.load_state({k: v / total for k, v in sums.items()})
        if on_round is not None:
            on_round(t, model)
    return model
