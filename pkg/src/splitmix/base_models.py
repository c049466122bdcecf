"""Base-model sets: construction, budget-driven sampling, and logit-mixing.

A full-width network is shattered into M = 1/r independently initialized
base networks of width r.  Clients train as many bases as their budget
affords; a width-R model is customized after training by averaging the
logits of the first K_R = floor(R/r) bases (optionally sorted by validation
accuracy so prefixes use the strongest bases).
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from splitmix import rngs
from splitmix.errors import ConfigError
from splitmix.nn import layers as L
from splitmix.nn.checkpoint import load_model, save_model
from splitmix.nn.losses import accuracy
from splitmix.nn.model import Model, build_model, resolve_arch


def members_for_width(width, num_bases):
    """floor(width / r) with guard against float fuzz (r = 1/num_bases)."""
    return int(np.floor(width * num_bases + 1e-9))


@dataclass
class BaseModelSet:
    arch: dict
    num_bases: int                # M; the atom width is exactly 1/M
    bases: list
    base_seeds: list
    bn_mode: str = "batch_average"
    rescale_init: bool = True
    rescale_layer: bool = False
    dual_bn: bool = False
    val_accuracies: list | None = None

    @property
    def atom_width(self):
        return 1.0 / self.num_bases

    def sliceable_widths(self):
        return [k / self.num_bases for k in range(1, self.num_bases + 1)]


def build_base_models(arch, atom_width, master_seed, *, bn_mode="batch_average",
                      rescale_init=True, rescale_layer=False):
    """Independently initialize the M = 1/atom_width base networks."""
    m = round(1.0 / atom_width)
    if m < 1 or abs(1.0 / atom_width - m) > 1e-9:
        raise ConfigError(f"splitmix.atom_width: 1/{atom_width} is not an integer")
    arch = resolve_arch(arch)
    bases = []
    for i in range(m):
        rng = rngs.rng_for(master_seed, rngs.INIT, i)
        bases.append(build_model(arch, width=1.0 / m, rng=rng, bn_mode=bn_mode,
                                 rescale_init=rescale_init, rescale_layer=rescale_layer))
    return BaseModelSet(arch=arch, num_bases=m, bases=bases,
                        base_seeds=list(range(m)), bn_mode=bn_mode,
                        rescale_init=rescale_init, rescale_layer=rescale_layer)


# ---------------------------------------------------------------------------
# round-robin base sampling

@dataclass
class SamplerState:
    """Shuffled id walk with a cursor; reshuffles only on exhaustion."""
    order: np.ndarray
    cursor: int
    rng: np.random.Generator


def init_sampler(num_bases, rng) -> SamplerState:
    return SamplerState(order=rng.permutation(num_bases), cursor=0, rng=rng)


def sample_base_models(state: SamplerState, n: int, num_bases: int):
    """Pick the cursor base plus n-1 uniform distinct others; advance cursor.

    The cursor walk guarantees every base is the mandatory pick exactly once
    per sweep of the permutation, so all bases keep training even when most
    clients can only afford one.
    """
    if not 1 <= n <= num_bases:
        raise ValueError(f"cannot sample {n} of {num_bases} bases")
    if state.cursor >= len(state.order):
        state.order = state.rng.permutation(num_bases)
        state.cursor = 0
    pick = int(state.order[state.cursor])
    state.cursor += 1
    if n == 1:
        return [pick]
    others = np.delete(np.arange(num_bases), pick)
    chosen = state.rng.choice(others, size=n - 1, replace=False)
    return [pick] + [int(c) for c in chosen]


# ---------------------------------------------------------------------------
# logit mixing

def _tree_sum(terms):
    # pairwise reduction: exact for power-of-two counts of equal addends
    while len(terms) > 1:
        nxt = [terms[i] + terms[i + 1] for i in range(0, len(terms) - 1, 2)]
        if len(terms) % 2:
            nxt.append(terms[-1])
        terms = nxt
    return terms[0]


class MixedModel:
    """Uniform logit average over member bases; behaves like a single model."""

    def __init__(self, members):
        if not members:
            raise ValueError("mixture needs at least one member")
        self.members = list(members)
        self.input_shape = members[0].input_shape
        self.num_classes = members[0].num_classes

    def forward(self, x, ctx=L.EVAL):
        return _tree_sum([m.forward(x, ctx) for m in self.members]) / len(self.members)

    def backward(self, dlogits):
        scaled = dlogits / len(self.members)
        return _tree_sum([m.backward(scaled) for m in self.members])


def mixture_for_width(base_set: BaseModelSet, width, member_ids=None):
    """First-K members in set order (or explicit ids) for a width-R model."""
    if member_ids is None:
        k = members_for_width(width, base_set.num_bases)
        if k < 1:
            raise ValueError(f"width {width} below atom width {base_set.atom_width}")
        member_ids = list(range(k))
    if not member_ids:
        raise ValueError("empty member list")
    return MixedModel([base_set.bases[i] for i in member_ids])


def mix_predict(x, base_set: BaseModelSet, width=None, member_ids=None, lam=0.0):
    ctx = L.Context(training=False, lam=lam)
    return mixture_for_width(base_set, width, member_ids).forward(x, ctx)


def evaluate_accuracy(model_like, x, y, batch_size=512, lam=0.0):
    """Plain top-1 accuracy in evaluation phase (lam routes dual BN mixing)."""
    ctx = L.Context(training=False, lam=lam)
    hits = 0
    for start in range(0, len(y), batch_size):
        logits = model_like.forward(x[start:start + batch_size], ctx)
        hits += int((logits.argmax(axis=1) == y[start:start + batch_size]).sum())
    return hits / len(y)


def sort_bases_by_val_acc(base_set: BaseModelSet, val_shards, batch_size=512):
    """Reorder bases by descending sample-weighted validation accuracy.

    val_shards: per-client validation datasets (objects with .x/.y).  Returns
    a new BaseModelSet whose prefix mixtures use the strongest bases; ties
    keep the existing order.
    """
    shards = [s for s in val_shards if len(s.y)]
    if not shards:
        raise ValueError("validation data is empty")
    weights = np.array([len(s.y) for s in shards], dtype=float)
    accs = []
    for base in base_set.bases:
        per_client = [evaluate_accuracy(base, s.x, s.y, batch_size) for s in shards]
        accs.append(float(np.average(per_client, weights=weights)))
    order = sorted(range(base_set.num_bases), key=lambda i: (-accs[i], i))
    return BaseModelSet(
        arch=base_set.arch, num_bases=base_set.num_bases,
        bases=[base_set.bases[i] for i in order],
        base_seeds=[base_set.base_seeds[i] for i in order],
        bn_mode=base_set.bn_mode, rescale_init=base_set.rescale_init,
        rescale_layer=base_set.rescale_layer, dual_bn=base_set.dual_bn,
        val_accuracies=[accs[i] for i in order])


# ---------------------------------------------------------------------------
# checkpointing: manifest + one blob per base

def save_base_set(directory, base_set: BaseModelSet, seed=0):
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "format": 1,
        "num_bases": base_set.num_bases,
        "atom_width": base_set.atom_width,
        "base_seeds": base_set.base_seeds,
        "val_accuracies": base_set.val_accuracies,
        "bn_mode": base_set.bn_mode,
        "rescale_init": base_set.rescale_init,
        "rescale_layer": base_set.rescale_layer,
        "dual_bn": base_set.dual_bn,
        "files": [f"base_{i:03d}.bin" for i in range(base_set.num_bases)],
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    for i, base in enumerate(base_set.bases):
        save_model(os.path.join(directory, manifest["files"][i]), base,
                   arch_layers=base_set.arch["layers"], seed=seed,
                   bn_mode=base_set.bn_mode, rescale_init=base_set.rescale_init,
                   rescale_layer=base_set.rescale_layer, dual_bn=base_set.dual_bn)


def load_base_set(directory) -> BaseModelSet:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    bases = []
    arch = None
    for fname in manifest["files"]:
        model, header = load_model(os.path.join(directory, fname))
        arch = header["arch"]
        bases.append(model)
    return BaseModelSet(
        arch=arch, num_bases=manifest["num_bases"], bases=bases,
        base_seeds=manifest["base_seeds"], bn_mode=manifest["bn_mode"],
        rescale_init=manifest["rescale_init"], rescale_layer=manifest["rescale_layer"],
        dual_bn=manifest["dual_bn"], val_accuracies=manifest["val_accuracies"])
