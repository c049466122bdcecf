"""Adversarial robustness customization.

Training keeps two batch-norm branches per normalization site: a clean
branch fed by unperturbed samples and a noised branch fed by PGD examples;
all other parameters are shared.  At inference the two branch outputs are
blended with a training-free weight lam in [0, 1], trading standard accuracy
(lam = 0) against robust accuracy (lam = 1) without touching any parameter.
"""

from dataclasses import dataclass

import numpy as np

from splitmix import rngs
from splitmix.base_models import mixture_for_width
from splitmix.data import epoch_batches
from splitmix.errors import ConfigError, NumericsError
from splitmix.nn import layers as L
from splitmix.nn.losses import cross_entropy
from splitmix.nn.optim import SGD


@dataclass
class AttackConfig:
    epsilon: float = 8.0 / 255.0
    steps: int = 7
    step_size: float = 2.0 / 255.0
    random_start: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("robustness.epsilon: must be >= 0")
        if self.step_size <= 0:
            raise ConfigError("robustness.step_size: must be > 0")
        if self.steps < 1:
            raise ConfigError("robustness.steps: must be >= 1")


@dataclass
class ATLossConfig:
    lambda_n: float = 0.5
    dbn_mode: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lambda_n <= 1.0:
            raise ConfigError("robustness.lambda_n: must be in [0, 1]")
        if self.dbn_mode and self.lambda_n != 0.5:
            raise ConfigError("robustness.lambda_n: fixed at 0.5 with dual BN")


class DualBN(L.Layer):
    """Paired clean/noised batch-norm branches sharing one input site.

    Training routes each sample stream through exactly one branch
    (ctx.bn_branch is "clean" or "adv"); inference with bn_branch=None
    evaluates both branches and blends them with weight ctx.lam.
    """

    def __init__(self, bn_clean: L.BatchNorm, bn_noise: L.BatchNorm):
        if bn_clean.num_features != bn_noise.num_features:
            raise ConfigError("dual BN branches must have equal feature counts")
        self.bn_clean = bn_clean
        self.bn_noise = bn_noise
        self._routed = None
        self._lam = 0.0

    def forward(self, x, ctx):
        if ctx.bn_branch == "clean":
            self._routed = "clean"
            return self.bn_clean.forward(x, ctx)
        if ctx.bn_branch == "adv":
            self._routed = "adv"
            return self.bn_noise.forward(x, ctx)
        if ctx.bn_branch is not None:
            raise ValueError(f"unknown BN branch {ctx.bn_branch!r}")
        if not 0.0 <= ctx.lam <= 1.0:
            raise ValueError(f"mixing weight {ctx.lam} outside [0, 1]")
        self._routed = None
        self._lam = ctx.lam
        yc = self.bn_clean.forward(x, ctx)
        yn = self.bn_noise.forward(x, ctx)
        return (1.0 - ctx.lam) * yc + ctx.lam * yn

    def backward(self, dout):
        if self._routed == "clean":
            dx = self.bn_clean.backward(dout)
            self.bn_noise.g_gamma = np.zeros_like(self.bn_noise.g_gamma)
            self.bn_noise.g_beta = np.zeros_like(self.bn_noise.g_beta)
            return dx
        if self._routed == "adv":
            dx = self.bn_noise.backward(dout)
            self.bn_clean.g_gamma = np.zeros_like(self.bn_clean.g_gamma)
            self.bn_clean.g_beta = np.zeros_like(self.bn_clean.g_beta)
            return dx
        dxc = self.bn_clean.backward((1.0 - self._lam) * dout)
        dxn = self.bn_noise.backward(self._lam * dout)
        return dxc + dxn

    def params(self):
        return {"clean_gamma": self.bn_clean.gamma, "clean_beta": self.bn_clean.beta,
                "noise_gamma": self.bn_noise.gamma, "noise_beta": self.bn_noise.beta}

    def grads(self):
        return {"clean_gamma": self.bn_clean.g_gamma, "clean_beta": self.bn_clean.g_beta,
                "noise_gamma": self.bn_noise.g_gamma, "noise_beta": self.bn_noise.g_beta}

    def buffers(self):
        return {"clean_running_mean": self.bn_clean.running_mean,
                "clean_running_var": self.bn_clean.running_var,
                "noise_running_mean": self.bn_noise.running_mean,
                "noise_running_var": self.bn_noise.running_var}

    def shared_buffers(self):
        names = []
        if self.bn_clean.mode == "tracked":
            names += ["clean_running_mean", "clean_running_var"]
        if self.bn_noise.mode == "tracked":
            names += ["noise_running_mean", "noise_running_var"]
        return tuple(names)


def dualize(model):
    """Replace every plain BN layer with a dual clean/noised pair, in place."""
    replaced = 0
    for i, layer in enumerate(model.layers):
        if isinstance(layer, L.BatchNorm):
            fresh = L.BatchNorm(layer.num_features, mode=layer.mode,
                                eps=layer.eps, momentum=layer.momentum)
            model.layers[i] = DualBN(layer, fresh)
            replaced += 1
    if replaced == 0:
        raise ConfigError("model has no BN layers to dualize")
    return model


def dualize_set(base_set):
    for base in base_set.bases:
        dualize(base)
    base_set.dual_bn = True
    return base_set


def pgd_attack(model, x, y, cfg: AttackConfig, rng, *, bn_branch=None, lam=0.0,
               present_classes=None):
    """Sign-gradient ascent on the loss, projected to the eps infinity-ball.

    Inputs must lie in [0, 1]; the returned samples are clipped back to that
    range every step, so the perturbation bound and the pixel range both hold
    exactly (up to one representation ulp) for every output.
    """
    ctx = L.Context(training=False, bn_branch=bn_branch, lam=lam)
    eps, alpha = cfg.epsilon, cfg.step_size
    if cfg.random_start and rng is not None:
        x_adv = x + rng.uniform(-eps, eps, size=x.shape)
        x_adv = np.clip(x_adv, 0.0, 1.0)
    else:
        x_adv = x.copy()
    x_adv = np.clip(x_adv, x - eps, x + eps)
    for _ in range(cfg.steps):
        logits = model.forward(x_adv, ctx)
        _, dlogits = cross_entropy(logits, y, present_classes)
        dx = model.backward(dlogits)
        x_adv = x_adv + alpha * np.sign(dx)
        x_adv = np.clip(x_adv, x - eps, x + eps)
        x_adv = np.clip(x_adv, 0.0, 1.0)
    delta = x_adv - x
    if float(np.abs(delta).max(initial=0.0)) > eps + 1e-12:
        raise NumericsError("PGD perturbation escaped the epsilon ball")
    if x_adv.min(initial=0.0) < 0.0 or x_adv.max(initial=1.0) > 1.0:
        raise NumericsError("PGD output escaped the [0, 1] range")
    return x_adv


def at_loss(model, x, y, cfg: ATLossConfig, attack: AttackConfig, rng, *,
            present_classes=None, want_grads=False):
    """Mixed clean/adversarial objective for single-BN adversarial training.

    loss = (1 - lambda_n) * CE(f(x), y) + lambda_n * CE(f(x + delta), y).
    With want_grads the combined parameter gradients are returned as well.
    """
    lam_n = cfg.lambda_n
    ctx = L.TRAIN
    logits = model.forward(x, ctx)
    clean_loss, dlogits = cross_entropy(logits, y, present_classes)
    grads = None
    if want_grads:
        model.backward(dlogits)
        grads = {k: (1.0 - lam_n) * v.copy() for k, v in model.grads().items()}
    if lam_n == 0.0:
        return (clean_loss, grads) if want_grads else clean_loss
    x_adv = pgd_attack(model, x, y, attack, rng, present_classes=present_classes)
    adv_logits = model.forward(x_adv, ctx)
    adv_loss, adv_dlogits = cross_entropy(adv_logits, y, present_classes)
    loss = (1.0 - lam_n) * clean_loss + lam_n * adv_loss
    if want_grads:
        model.backward(adv_dlogits)
        for k, v in model.grads().items():
            grads[k] += lam_n * v
        return loss, grads
    return loss


def local_train_dbn(models: dict, ds, *, epochs, lr, batch_size, momentum,
                    weight_decay, batch_rng, attack: AttackConfig, attack_seed,
                    present_classes=None):
    """Adversarial local training with branch-routed dual BN.

    Per batch and base: clean loss under the clean branch, PGD examples
    generated and evaluated under the noised branch, then one SGD step on
    the half/half combination.  Bases stay independent; each has its own
    attack stream so interleaved and sequential processing agree bitwise.
    """
    for model in models.values():
        if not any(isinstance(l, DualBN) for l in model.layers):
            raise ConfigError("adversarial DBN training needs dual-BN models")
    opts = {bid: SGD(momentum, weight_decay) for bid in models}
    atk_rngs = {bid: rngs.rng_for(*attack_seed, bid) for bid in models}
    ctx_clean = L.Context(training=True, bn_branch="clean")
    ctx_adv = L.Context(training=True, bn_branch="adv")
    last_loss = 0.0
    for _ in range(epochs):
        for idx in epoch_batches(len(ds), batch_size, batch_rng):
            x, y = ds.x[idx], ds.y[idx]
            for bid in sorted(models):
                model = models[bid]
                logits = model.forward(x, ctx_clean)
                clean_loss, dlogits = cross_entropy(logits, y, present_classes)
                model.backward(dlogits)
                g_clean = {k: v.copy() for k, v in model.grads().items()}
                x_adv = pgd_attack(model, x, y, attack, atk_rngs[bid],
                                   bn_branch="adv", present_classes=present_classes)
                adv_logits = model.forward(x_adv, ctx_adv)
                adv_loss, adv_dlogits = cross_entropy(adv_logits, y, present_classes)
                model.backward(adv_dlogits)
                loss = 0.5 * (clean_loss + adv_loss)
                if not np.isfinite(loss):
                    raise NumericsError(f"non-finite adversarial loss on base {bid}")
                combined = {k: 0.5 * (g_clean[k] + v)
                            for k, v in model.grads().items()}
                opts[bid].step(model.params(), combined, lr)
                last_loss = loss
    return last_loss


def evaluate_ra_sa(model_like, shards, attack: AttackConfig, lam, *, seed_key=(0,),
                   batch_size=256):
    """(standard accuracy, robust accuracy) at mixing weight lam.

    Robust accuracy attacks the lam-mixed model itself — the artifact that
    would be deployed.  Metrics are computed per client shard and averaged
    with equal client weight.
    """
    ctx = L.Context(training=False, lam=lam)
    sa, ra = [], []
    for ci, ds in enumerate(shards):
        if ds is None or len(ds) == 0:
            continue
        rng = rngs.rng_for(*seed_key, ci)
        hits_clean = 0
        hits_adv = 0
        for start in range(0, len(ds), batch_size):
            x, y = ds.x[start:start + batch_size], ds.y[start:start + batch_size]
            hits_clean += int((model_like.forward(x, ctx).argmax(axis=1) == y).sum())
            x_adv = pgd_attack(model_like, x, y, attack, rng, lam=lam)
            hits_adv += int((model_like.forward(x_adv, ctx).argmax(axis=1) == y).sum())
        sa.append(hits_clean / len(ds))
        ra.append(hits_adv / len(ds))
    if not sa:
        raise ValueError("no evaluation data")
    return float(np.mean(sa)), float(np.mean(ra))


def tradeoff_sweep(base_set, widths, lam_grid, clients, attack: AttackConfig, *,
                   split="test", seed=0, batch_size=256):
    """(width, lam) grid of SA/RA points for the trade-off curves."""
    rows = []
    shards = [getattr(c, split) for c in clients]
    for width in widths:
        mix = mixture_for_width(base_set, width)
        for lam in lam_grid:
            sa, ra = evaluate_ra_sa(mix, shards, attack, lam,
                                    seed_key=(seed, rngs.ATTACK, 0xE7A1),
                                    batch_size=batch_size)
            rows.append({"width": width, "lam": lam, "sa": sa, "ra": ra})
    return rows
