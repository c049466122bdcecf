"""End-to-end experiment orchestration.

Builds data and clients from a resolved config, dispatches to the selected
method (split-mix training, width-individual FedAvg, or slimmable HeteroFL),
and produces the result bundle rows.  The whole pipeline is a pure function
of (config, seed): every random choice draws from a purpose-tagged stream.
"""

import os

import numpy as np

from splitmix import results, rngs
from splitmix.base_models import (
    build_base_models, evaluate_accuracy, members_for_width, mixture_for_width,
    save_base_set, sort_bases_by_val_acc,
)
from splitmix.baselines import fedavg_individual, run_sheterofl
from splitmix.data import (
    LabeledDataset, class_noniid_partition, feature_noniid_partition,
    iid_partition, load_dataset, synth_multidomain, train_val_split,
)
from splitmix.errors import ConfigError
from splitmix.federation import (
    BudgetDistribution, TrainingSchedule, assign_budgets, build_clients,
    evaluate_widths, init_server, run_round,
)
from splitmix.nn.counting import count_macs, count_params
from splitmix.nn.model import build_model, post_average_bn, resolve_arch
from splitmix.robustness import AttackConfig, dualize_set, tradeoff_sweep


def _concat(datasets):
    return LabeledDataset(
        np.concatenate([d.x for d in datasets]),
        np.concatenate([d.y for d in datasets]),
        datasets[0].num_classes)


def make_datasets(cfg):
    """(per-domain train list, per-domain test list or None)."""
    d = cfg["dataset"]
    if d["kind"] == "synthetic":
        return synth_multidomain(
            d["classes"], d["domains"], d["train_per_domain"], d["dim"],
            margin=d["margin"], noise=d["noise"], domain_shift=d["domain_shift"],
            domain_rotation=d["domain_rotation"], image_side=d["image_side"],
            test_per_domain=d["test_per_domain"], seed=cfg["seed"])
    ds = load_dataset(d["path"], d["kind"], labels_path=d["labels"],
                      num_classes=d["classes"])
    # hold out a fixed fraction as the test pool for file-backed data
    train, test = train_val_split(ds, val_fraction=0.2, seed=cfg["seed"],
                                  client_id=0x7E57)
    return [train], [test]


def partition_clients(cfg, train_domains, test_domains):
    """(train shards, per-client test shards, mask_absent_classes flag)."""
    p = cfg["partitioner"]
    k = p["clients"]
    if p["kind"] == "feature_noniid":
        per_domain = p["clients_per_domain"]
        if per_domain is None:
            n_dom = len(train_domains)
            base, extra = divmod(k, n_dom)
            if base == 0:
                raise ConfigError("partitioner.clients: fewer clients than domains")
            per_domain = [base + (1 if i < extra else 0) for i in range(n_dom)]
        elif isinstance(per_domain, int):
            per_domain = [per_domain] * len(train_domains)
        if sum(per_domain) != k:
            raise ConfigError(
                f"partitioner.clients_per_domain: {per_domain} does not sum to {k}")
        shards = feature_noniid_partition(train_domains, per_domain, cfg["seed"])
        tests = None
        if test_domains is not None:
            tests = []
            for dom, n_cl in enumerate(per_domain):
                tests.extend([test_domains[dom]] * n_cl)
        return shards, tests, False
    pooled = _concat(train_domains)
    pooled_test = _concat(test_domains) if test_domains else None
    if p["kind"] == "class_noniid":
        shards = class_noniid_partition(pooled, k, p["classes_per_client"], cfg["seed"])
        tests = None
        if pooled_test is not None:
            tests = []
            for shard in shards:
                keep = np.isin(pooled_test.y, list(shard.present_classes()))
                tests.append(pooled_test.subset(np.where(keep)[0]))
        return shards, tests, True
    shards = iid_partition(pooled, k, cfg["seed"])
    tests = [pooled_test] * k if pooled_test is not None else None
    return shards, tests, False


def make_schedule(cfg) -> TrainingSchedule:
    s = cfg["schedule"]
    return TrainingSchedule(
        rounds=s["rounds"], local_epochs=s["local_epochs"],
        batch_size=s["batch_size"], lr_kind=s["lr"]["kind"],
        base_lr=s["lr"]["base"], milestones=tuple(s["lr"]["milestones"]),
        lr_gamma=s["lr"]["gamma"], momentum=s["momentum"],
        weight_decay=s["weight_decay"],
        participants_per_round=s["participants_per_round"],
        eval_every=s["eval_every"])


def make_attack(cfg) -> AttackConfig:
    r = cfg["robustness"]
    return AttackConfig(epsilon=r["epsilon"], steps=r["steps"],
                        step_size=r["step_size"])


def _budget_distribution(cfg) -> BudgetDistribution:
    b = cfg["budgets"]
    return BudgetDistribution(
        kind=b["kind"], group_widths=b["group_widths"], step=b["step"],
        median=b["median"], sigma=b["sigma"],
        formula_exponent=b["formula_exponent"], values=b["values"])


def _check_arch_matches_data(arch, shards):
    sample_shape = tuple(shards[0].x.shape[1:])
    if tuple(arch["input_shape"]) != sample_shape:
        raise ConfigError(
            f"architecture.input_shape: {arch['input_shape']} does not match "
            f"data shape {list(sample_shape)}")
    if arch["num_classes"] != shards[0].num_classes:
        raise ConfigError(
            f"architecture.num_classes: {arch['num_classes']} != dataset "
            f"classes {shards[0].num_classes}")


def _arch_from_config(cfg):
    a = cfg["architecture"]
    if a["layers"] is not None:
        spec = {"id": a["id"] or "custom", "input_shape": a["input_shape"],
                "num_classes": a["num_classes"], "layers": a["layers"]}
    else:
        spec = {"preset": a["preset"]}
        if a["input_shape"] is not None:
            spec["input_shape"] = a["input_shape"]
        if a["num_classes"] is not None:
            spec["num_classes"] = a["num_classes"]
    return resolve_arch(spec)


def _mean_model_accuracy(model, clients, split):
    accs = []
    for client in clients:
        ds = getattr(client, split)
        if ds is None or len(ds) == 0:
            continue
        accs.append(evaluate_accuracy(model, ds.x, ds.y))
    return float(np.mean(accs)) if accs else float("nan")


def run_experiment(cfg, *, completion_order_seed=None):
    """Run the configured experiment; returns the result bundle rows.

    completion_order_seed permutes the order client training tasks finish in
    (results must not depend on it — the determinism suite exercises this).
    """
    seed = cfg["seed"]
    arch = _arch_from_config(cfg)
    schedule = make_schedule(cfg)
    train_domains, test_domains = make_datasets(cfg)
    shards, test_shards, mask = partition_clients(cfg, train_domains, test_domains)
    _check_arch_matches_data(arch, shards)

    atom = cfg["splitmix"]["atom_width"]
    budgets = assign_budgets(len(shards), _budget_distribution(cfg), seed, atom=atom)
    clients = build_clients(shards, budgets,
                            val_fraction=cfg["partitioner"]["val_fraction"],
                            seed=seed, test_shards=test_shards,
                            mask_absent_classes=mask)

    method = cfg["baseline"] if cfg["baseline"] != "none" else "splitmix"
    if cfg["robustness"]["enabled"] and method != "splitmix":
        raise ConfigError("robustness.enabled: robustness customization needs "
                          "baseline = none")
    if method == "splitmix":
        return _run_splitmix(cfg, arch, schedule, clients,
                             completion_order_seed=completion_order_seed)
    if method == "sheterofl":
        return _run_sheterofl_experiment(cfg, arch, schedule, clients)
    return _run_fedavg_experiment(cfg, arch, schedule, clients)


# ---------------------------------------------------------------------------
# split-mix

def _run_splitmix(cfg, arch, schedule, clients, *, completion_order_seed=None):
    seed = cfg["seed"]
    a = cfg["architecture"]
    atom = cfg["splitmix"]["atom_width"]
    base_set = build_base_models(arch, atom, seed, bn_mode=a["bn_mode"],
                                 rescale_init=a["rescale_init"],
                                 rescale_layer=a["rescale_layer"])
    robust = cfg["robustness"]["enabled"]
    attack = make_attack(cfg) if robust else None
    if robust:
        dualize_set(base_set)
    server = init_server(base_set, seed)

    widths = cfg["eval_widths"] or base_set.sliceable_widths()
    base_macs = count_macs(base_set.bases[0])
    base_params = count_params(base_set.bases[0])

    order_rng = (rngs.rng_for(completion_order_seed, 0xC0)
                 if completion_order_seed is not None else None)
    rounds_rows = []
    domain_bases = {}
    records = []
    for t in range(schedule.rounds):
        record = run_round(server, clients, t, schedule, attack=attack,
                           completion_rng=order_rng)
        records.append(record)
        for cid, ids in record.assignments.items():
            dom = clients[cid].domain
            if dom is not None:
                domain_bases.setdefault(dom, set()).update(ids)
        if (t + 1) % schedule.eval_every == 0 or t + 1 == schedule.rounds:
            local_stats = (server.local_bn_stats
                           if base_set.bn_mode == "locally_tracked" else None)
            accs = evaluate_widths(base_set, clients, widths, split="val",
                                   local_stats=local_stats)
            for w in widths:
                rounds_rows.append({
                    "round": t + 1, "width": w, "val_acc": accs[w],
                    "uploaded_params": record.uploaded_params,
                    "macs": members_for_width(w, base_set.num_bases) * base_macs})

    if base_set.bn_mode == "post_average":
        pooled = np.concatenate([c.train.x for c in clients])
        for base in base_set.bases:
            post_average_bn(base, pooled, passes=a["post_average_passes"],
                            batch_size=schedule.batch_size)
    if cfg["splitmix"]["sort_bases"]:
        base_set = sort_bases_by_val_acc(base_set, [c.val for c in clients])
        server.base_set = base_set

    split = "test" if clients[0].test is not None else "val"
    local_stats = (server.local_bn_stats
                   if base_set.bn_mode == "locally_tracked" else None)
    final_accs = evaluate_widths(base_set, clients, widths, split=split,
                                 local_stats=local_stats)
    final_rows = [{
        "width": w, "acc": final_accs[w],
        "macs": members_for_width(w, base_set.num_bases) * base_macs,
        "params": members_for_width(w, base_set.num_bases) * base_params,
    } for w in widths]

    tradeoff_rows = None
    if robust:
        rows = tradeoff_sweep(base_set, widths, cfg["robustness"]["lambda_grid"],
                              clients, make_attack(cfg), split=split, seed=cfg["seed"])
        tradeoff_rows = [{"width": r["width"], "lambda": r["lam"],
                          "sa": r["sa"], "ra": r["ra"]} for r in rows]

    coverage_rows = _splitmix_coverage(domain_bases, base_set.num_bases)
    return {
        "rounds_rows": rounds_rows, "final_rows": final_rows,
        "tradeoff_rows": tradeoff_rows, "coverage_rows": coverage_rows,
        "base_set": base_set, "clients": clients, "records": records,
    }


def _splitmix_coverage(domain_bases, num_bases):
    if not domain_bases:
        return None
    return [{"domain": dom, "trained_param_pct": len(ids) / num_bases}
            for dom, ids in sorted(domain_bases.items())]


# ---------------------------------------------------------------------------
# baselines

def _run_sheterofl_experiment(cfg, arch, schedule, clients):
    seed = cfg["seed"]
    a = cfg["architecture"]
    opts = cfg["baseline_options"]
    widths = opts["widths"] or sorted(set(c.budget for c in clients))
    rounds_rows = []

    def on_round(t, slim):
        if (t + 1) % schedule.eval_every == 0 or t + 1 == schedule.rounds:
            for w in widths:
                net = slim.subnet(w)
                acc = _mean_model_accuracy(net, clients, "val")
                rounds_rows.append({
                    "round": t + 1, "width": w, "val_acc": acc,
                    "uploaded_params": _sheterofl_uploaded(slim, clients),
                    "macs": count_macs(net)})

    slim = run_sheterofl(arch, clients, schedule, widths=widths, seed=seed,
                         bn_mode=a["bn_mode"], on_round=on_round)
    split = "test" if clients[0].test is not None else "val"
    final_rows = []
    for w in widths:
        net = slim.subnet(w)
        final_rows.append({"width": w, "acc": _mean_model_accuracy(net, clients, split),
                           "macs": count_macs(net), "params": count_params(net)})
    coverage_rows = _region_coverage(
        clients, lambda budget: count_params(slim.subnet(max(slim.affordable(budget)))),
        count_params(slim.subnet(max(widths))))
    return {"rounds_rows": rounds_rows, "final_rows": final_rows,
            "tradeoff_rows": None, "coverage_rows": coverage_rows, "model": slim,
            "clients": clients}


def _sheterofl_uploaded(slim, clients):
    total = 0
    for c in clients:
        wmax = max(slim.affordable(c.budget))
        total += count_params(slim.subnet(wmax))
    return total


def _run_fedavg_experiment(cfg, arch, schedule, clients):
    seed = cfg["seed"]
    a = cfg["architecture"]
    opts = cfg["baseline_options"]
    atom = cfg["splitmix"]["atom_width"]
    if opts["widths"]:
        widths = list(opts["widths"])
    else:
        # largest width every client can afford, quantized to the atom grid
        feasible = min(c.budget for c in clients)
        widths = [max(atom, int(feasible / atom + 1e-9) * atom)]
    rounds_rows = []
    final_rows = []
    models = {}
    for w in widths:
        def on_round(t, model, _w=w):
            if (t + 1) % schedule.eval_every == 0 or t + 1 == schedule.rounds:
                rounds_rows.append({
                    "round": t + 1, "width": _w,
                    "val_acc": _mean_model_accuracy(model, clients, "val"),
                    "uploaded_params": count_params(model) * len(clients),
                    "macs": count_macs(model)})
        model = fedavg_individual(arch, w, clients, schedule, seed=seed,
                                  bn_mode=a["bn_mode"],
                                  rescale_init=a["rescale_init"],
                                  rescale_layer=a["rescale_layer"],
                                  ignore_budgets=opts["ignore_budgets"],
                                  on_round=on_round)
        models[w] = model
        split = "test" if clients[0].test is not None else "val"
        final_rows.append({"width": w,
                           "acc": _mean_model_accuracy(model, clients, split),
                           "macs": count_macs(model),
                           "params": count_params(model)})
    full = build_model(arch, width=1.0, init="zeros")
    coverage_rows = _region_coverage(
        clients, lambda budget: count_params(models[widths[0]]), count_params(full))
    return {"rounds_rows": rounds_rows, "final_rows": final_rows,
            "tradeoff_rows": None, "coverage_rows": coverage_rows,
            "models": models, "clients": clients}


def _region_coverage(clients, trained_params_for_budget, total_params):
    domains = sorted({c.domain for c in clients if c.domain is not None})
    if not domains:
        return None
    rows = []
    for dom in domains:
        budgets = [c.budget for c in clients if c.domain == dom]
        trained = max(trained_params_for_budget(b) for b in budgets)
        rows.append({"domain": dom, "trained_param_pct": trained / total_params})
    return rows


def write_experiment(cfg, bundle, out_dir):
    """Persist the bundle (CSVs + resolved config + checkpoint if any)."""
    results.write_bundle(out_dir, config=cfg,
                         rounds_rows=bundle["rounds_rows"],
                         final_rows=bundle["final_rows"],
                         tradeoff_rows=bundle["tradeoff_rows"],
                         coverage_rows=bundle["coverage_rows"])
    if "base_set" in bundle:
        save_base_set(os.path.join(out_dir, "checkpoint"), bundle["base_set"],
                      seed=cfg["seed"])
    return out_dir
