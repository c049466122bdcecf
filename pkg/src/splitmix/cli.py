"""Command-line interface.

Subcommands:
    train      run an experiment from a JSON config and write the bundle
    customize  evaluate a trained checkpoint at a chosen width / mixing weight
    report     render final tables (and domain coverage) from result dirs
    sweep      width x lambda trade-off grid from a trained checkpoint

Exit codes: 0 success, 2 configuration error, 3 runtime or numeric failure.
The output directory can be forced with the SPLITMIX_OUTPUT_DIR env var.
"""

import argparse
import os
import sys

import numpy as np

from splitmix import results
from splitmix.base_models import (
    evaluate_accuracy, load_base_set, members_for_width, mixture_for_width,
)
from splitmix.config import load_config
from splitmix.errors import ConfigError, DataFormatError, NumericsError, SplitMixError
from splitmix.experiment import (
    make_attack, make_datasets, make_schedule, partition_clients, run_experiment,
    write_experiment,
)
from splitmix.federation import assign_budgets, build_clients
from splitmix.nn.counting import count_macs, count_params
from splitmix.robustness import evaluate_ra_sa, tradeoff_sweep


def _out_dir(cfg, flag_value):
    return os.environ.get("SPLITMIX_OUTPUT_DIR") or flag_value or cfg["output_dir"]


def cmd_train(args):
    cfg = load_config(args.config, args.set or ())
    bundle = run_experiment(cfg)
    out = write_experiment(cfg, bundle, _out_dir(cfg, args.output_dir))
    print(f"wrote results to {out}")
    return 0


def _clients_for_eval(cfg):
    train_domains, test_domains = make_datasets(cfg)
    shards, test_shards, mask = partition_clients(cfg, train_domains, test_domains)
    budgets = assign_budgets(len(shards), _dist(cfg), cfg["seed"],
                             atom=cfg["splitmix"]["atom_width"])
    return build_clients(shards, budgets,
                         val_fraction=cfg["partitioner"]["val_fraction"],
                         seed=cfg["seed"], test_shards=test_shards,
                         mask_absent_classes=mask)


def _dist(cfg):
    from splitmix.experiment import _budget_distribution
    return _budget_distribution(cfg)


def _resolve_members(base_set, width):
    k = width * base_set.num_bases
    if abs(k - round(k)) > 1e-9 or not 1 <= round(k) <= base_set.num_bases:
        valid = ", ".join(f"{w:g}" for w in base_set.sliceable_widths())
        raise ConfigError(f"width {width:g} is not a multiple of "
                          f"{base_set.atom_width:g}; valid widths: {valid}")
    return int(round(k))


def cmd_customize(args):
    cfg = load_config(args.config, args.set or ())
    base_set = load_base_set(args.checkpoint)
    k = _resolve_members(base_set, args.width)
    if not 0.0 <= args.lam <= 1.0:
        raise ConfigError(f"lam {args.lam} outside [0, 1]")
    clients = _clients_for_eval(cfg)
    split = "test" if clients[0].test is not None else "val"
    shards = [getattr(c, split) for c in clients]
    mix = mixture_for_width(base_set, args.width)
    macs = k * count_macs(base_set.bases[0])
    params = k * count_params(base_set.bases[0])
    if args.attack:
        attack = make_attack(cfg)
        sa, ra = evaluate_ra_sa(mix, shards, attack, args.lam,
                                seed_key=(cfg["seed"], 0xC57))
        print(f"width x{args.width:g}  lam {args.lam:g}  "
              f"SA {sa:.4f}  RA {ra:.4f}  MACs {macs}  params {params}")
    else:
        accs = [evaluate_accuracy(mix, s.x, s.y, lam=args.lam)
                for s in shards if s is not None and len(s)]
        acc = float(np.mean(accs))
        print(f"width x{args.width:g}  lam {args.lam:g}  "
              f"acc {acc:.4f}  MACs {macs}  params {params}")
    return 0


def cmd_report(args):
    try:
        print(results.render_report(args.results_dir))
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def cmd_sweep(args):
    cfg = load_config(args.config, args.set or ())
    base_set = load_base_set(args.checkpoint)
    widths = [float(w) for w in args.widths] if args.widths \
        else base_set.sliceable_widths()
    for w in widths:
        _resolve_members(base_set, w)
    lambdas = [float(v) for v in args.lambdas] if args.lambdas \
        else cfg["robustness"]["lambda_grid"]
    clients = _clients_for_eval(cfg)
    split = "test" if clients[0].test is not None else "val"
    rows = tradeoff_sweep(base_set, widths, lambdas, clients, make_attack(cfg),
                          split=split, seed=cfg["seed"])
    out = _out_dir(cfg, args.output_dir)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "tradeoff.csv")
    results._write_csv(path, results.TRADEOFF_FIELDS,
                       [{"width": r["width"], "lambda": r["lam"],
                         "sa": r["sa"], "ra": r["ra"]} for r in rows])
    print(f"wrote {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="splitmix")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run an experiment from a config file")
    p.add_argument("config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry (dotted path, JSON value)")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("customize", help="evaluate a checkpoint at (width, lam)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--width", type=float, required=True)
    p.add_argument("--lam", type=float, default=0.0)
    p.add_argument("--attack", action="store_true",
                   help="also report robust accuracy under the config attack")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_customize)

    p = sub.add_parser("report", help="render tables from result directories")
    p.add_argument("results_dir", nargs="+")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="width x lambda trade-off grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--widths", nargs="*")
    p.add_argument("--lambdas", nargs="*")
    p.add_argument("--output-dir")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericsError, SplitMixError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
