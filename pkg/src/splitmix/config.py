"""Experiment configuration: schema, defaults, validation, overrides.

Configs are plain JSON.  Validation fills in defaults, rejects unknown keys,
and reports failures with full field paths so a bad config points at the
offending line, not a stack trace.
"""

import copy
import json

from splitmix.errors import ConfigError

_UNSET = object()


class _Field:
    def __init__(self, types, default=_UNSET, check=None, choices=None):
        self.types = types if isinstance(types, tuple) else (types,)
        self.default = default
        self.check = check
        self.choices = choices


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _fraction(v):
    return 0.0 <= v <= 1.0


def _unit(v):
    return 0.0 < v <= 1.0


SCHEMA = {
    "seed": _Field(int, default=0, check=_non_negative),
    "output_dir": _Field(str, default="runs/out"),
    "dataset": {
        "kind": _Field(str, default="synthetic",
                       choices=("synthetic", "idx_binary", "csv", "internal")),
        "classes": _Field(int, default=8, check=_positive),
        "domains": _Field(int, default=3, check=_positive),
        "train_per_domain": _Field(int, default=480, check=_positive),
        "test_per_domain": _Field(int, default=240, check=_non_negative),
        "dim": _Field(int, default=64, check=_positive),
        "image_side": _Field((int, type(None)), default=8),
        "margin": _Field((int, float), default=4.0, check=_positive),
        "noise": _Field((int, float), default=0.1, check=_positive),
        "domain_shift": _Field((int, float), default=0.05, check=_non_negative),
        "domain_rotation": _Field((int, float), default=0.2, check=_non_negative),
        "path": _Field((str, type(None)), default=None),
        "labels": _Field((str, type(None)), default=None),
    },
    "partitioner": {
        "kind": _Field(str, default="feature_noniid",
                       choices=("feature_noniid", "class_noniid", "iid")),
        "clients": _Field(int, default=16, check=_positive),
        "classes_per_client": _Field(int, default=3, check=_positive),
        "clients_per_domain": _Field((int, list, type(None)), default=None),
        "val_fraction": _Field((int, float), default=0.1, check=_fraction),
    },
    "architecture": {
        "preset": _Field((str, type(None)), default="desk_cnn"),
        "id": _Field((str, type(None)), default=None),
        "input_shape": _Field((list, type(None)), default=None),
        "num_classes": _Field((int, type(None)), default=None),
        "layers": _Field((list, type(None)), default=None),
        "bn_mode": _Field(str, default="batch_average",
                          choices=("batch_average", "post_average", "tracked",
                                   "locally_tracked")),
        "rescale_init": _Field(bool, default=True),
        "rescale_layer": _Field(bool, default=False),
        "post_average_passes": _Field(int, default=20, check=_positive),
    },
    "splitmix": {
        "atom_width": _Field((int, float), default=0.25, check=_unit),
        "sort_bases": _Field(bool, default=False),
    },
    "budgets": {
        "kind": _Field(str, default="exponential_groups",
                       choices=("exponential_groups", "more_sufficient",
                                "step_increase", "log_normal", "explicit")),
        "values": _Field((list, type(None)), default=None),
        "group_widths": _Field((list, type(None)), default=None),
        "step": _Field((int, float), default=0.25, check=_unit),
        "median": _Field((int, float), default=0.45, check=_positive),
        "sigma": _Field((int, float), default=0.35, check=_positive),
        "formula_exponent": _Field(bool, default=False),
    },
    "schedule": {
        "rounds": _Field(int, default=50, check=_non_negative),
        "local_epochs": _Field(int, default=1, check=_non_negative),
        "batch_size": _Field(int, default=32, check=_positive),
        "lr": {
            "kind": _Field(str, default="constant",
                           choices=("constant", "step", "cosine")),
            "base": _Field((int, float), default=0.1, check=_positive),
            "milestones": _Field(list, default=[]),
            "gamma": _Field((int, float), default=0.1, check=_positive),
        },
        "momentum": _Field((int, float), default=0.9, check=_fraction),
        "weight_decay": _Field((int, float), default=5e-4, check=_non_negative),
        "participants_per_round": _Field((int, type(None)), default=None),
        "eval_every": _Field(int, default=5, check=_positive),
    },
    "robustness": {
        "enabled": _Field(bool, default=False),
        "epsilon": _Field((int, float), default=8.0 / 255.0, check=_non_negative),
        "steps": _Field(int, default=7, check=_positive),
        "step_size": _Field((int, float), default=2.0 / 255.0, check=_positive),
        "lambda_grid": _Field(list, default=[0.0, 0.2, 0.5, 0.8, 1.0]),
        "lambda_n": _Field((int, float), default=0.5, check=_fraction),
    },
    "baseline": _Field(str, default="none",
                       choices=("none", "fedavg_individual", "sheterofl")),
    "baseline_options": {
        "widths": _Field((list, type(None)), default=None),
        "ignore_budgets": _Field(bool, default=False),
    },
    "eval_widths": _Field((list, type(None)), default=None),
    # record of applied --set overrides; present so a resolved-config echo
    # can be fed back in as a config file unchanged
    "overrides": _Field(list, default=[]),
}


def _validate_node(schema, raw, path):
    out = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(raw).__name__}")
    for key in raw:
        if key not in schema:
            raise ConfigError(f"{_join(path, key)}: unknown key")
    for key, spec in schema.items():
        where = _join(path, key)
        if isinstance(spec, dict):
            out[key] = _validate_node(spec, raw.get(key, {}), where)
            continue
        if key in raw:
            value = raw[key]
        elif spec.default is _UNSET:
            raise ConfigError(f"{where}: required")
        else:
            value = copy.deepcopy(spec.default)
        if isinstance(value, bool) and bool not in spec.types:
            raise ConfigError(f"{where}: unexpected boolean")
        if not isinstance(value, spec.types):
            names = "/".join(t.__name__ for t in spec.types)
            raise ConfigError(f"{where}: expected {names}, got {type(value).__name__}")
        if spec.choices and value not in spec.choices:
            raise ConfigError(f"{where}: must be one of {list(spec.choices)}")
        if spec.check and value is not None and not spec.check(value):
            raise ConfigError(f"{where}: invalid value {value!r}")
        out[key] = value
    return out


def _join(path, key):
    return f"{path}.{key}" if path else key


def validate_config(raw: dict) -> dict:
    """Resolve defaults and check every field; raises ConfigError on problems."""
    cfg = _validate_node(SCHEMA, raw, "")
    lam_grid = cfg["robustness"]["lambda_grid"]
    if any(not isinstance(v, (int, float)) or not 0 <= v <= 1 for v in lam_grid):
        raise ConfigError("robustness.lambda_grid: entries must lie in [0, 1]")
    atom = cfg["splitmix"]["atom_width"]
    if abs(round(1.0 / atom) - 1.0 / atom) > 1e-9:
        raise ConfigError(f"splitmix.atom_width: 1/{atom} must be an integer")
    if cfg["dataset"]["kind"] != "synthetic" and not cfg["dataset"]["path"]:
        raise ConfigError("dataset.path: required for file-backed datasets")
    if cfg["budgets"]["kind"] == "explicit" and not cfg["budgets"]["values"]:
        raise ConfigError("budgets.values: required for explicit budgets")
    for name in ("values", "group_widths"):
        vals = cfg["budgets"][name]
        if vals is not None and any(not isinstance(v, (int, float)) or not 0 < v <= 1
                                    for v in vals):
            raise ConfigError(f"budgets.{name}: entries must lie in (0, 1]")
    if cfg["eval_widths"] is not None:
        if any(not isinstance(v, (int, float)) or not 0 < v <= 1 for v in cfg["eval_widths"]):
            raise ConfigError("eval_widths: entries must lie in (0, 1]")
    return cfg


def load_config(path, overrides=()):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path!r} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    applied = list(raw.get("overrides", []))
    for item in overrides:
        key, value = parse_override(item)
        _set_path(raw, key, value)
        applied.append({"key": key, "value": value})
    raw["overrides"] = applied
    return validate_config(raw)


def parse_override(item):
    """--set key.path=value; the value is parsed as JSON, else kept a string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r}: expected key=value")
    key, _, raw_value = item.partition("=")
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    return key.strip(), value


def _set_path(raw, dotted, value):
    parts = dotted.split(".")
    node = raw
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted!r}: {part} is not a section")
    node[parts[-1]] = value
