"""Result bundle: CSV schemas, deterministic writers, text report rendering.

Every run writes (where applicable):
    rounds.csv            round, width, val_acc, uploaded_params, macs
    final_table.csv       width, acc, macs, params
    tradeoff.csv          width, lambda, sa, ra
    domain_coverage.csv   domain, trained_param_pct
    config_resolved.json  exact resolved configuration echo
Floats are formatted with fixed precision so identical runs produce
byte-identical files.
"""

import csv
import json
import os

ROUNDS_FIELDS = ("round", "width", "val_acc", "uploaded_params", "macs")
FINAL_FIELDS = ("width", "acc", "macs", "params")
TRADEOFF_FIELDS = ("width", "lambda", "sa", "ra")
COVERAGE_FIELDS = ("domain", "trained_param_pct")


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt(row[f]) for f in fields])


def write_bundle(out_dir, *, config, rounds_rows, final_rows,
                 tradeoff_rows=None, coverage_rows=None):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_resolved.json"), "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_csv(os.path.join(out_dir, "rounds.csv"), ROUNDS_FIELDS, rounds_rows)
    _write_csv(os.path.join(out_dir, "final_table.csv"), FINAL_FIELDS, final_rows)
    if tradeoff_rows is not None:
        _write_csv(os.path.join(out_dir, "tradeoff.csv"), TRADEOFF_FIELDS, tradeoff_rows)
    if coverage_rows is not None:
        _write_csv(os.path.join(out_dir, "domain_coverage.csv"), COVERAGE_FIELDS,
                   coverage_rows)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _label(run_dir):
    cfg_path = os.path.join(run_dir, "config_resolved.json")
    if os.path.exists(cfg_path):
        with open(cfg_path) as fh:
            cfg = json.load(fh)
        base = cfg.get("baseline", "none")
        return "splitmix" if base == "none" else base
    return os.path.basename(os.path.normpath(run_dir))


def render_report(run_dirs):
    """Side-by-side per-width table (acc / MACs / params) across runs."""
    lines = []
    warnings = []
    columns = []
    for run_dir in run_dirs:
        final = os.path.join(run_dir, "final_table.csv")
        if not os.path.exists(final):
            warnings.append(f"warning: {run_dir}: missing final_table.csv")
            continue
        rows = {r["width"]: r for r in read_csv(final)}
        columns.append((_label(run_dir), rows))
    if not columns:
        raise FileNotFoundError("no final_table.csv found in the given directories")

    widths = sorted({w for _, rows in columns for w in rows}, key=float)
    header = ["width"] + [f"{label} acc/MACs/params" for label, _ in columns]
    table = [header]
    for w in widths:
        row = [f"x{float(w):g}"]
        for _, rows in columns:
            if w in rows:
                r = rows[w]
                row.append(f"{float(r['acc']) * 100:.1f}% / "
                           f"{float(r['macs']) / 1e6:.2f}M / "
                           f"{float(r['params']) / 1e6:.2f}M")
            else:
                row.append("-")
        table.append(row)
    col_w = [max(len(row[i]) for row in table) for i in range(len(header))]
    for i, row in enumerate(table):
        lines.append("  ".join(cell.ljust(col_w[j]) for j, cell in enumerate(row)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * col_w[j] for j in range(len(header))))

    for run_dir in run_dirs:
        cov = os.path.join(run_dir, "domain_coverage.csv")
        if os.path.exists(cov):
            lines.append("")
            lines.append(f"locally trained parameters by domain ({_label(run_dir)}):")
            for r in read_csv(cov):
                lines.append(f"  domain {r['domain']}: "
                             f"{float(r['trained_param_pct']) * 100:.1f}%")
    return "\n".join(lines + warnings)
