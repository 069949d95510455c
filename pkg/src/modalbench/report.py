"""Aggregation of trial records into selection reports and tables.

For every (selection method, algorithm, test modality) cell the report
carries the chosen trial per seed and the mean and sample standard
deviation (ddof=1) of the chosen trials' test accuracies across seeds.
Cells backed by a single surviving seed are flagged; cells with no
surviving seed render as an em-free dash. Regenerating a report from an
unchanged store is byte-identical.
"""

import io
import math

from .algorithms import algorithm_family
from .errors import SelectionError
from .selection import run_selection

DASH = "—"


def _sample_std(values):
    n = len(values)
    if n <= 1:
        return 0.0
    mean = sum(values) / n
    return math.sqrt(sum((v - mean) ** 2 for v in values) / (n - 1))


def group_records(records):
    """Split raw store lines into trials, sub-runs, metrics."""
    trials, subruns, metrics = [], [], []
    for rec in records:
        kind = rec.get("type")
        if kind == "trial":
            trials.append(rec)
        elif kind == "loo_subrun":
            subruns.append(rec)
        elif kind == "metrics":
            metrics.append(rec)
    return trials, subruns, metrics


def aggregate_report(records):
    """Build the selection report structure from raw store records.

    Returns {dataset: {method: {algorithm: {modality: cell}}}} where a
    cell is None (nothing survived) or a dict with mean/std/per-seed
    accuracies, chosen trials, and a single-seed flag.
    """
    trials, subruns, _ = group_records(records)
    report = {}
    cells = {}
    for rec in trials:
        key = (rec["dataset"], rec["algorithm"], rec["test_modality"])
        cells.setdefault(key, []).append(rec)
    sub_by_key = {}
    for rec in subruns:
        key = (rec["dataset"], rec["algorithm"], rec["test_modality"])
        sub_by_key.setdefault(key, []).append(rec)

    methods = ["training_modality", "oracle"]
    if subruns:
        methods.insert(1, "leave_one_out")

    for (dataset, algorithm, modality), recs in sorted(cells.items()):
        dataset_block = report.setdefault(dataset, {})
        ok = [r for r in recs if r.get("status") == "ok"]
        k_train = len(ok[0]["accuracies"]["train_val"]) if ok else 0
        for method in methods:
            method_block = dataset_block.setdefault(method, {})
            algo_block = method_block.setdefault(algorithm, {})
            try:
                chosen, accs = run_selection(
                    method, recs,
                    subruns=sub_by_key.get((dataset, algorithm, modality), []),
                    num_train_modalities=k_train)
            except SelectionError:
                algo_block[modality] = None
                continue
            values = [accs[s] for s in sorted(accs)]
            if not values:
                algo_block[modality] = None
                continue
            algo_block[modality] = {
                "mean": sum(values) / len(values),
                "std": _sample_std(values),
                "per_seed": {str(s): accs[s] for s in sorted(accs)},
                "chosen": {str(s): chosen[s] for s in sorted(chosen)},
                "num_seeds": len(values),
                "single_seed": len(values) == 1,
                "perceptor": recs[0].get("perceptor", ""),
            }
    return report


def format_cell(cell):
    if cell is None:
        return DASH
    text = "%.1f ± %.1f" % (cell["mean"], cell["std"])
    if cell["single_seed"]:
        text += "*"
    return text


def _modalities_of(method_block):
    names = set()
    for algo_block in method_block.values():
        names.update(algo_block)
    return sorted(names)


def render_text(report):
    """Aligned text tables, one per (dataset, selection method)."""
    out = io.StringIO()
    for dataset in sorted(report):
        for method in report[dataset]:
            method_block = report[dataset][method]
            modalities = _modalities_of(method_block)
            header = (["perceptor", "family", "algorithm"]
                      + modalities + ["Avg"])
            rows = [header]
            flagged = False
            for algorithm in sorted(method_block):
                algo_block = method_block[algorithm]
                cells = [algo_block.get(m) for m in modalities]
                means = [c["mean"] for c in cells if c is not None]
                avg = "%.1f" % (sum(means) / len(means)) if means else DASH
                perceptor = next((c["perceptor"] for c in cells
                                  if c is not None), "")
                flagged = flagged or any(
                    c is not None and c["single_seed"] for c in cells)
                rows.append([perceptor, algorithm_family(algorithm).upper(),
                             algorithm]
                            + [format_cell(c) for c in cells] + [avg])
            widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
            out.write("dataset: %s | selection: %s\n" % (dataset, method))
            for i, row in enumerate(rows):
                out.write("  ".join(c.ljust(w) for c, w in zip(row, widths))
                          .rstrip() + "\n")
                if i == 0:
                    out.write("-" * (sum(widths) + 2 * (len(widths) - 1))
                              + "\n")
            if flagged:
                out.write("* single surviving seed; std undefined,"
                          " reported as 0.0\n")
            out.write("\n")
    return out.getvalue()


def render_csv(report):
    """Long-form CSV: one row per (dataset, method, algorithm)."""
    out = io.StringIO()
    for dataset in sorted(report):
        for method in report[dataset]:
            method_block = report[dataset][method]
            modalities = _modalities_of(method_block)
            header = (["dataset", "selection", "perceptor", "family",
                       "algorithm"]
                      + ["%s_mean" % m for m in modalities]
                      + ["%s_std" % m for m in modalities] + ["avg"])
            out.write(",".join(header) + "\n")
            for algorithm in sorted(method_block):
                algo_block = method_block[algorithm]
                cells = [algo_block.get(m) for m in modalities]
                means = [c["mean"] for c in cells if c is not None]
                avg = ("%.4f" % (sum(means) / len(means))) if means else ""
                perceptor = next((c["perceptor"] for c in cells
                                  if c is not None), "")
                row = [dataset, method, perceptor,
                       algorithm_family(algorithm).upper(), algorithm]
                row += ["%.4f" % c["mean"] if c else "" for c in cells]
                row += ["%.4f" % c["std"] if c else "" for c in cells]
                row.append(avg)
                out.write(",".join(row) + "\n")
    return out.getvalue()
