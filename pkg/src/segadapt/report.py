"""Aggregate adaptation runs into one table plus figures."""

import csv
import json
import os
from collections import defaultdict

import numpy as np

from .errors import DataError
from .plots import bar_figure, line_figure


def read_run(run_dir):
    """Pull the interesting bits out of one adaptation output directory."""
    summary_path = os.path.join(run_dir, "summary.json")
    if not os.path.isfile(summary_path):
        raise DataError(f"{run_dir}: no summary.json; not an adaptation run?")
    with open(summary_path) as fh:
        summary = json.load(fh)
    run = {
        "dir": run_dir,
        "variant": summary.get("variant", "custom"),
        "seed": summary.get("config", {}).get("seed", -1),
        "wall_clock_s": summary.get("wall_clock_s"),
        "val_epochs": [],
        "val_fg": [],
        "eta": [],
        "iters": [],
    }
    val_path = os.path.join(run_dir, "val_metrics.csv")
    if os.path.isfile(val_path):
        with open(val_path) as fh:
            for row in csv.DictReader(fh):
                run["val_epochs"].append(int(row["epoch"]))
                run["val_fg"].append(float(row["dsc_fg"]))
    metrics_path = os.path.join(run_dir, "metrics.csv")
    if os.path.isfile(metrics_path):
        with open(metrics_path) as fh:
            for row in csv.DictReader(fh):
                run["iters"].append(int(row["iter"]))
                run["eta"].append(float(row["eta_t"]))
    return run


def stability_variance(val_fg, window=10):
    """Variance of the validation score over the last ``window`` epochs."""
    if not val_fg:
        return float("nan")
    tail = val_fg[-window:]
    return float(np.var(tail))


def write_report(run_dirs, out_dir, window=10):
    runs = [read_run(d) for d in run_dirs]
    os.makedirs(out_dir, exist_ok=True)

    rows = []
    for run in runs:
        final = run["val_fg"][-1] if run["val_fg"] else float("nan")
        best = max(run["val_fg"]) if run["val_fg"] else float("nan")
        rows.append({
            "run": run["dir"],
            "variant": run["variant"],
            "seed": run["seed"],
            "final_fg_dsc": final,
            "best_fg_dsc": best,
            "stability_var": stability_variance(run["val_fg"], window),
            "wall_clock_s": run["wall_clock_s"],
        })
    report_path = os.path.join(out_dir, "report.csv")
    with open(report_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)

    by_variant = defaultdict(list)
    for row in rows:
        if np.isfinite(row["final_fg_dsc"]):
            by_variant[row["variant"]].append(row["final_fg_dsc"])
    figures = []
    if by_variant:
        names = sorted(by_variant)
        means = [float(np.mean(by_variant[v])) for v in names]
        stds = [float(np.std(by_variant[v])) for v in names]
        path = os.path.join(out_dir, "dsc_by_variant.png")
        bar_figure(path, names, means, stds, ylabel="foreground DSC",
                   title="final validation DSC by variant")
        figures.append(path)

    curves = {}
    for run in runs:
        if run["val_fg"]:
            label = f"{run['variant']}/s{run['seed']}"
            curves[label] = (run["val_epochs"], run["val_fg"])
    if curves:
        path = os.path.join(out_dir, "val_curves.png")
        line_figure(path, curves, xlabel="epoch", ylabel="foreground DSC",
                    title="validation DSC during adaptation")
        figures.append(path)

    first_eta = next((r for r in runs if r["eta"]), None)
    if first_eta is not None:
        path = os.path.join(out_dir, "eta_curve.png")
        line_figure(path, {"eta_t": (first_eta["iters"], first_eta["eta"])},
                    xlabel="iteration", ylabel="eta_t",
                    title="momentum decay")
        figures.append(path)

    return {"table": report_path, "figures": figures, "rows": rows}
