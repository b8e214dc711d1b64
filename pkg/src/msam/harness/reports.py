"""Report emitters: metrics JSON, per-class CSV, quantification estimates
CSV, and run-comparison tables."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .. import metrics as mt


def classification_report(batch: mt.EvalBatch, *, precision_cutoff: int,
                          bins: int = 20) -> dict:
    macro_f1, micro_f1 = mt.f1_scores(batch)
    macro_auc, micro_auc = mt.auc_scores(batch)
    mean_ece, _ = mt.mece(batch, bins)
    cutoff = min(precision_cutoff, batch.num_classes)
    return {
        "macro_f1": macro_f1,
        "micro_f1": micro_f1,
        "macro_auc": macro_auc,
        "micro_auc": micro_auc,
        f"p_at_{cutoff}": mt.precision_at_n(batch, cutoff),
        "mece": mean_ece,
        "num_documents": batch.num_docs,
        "num_classes": batch.num_classes,
    }


def write_metrics_report(out_dir, batch: mt.EvalBatch, *, precision_cutoff: int,
                         bins: int = 20, class_names=None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = classification_report(batch, precision_cutoff=precision_cutoff,
                                   bins=bins)
    (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True)
                                      + "\n", encoding="utf-8")
    rows = mt.per_class_report(batch, bins)
    with open(out / "per_class.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "f1", "auc", "ece", "prevalence"])
        for row in rows:
            name = (class_names[row["class"]] if class_names is not None
                    else row["class"])
            writer.writerow([name, f"{row['f1']:.6f}", f"{row['auc']:.6f}",
                             f"{row['ece']:.6f}", f"{row['prevalence']:.6f}"])
    return report


def write_estimates_csv(path, rows) -> None:
    """Quantification estimates: one row per (group, method, class)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group_id", "method", "class", "estimate", "truth"])
        for row in rows:
            writer.writerow([row["group_id"], row["method"], row["class"],
                             f"{row['estimate']:.6f}", f"{row['truth']:.6f}"])


def write_quant_summary(path, summary: dict) -> None:
    """Per-method MAE/MRAE summary as JSON."""
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def comparison_table(run_reports: dict[str, dict]) -> list[list]:
    """Rows of (run, metric...) spanning the union of metric keys."""
    keys: list[str] = []
    for report in run_reports.values():
        for key in report:
            if key not in keys and isinstance(report[key], (int, float)):
                keys.append(key)
    rows = [["run"] + keys]
    for run, report in sorted(run_reports.items()):
        rows.append([run] + [report.get(k, "") for k in keys])
    return rows


def write_comparison_csv(path, run_reports: dict[str, dict]) -> None:
    rows = comparison_table(run_reports)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in rows:
            writer.writerow([f"{v:.6f}" if isinstance(v, float) else v
                             for v in row])


def quant_method_summary(per_method: dict[str, tuple[list, list, list]]) -> dict:
    """MAE/MRAE per method from (estimates, truths, sizes) triples."""
    summary = {}
    for method, (estimates, truths, sizes) in per_method.items():
        mae, mrae = mt.quant_errors(estimates, truths, sizes)
        summary[method] = {"mae": mae, "mrae": mrae,
                           "num_groups": len(estimates)}
    return summary
