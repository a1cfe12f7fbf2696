"""Render an experiment directory into tables and figures.

Reads only; everything lands in a ``report/`` subdirectory: per-structure
metric and volume tables as CSV, Bland-Altman agreement tables and scatter
plots, a DSC bar chart, and grade statistics. Rerunning produces
byte-identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import MissingArtifactsError
from .stats import GradeRecord, agreement_summary, confusion_matrix
from .volumes import FULL_HEART_LABELS, STRUCTURE_NAMES

_FIG_DPI = 110


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def _write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def _load_volume_rows(path):
    with open(path, newline="") as f:
        return [
            {
                "patient": r["patient"],
                "structure": r["structure"],
                "ccta_ref_ml": float(r["ccta_ref_ml"]),
                "ncct_auto_ml": float(r["ncct_auto_ml"]),
            }
            for r in csv.DictReader(f)
        ]


def _bland_altman_figure(path, pairs, bias, loa_low, loa_high, title):
    means = [(a + b) / 2.0 for a, b in pairs]
    diffs = [a - b for a, b in pairs]
    fig, ax = plt.subplots(figsize=(4.0, 3.2), dpi=_FIG_DPI)
    ax.scatter(means, diffs, s=18, color="#2b6aa3")
    ax.axhline(bias, color="#333333", linewidth=1.2)
    for y in (loa_low, loa_high):
        ax.axhline(y, color="#888888", linewidth=1.0, linestyle="--")
    ax.set_xlabel("mean volume (mL)")
    ax.set_ylabel("difference (mL)")
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _dsc_figure(path, per_structure):
    names = list(per_structure)
    means = [per_structure[n]["dsc_mean"] for n in names]
    sds = [per_structure[n]["dsc_sd"] for n in names]
    fig, ax = plt.subplots(figsize=(5.6, 3.2), dpi=_FIG_DPI)
    ax.bar(range(len(names)), means, yerr=sds, color="#4b8bbe", capsize=3)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels([n.replace("_", "\n") for n in names], fontsize=7)
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("Dice coefficient")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def run_report(experiment_dir, out_dir=None):
    """Derive the report from a completed experiment directory; raises with a
    list of missing artifacts when the experiment is incomplete."""
    exp = Path(experiment_dir)
    required = ["summary.json", "volumes.csv", "config.json"]
    missing = [name for name in required if not (exp / name).exists()]
    if missing:
        raise MissingArtifactsError(missing)

    out = Path(out_dir) if out_dir else exp / "report"
    out.mkdir(parents=True, exist_ok=True)

    summary = json.loads((exp / "summary.json").read_text())
    volume_rows = _load_volume_rows(exp / "volumes.csv")

    structures = [STRUCTURE_NAMES[k] for k in FULL_HEART_LABELS] + ["full_heart"]
    bias_table = summary["volume_bias_ncct_vs_ccta"]
    _write_csv(
        out / "bland_altman.csv",
        ["structure", "n", "bias_ml", "sd_ml", "loa_low_ml", "loa_high_ml", "t", "p", "relative_bias"],
        [{"structure": name, **bias_table[name]} for name in structures],
    )

    per_structure = summary["vnc"]["per_structure"]
    rows = [
        {
            "structure": name,
            "dsc_mean": per_structure[name]["dsc_mean"],
            "dsc_sd": per_structure[name]["dsc_sd"],
            "assd_mean_mm": per_structure[name]["assd_mean_mm"],
        }
        for name in per_structure
    ]
    rows.append(
        {
            "structure": "average",
            "dsc_mean": summary["vnc"]["mean_dsc"],
            "dsc_sd": None,
            "assd_mean_mm": summary["vnc"]["mean_assd_mm"],
        }
    )
    _write_csv(out / "metrics_by_structure.csv", ["structure", "dsc_mean", "dsc_sd", "assd_mean_mm"], rows)

    rel = summary["relative_volumes"]
    rel_rows = []
    for name in [STRUCTURE_NAMES[k] for k in FULL_HEART_LABELS]:
        rel_rows.append(
            {
                "structure": name,
                "ccta_ref_mean": rel["ccta_ref"][name]["mean"],
                "ccta_ref_sd": rel["ccta_ref"][name]["sd"],
                "vnc_auto_mean": rel["vnc_auto"][name]["mean"],
                "vnc_auto_sd": rel["vnc_auto"][name]["sd"],
                "ncct_auto_mean": rel["ncct_auto"][name]["mean"],
                "ncct_auto_sd": rel["ncct_auto"][name]["sd"],
            }
        )
    _write_csv(
        out / "relative_volumes.csv",
        ["structure", "ccta_ref_mean", "ccta_ref_sd", "vnc_auto_mean", "vnc_auto_sd",
         "ncct_auto_mean", "ncct_auto_sd"],
        rel_rows,
    )

    grade_rows = [
        {"grade": g, "count": n}
        for g, n in sorted(summary.get("auto_grades_vnc", {}).items())
    ]
    if grade_rows:
        _write_csv(out / "auto_grades.csv", ["grade", "count"], grade_rows)

    grades_csv = exp / "grades.csv"
    if grades_csv.exists():
        records = []
        with open(grades_csv, newline="") as f:
            for r in csv.DictReader(f):
                records.append(GradeRecord(r["case_id"], r["observer_id"], int(r["grade"])))
        rep = agreement_summary(confusion_matrix(records))
        _write_csv(
            out / "grade_analysis.csv",
            ["weighted_kappa", "raw_agreement", "joint_leq3_count",
             "mean_grade_observer_1", "mean_grade_observer_2", "n"],
            [
                {
                    "weighted_kappa": rep.weighted_kappa,
                    "raw_agreement": rep.raw_agreement,
                    "joint_leq3_count": rep.joint_leq3_count,
                    "mean_grade_observer_1": rep.mean_grade_per_observer["observer_1"],
                    "mean_grade_observer_2": rep.mean_grade_per_observer["observer_2"],
                    "n": int(rep.confusion.sum()),
                }
            ],
        )
        _write_csv(
            out / "grade_confusion.csv",
            ["grade"] + [f"obs2_grade{j}" for j in range(1, 6)],
            [
                {"grade": i + 1, **{f"obs2_grade{j + 1}": int(rep.confusion[i, j]) for j in range(5)}}
                for i in range(5)
            ],
        )

    for name in structures:
        pairs = [
            (row["ncct_auto_ml"], row["ccta_ref_ml"])
            for row in volume_rows
            if row["structure"] == name
        ]
        entry = bias_table[name]
        _bland_altman_figure(
            out / f"bland_altman_{name}.png",
            pairs,
            entry["bias_ml"],
            entry["loa_low_ml"],
            entry["loa_high_ml"],
            name.replace("_", " "),
        )
    _dsc_figure(out / "dsc_by_structure.png", per_structure)
    return out
