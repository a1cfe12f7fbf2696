"""Cross-validation experiment orchestration.

One top-level seed reproduces an entire run. Subordinate seeds derive from it
by a fixed counter scheme: the phantom cohort uses the seed itself, the fold
plan uses ``seed + 1000``, and the training run for fold ``f`` / member ``m``
uses ``seed * 100 + f * 10 + m``.

Every file the experiment reads from its cohort goes through an access log
keyed by phase, so the train-on-contrast-suppressed contract (training never
touches a true non-contrast volume) is checkable after the fact.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, IntegrityError
from .metrics import evaluate_pair, relative_volumes, structure_volumes_ml
from .network import NetworkSpec, load_params, save_params
from .phantom import PhantomConfig, generate_cohort, load_manifest
from .stats import bland_altman, paired_t_test
from .training import (
    Checkpoint,
    TrainConfig,
    make_fold_plan,
    select_ensemble,
    train_one,
)
from .volumes import (
    FULL_HEART_LABELS,
    PreprocessSettings,
    STRUCTURE_NAMES,
    preprocess,
    read_labelmap,
    read_volume,
    resample,
    write_volume,
)

PROFILES = ("desk", "paper")


@dataclass
class RunConfig:
    """Merged experiment configuration; the profile pins the scale."""

    profile: str = "desk"
    seed: int = 7
    cohort_size: int = 12
    num_folds: int = 3
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    preprocess: PreprocessSettings = field(default_factory=PreprocessSettings)
    network: NetworkSpec = None
    train: TrainConfig = None

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}")
        if self.profile == "desk":
            self.cohort_size = 12
            self.num_folds = 3
            if self.network is None:
                self.network = NetworkSpec(base_width=4, patch_shape=(64, 64, 5))
            if self.train is None:
                self.train = TrainConfig(
                    iterations=600,
                    batch_size=12,
                    lr0=3e-3,
                    lr_decay_every=120,
                    val_every=100,
                    patch_shape=(64, 64, 5),
                    sampling="balanced",
                )
        else:
            self.cohort_size = 18
            self.num_folds = 6
            if self.network is None:
                self.network = NetworkSpec()
            if self.train is None:
                self.train = TrainConfig()
        if self.train.patch_shape != self.network.patch_shape:
            raise ConfigError("train and network patch shapes must agree")

    def to_dict(self):
        out = {
            "profile": self.profile,
            "seed": self.seed,
            "cohort_size": self.cohort_size,
            "num_folds": self.num_folds,
            "phantom": asdict(self.phantom),
            "preprocess": asdict(self.preprocess),
            "network": asdict(self.network),
            "train": asdict(self.train),
            "version": __version__,
        }
        out["network"]["patch_shape"] = list(self.network.patch_shape)
        out["train"]["patch_shape"] = list(self.train.patch_shape)
        out["phantom"]["shape"] = list(self.phantom.shape)
        out["phantom"]["spacing_mm"] = list(self.phantom.spacing_mm)
        out["phantom"]["ncct_shift_mm"] = list(self.phantom.ncct_shift_mm)
        return out


def derive_seed(top_seed, *, fold=None, member=None, what="train"):
    if what == "phantom":
        return int(top_seed)
    if what == "foldplan":
        return int(top_seed) + 1000
    return int(top_seed) * 100 + int(fold) * 10 + int(member)


class CohortStore:
    """Manifest-backed loader that records every file access with its phase."""

    def __init__(self, manifest, log_path=None):
        self.manifest = manifest
        self.by_id = {e["id"]: e for e in manifest["patients"]}
        self.phase = "setup"
        self.log = []
        self.log_path = Path(log_path) if log_path else None

    def set_phase(self, phase):
        self.phase = phase

    def patient_ids(self):
        return [e["id"] for e in self.manifest["patients"]]

    def _record(self, pid, key, path):
        self.log.append(
            {"phase": self.phase, "patient": pid, "key": key, "path": Path(path).name}
        )

    def volume(self, pid, key):
        path = self.by_id[pid][key]
        self._record(pid, key, path)
        return read_volume(path)

    def labels(self, pid, key):
        path = self.by_id[pid][key]
        self._record(pid, key, path)
        return read_labelmap(path)

    def save_log(self):
        if self.log_path:
            with open(self.log_path, "w") as f:
                json.dump(self.log, f, indent=2)
                f.write("\n")


# ---------------------------------------------------------------------------
# Checkpoint store
# ---------------------------------------------------------------------------


def _ckpt_dir(store_root, fold, member):
    return Path(store_root) / f"fold{fold}" / f"seed{member}"


def persist_checkpoints(store_root, fold, member, checkpoints):
    """Write checkpoints as fold{K}/seed{S}/iter{N}/ under the store root."""
    base = _ckpt_dir(store_root, fold, member)
    iters = []
    for ckpt in checkpoints:
        d = base / f"iter{ckpt.iteration:06d}"
        manifest = save_params(
            ckpt.params, d, iteration=ckpt.iteration, val_loss=ckpt.total_val_loss
        )
        manifest["val_losses"] = ckpt.val_losses
        with open(d / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
        iters.append(ckpt.iteration)
    marker = {"iterations": iters}
    with open(base / "complete.json", "w") as f:
        json.dump(marker, f)
        f.write("\n")


def load_checkpoints(store_root, fold, member):
    """Reload a run's checkpoints; a marker without its files means the store
    is corrupted."""
    base = _ckpt_dir(store_root, fold, member)
    marker = base / "complete.json"
    if not marker.exists():
        return None
    iters = json.loads(marker.read_text())["iterations"]
    checkpoints = []
    for it in iters:
        d = base / f"iter{it:06d}"
        try:
            params, manifest = load_params(d)
        except (FileNotFoundError, json.JSONDecodeError) as e:
            raise IntegrityError(f"checkpoint store corrupted at {d}: {e}") from e
        if "val_losses" not in manifest:
            raise IntegrityError(f"checkpoint store corrupted at {d}: no val_losses")
        checkpoints.append(
            Checkpoint(params=params, iteration=it, val_losses=manifest["val_losses"])
        )
    return checkpoints


# ---------------------------------------------------------------------------
# The cross-validation experiment
# ---------------------------------------------------------------------------


def _prepare_patient(image, labels, settings):
    prepared = preprocess(image, settings)
    t = settings.target_spacing_mm
    aligned = resample(labels, (t, t, t), output_shape=prepared.shape)
    return {"image": prepared.data, "labels": aligned.data}


def run_crossval(config: RunConfig, out_dir, manifest_path=None):
    """Train every (fold, member) pair, segment all held-out volumes, and
    write metrics, volume comparisons, agreement statistics, and a summary.

    The cohort comes from ``manifest_path`` when given; otherwise a phantom
    cohort is generated inside the experiment directory.
    """
    from .inference import segment

    exp = Path(out_dir)
    exp.mkdir(parents=True, exist_ok=True)

    with open(exp / "config.json", "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")

    if manifest_path is None:
        cohort_dir = exp / "cohort"
        phantom_cfg = PhantomConfig(
            **{**asdict(config.phantom), "seed": derive_seed(config.seed, what="phantom")}
        )
        if (cohort_dir / "manifest.json").exists():
            manifest = load_manifest(cohort_dir / "manifest.json")
        else:
            generate_cohort(config.cohort_size, phantom_cfg, cohort_dir)
            manifest = load_manifest(cohort_dir / "manifest.json")
    else:
        manifest = load_manifest(manifest_path)

    store = CohortStore(manifest, log_path=exp / "access_log.json")
    ids = store.patient_ids()
    plan = make_fold_plan(ids, config.num_folds, seed=derive_seed(config.seed, what="foldplan"))

    # Training phase: contrast-suppressed volumes with contrast-derived labels.
    store.set_phase("train")
    train_data = {
        pid: _prepare_patient(
            store.volume(pid, "vnc"), store.labels(pid, "labels_ccta"), config.preprocess
        )
        for pid in ids
    }

    members = range(config.train.seeds_per_fold)
    all_checkpoints = {}
    for fold in range(config.num_folds):
        for m in members:
            existing = load_checkpoints(exp / "checkpoints", fold, m)
            if existing is not None:
                all_checkpoints[(fold, m)] = existing
                continue
            seed = derive_seed(config.seed, fold=fold, member=m)
            ckpts = train_one(
                fold, seed=seed, data=train_data, fold_plan=plan,
                cfg=config.train, spec=config.network,
            )
            persist_checkpoints(exp / "checkpoints", fold, m, ckpts)
            all_checkpoints[(fold, m)] = ckpts

    # Inference + evaluation phase.
    store.set_phase("inference")
    seg_dir = exp / "segmentations"
    seg_dir.mkdir(exist_ok=True)
    metrics_dir = exp / "metrics"
    metrics_dir.mkdir(exist_ok=True)

    ensembles = {}
    vnc_reports = {}
    ncct_reports = {}
    volume_rows = []
    grade_counts = {g: 0 for g in range(1, 6)}
    from .metrics import auto_grade

    for fold in range(config.num_folds):
        per_seed = [all_checkpoints[(fold, m)] for m in members]
        for pid in plan.folds[fold]:
            chosen = select_ensemble(per_seed, pid)
            ensembles[pid] = [
                {"fold": fold, "member": m, "iteration": _iteration_of(per_seed[m], chosen[m])}
                for m in members
            ]

            store.set_phase("inference")
            vnc = store.volume(pid, "vnc")
            result = segment(chosen, vnc, config.preprocess)
            write_volume(result.labels, seg_dir / f"{pid}_vnc_labels.vol")

            store.set_phase("evaluation")
            ref = store.labels(pid, "labels_ccta")
            report = evaluate_pair(result.labels, ref)
            vnc_reports[pid] = report
            with open(metrics_dir / f"{pid}_vnc_metrics.json", "w") as f:
                json.dump(report.to_dict(), f, indent=2, sort_keys=True)
                f.write("\n")
            grade_counts[auto_grade(result.labels, ref)["grade"]] += 1

            store.set_phase("inference")
            ncct = store.volume(pid, "ncct")
            result_n = segment(chosen, ncct, config.preprocess)
            write_volume(result_n.labels, seg_dir / f"{pid}_ncct_labels.vol")

            store.set_phase("evaluation")
            ref_n = store.labels(pid, "labels_ncct")
            ncct_reports[pid] = evaluate_pair(result_n.labels, ref_n)

            auto_vols = structure_volumes_ml(result_n.labels)
            ref_vols = structure_volumes_ml(ref)
            vnc_vols = structure_volumes_ml(result.labels)
            truth_vols = structure_volumes_ml(ref_n)
            for label in list(FULL_HEART_LABELS) + ["full_heart"]:
                name = STRUCTURE_NAMES[label] if label != "full_heart" else "full_heart"
                volume_rows.append(
                    {
                        "patient": pid, "structure": name,
                        "ccta_ref_ml": ref_vols[name],
                        "vnc_auto_ml": vnc_vols[name],
                        "ncct_auto_ml": auto_vols[name],
                        "ncct_truth_ml": truth_vols[name],
                    }
                )

    with open(exp / "ensembles.json", "w") as f:
        json.dump(ensembles, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_volume_csv(exp / "volumes.csv", volume_rows)
    _write_metrics_csv(exp / "metrics_vnc.csv", vnc_reports)
    store.save_log()

    summary = _summarize(config, plan, vnc_reports, ncct_reports, volume_rows, grade_counts)
    with open(exp / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return exp


def _iteration_of(checkpoints, params):
    for c in checkpoints:
        if c.params is params:
            return c.iteration
    return None


def _write_volume_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f,
            fieldnames=[
                "patient", "structure", "ccta_ref_ml", "vnc_auto_ml",
                "ncct_auto_ml", "ncct_truth_ml",
            ],
        )
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def _write_metrics_csv(path, reports):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["patient", "structure", "dsc", "assd_mm", "hd_mm", "volume_ml"]
        )
        writer.writeheader()
        for pid in sorted(reports):
            for name, s in reports[pid].structures.items():
                writer.writerow(
                    {
                        "patient": pid, "structure": name, "dsc": _fmt(s.dsc),
                        "assd_mm": _fmt(s.assd_mm), "hd_mm": _fmt(s.hd_mm),
                        "volume_ml": _fmt(s.volume_ml),
                    }
                )


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def _summarize(config, plan, vnc_reports, ncct_reports, volume_rows, grade_counts):
    struct_names = [STRUCTURE_NAMES[k] for k in range(1, 8)]
    spacing_iso = float(config.phantom.spacing_mm[0])

    def metric_table(reports):
        table = {}
        for name in struct_names:
            dscs = [r.structures[name].dsc for r in reports.values()]
            assds = [
                r.structures[name].assd_mm
                for r in reports.values()
                if r.structures[name].assd_mm is not None
            ]
            table[name] = {
                "dsc_mean": float(np.mean(dscs)),
                "dsc_sd": float(np.std(dscs, ddof=1)) if len(dscs) > 1 else 0.0,
                "assd_mean_mm": float(np.mean(assds)) if assds else None,
            }
        all_dsc = [r.structures[n].dsc for r in reports.values() for n in struct_names]
        all_assd = [
            r.structures[n].assd_mm
            for r in reports.values()
            for n in struct_names
            if r.structures[n].assd_mm is not None
        ]
        return table, float(np.mean(all_dsc)), (float(np.mean(all_assd)) if all_assd else None)

    vnc_table, vnc_mean_dsc, vnc_mean_assd = metric_table(vnc_reports)
    ncct_table, ncct_mean_dsc, ncct_mean_assd = metric_table(ncct_reports)

    structures = [STRUCTURE_NAMES[k] for k in FULL_HEART_LABELS] + ["full_heart"]

    def bias_table(column):
        table = {}
        for name in structures:
            pairs = [
                (row[column], row["ccta_ref_ml"])
                for row in volume_rows
                if row["structure"] == name
            ]
            ba = bland_altman(pairs)
            t = paired_t_test(pairs)
            rel = [(a - b) / b for a, b in pairs if b > 0]
            table[name] = {
                "n": ba.n,
                "bias_ml": ba.bias,
                "sd_ml": ba.sd_diff,
                "loa_low_ml": ba.loa_low,
                "loa_high_ml": ba.loa_high,
                "t": t["t"],
                "p": t["p"],
                "relative_bias": float(np.mean(rel)),
            }
        return table

    volume_bias = bias_table("ncct_auto_ml")
    volume_bias_truth = bias_table("ncct_truth_ml")

    rel_fractions = {}
    by_patient = {}
    for row in volume_rows:
        by_patient.setdefault(row["patient"], []).append(row)
    for column, key in (
        ("ccta_ref_ml", "ccta_ref"),
        ("vnc_auto_ml", "vnc_auto"),
        ("ncct_auto_ml", "ncct_auto"),
        ("ncct_truth_ml", "ncct_truth"),
    ):
        per_structure = {STRUCTURE_NAMES[k]: [] for k in FULL_HEART_LABELS}
        for pid, rows in by_patient.items():
            full = next(r[column] for r in rows if r["structure"] == "full_heart")
            if full <= 0:
                continue
            for r in rows:
                if r["structure"] != "full_heart":
                    per_structure[r["structure"]].append(r[column] / full)
        rel_fractions[key] = {
            name: {
                "mean": float(np.mean(vals)) if vals else None,
                "sd": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
            }
            for name, vals in per_structure.items()
        }

    return {
        "profile": config.profile,
        "seed": config.seed,
        "num_patients": len(plan.patient_ids),
        "num_folds": config.num_folds,
        "members_per_fold": config.train.seeds_per_fold,
        "injected_ncct_scale": config.phantom.ncct_scale,
        "vnc": {
            "mean_dsc": vnc_mean_dsc,
            "mean_assd_mm": vnc_mean_assd,
            "mean_assd_voxels": (vnc_mean_assd / spacing_iso) if vnc_mean_assd else None,
            "per_structure": vnc_table,
        },
        "ncct": {
            "mean_dsc": ncct_mean_dsc,
            "mean_assd_mm": ncct_mean_assd,
            "per_structure": ncct_table,
        },
        "volume_bias_ncct_vs_ccta": volume_bias,
        "volume_bias_ground_truth": volume_bias_truth,
        "relative_volumes": rel_fractions,
        "auto_grades_vnc": {str(g): int(n) for g, n in grade_counts.items()},
    }
