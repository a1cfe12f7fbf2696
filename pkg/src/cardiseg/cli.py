"""Command-line entry point.

Subcommands: phantom, preprocess, train, infer, eval, stats, grade, crossval,
report. The environment variable CARDISEG_SEED overrides configured seeds.
Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from .errors import CardisegError, ConfigError, DataError


def _env_seed(default):
    value = os.environ.get("CARDISEG_SEED")
    if value is None:
        return default
    try:
        return int(value)
    except ValueError as e:
        raise ConfigError(f"CARDISEG_SEED must be an integer, got {value!r}") from e


def _dump(payload, out_path):
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def cmd_phantom(args):
    from .phantom import PhantomConfig, generate_cohort

    cfg = PhantomConfig(
        seed=_env_seed(args.seed),
        spacing_mm=(args.spacing, args.spacing, args.spacing),
        shape=tuple(args.shape),
    )
    manifest = generate_cohort(args.n, cfg, args.out)
    print(f"wrote {len(manifest['patients'])} patients to {args.out}")
    return 0


def cmd_preprocess(args):
    from .volumes import PreprocessSettings, preprocess, read_volume, write_volume

    settings = PreprocessSettings(
        smooth_sigma_mm=args.sigma_mm,
        target_spacing_mm=args.spacing,
        hu_min=args.hu_min,
        hu_max=args.hu_max,
    )
    volume = read_volume(args.image)
    write_volume(preprocess(volume, settings), args.out)
    return 0


def _load_run_config(path, profile=None, seed=None):
    from .experiment import RunConfig
    from .network import NetworkSpec
    from .phantom import PhantomConfig
    from .training import TrainConfig
    from .volumes import PreprocessSettings

    raw = {}
    if path:
        raw = json.loads(Path(path).read_text())
        raw.pop("version", None)
    if profile:
        raw["profile"] = profile
    if seed is not None:
        raw["seed"] = seed
    raw["seed"] = _env_seed(raw.get("seed", 7))
    kwargs = {
        "profile": raw.get("profile", "desk"),
        "seed": raw["seed"],
    }
    if "phantom" in raw:
        ph = dict(raw["phantom"])
        for key in ("shape", "spacing_mm", "ncct_shift_mm"):
            if key in ph:
                ph[key] = tuple(ph[key])
        kwargs["phantom"] = PhantomConfig(**ph)
    if "preprocess" in raw:
        kwargs["preprocess"] = PreprocessSettings(**raw["preprocess"])
    if "network" in raw:
        net = dict(raw["network"])
        if "patch_shape" in net:
            net["patch_shape"] = tuple(net["patch_shape"])
        kwargs["network"] = NetworkSpec(**net)
    if "train" in raw:
        tr = dict(raw["train"])
        if "patch_shape" in tr:
            tr["patch_shape"] = tuple(tr["patch_shape"])
        kwargs["train"] = TrainConfig(**tr)
    return RunConfig(**kwargs)


def cmd_train(args):
    from .experiment import persist_checkpoints
    from .phantom import load_manifest
    from .training import make_fold_plan, train_one
    from .volumes import preprocess as preprocess_volume
    from .volumes import read_labelmap, read_volume, resample

    config = _load_run_config(args.config)
    manifest = load_manifest(args.manifest)
    ids = [e["id"] for e in manifest["patients"]]
    plan = make_fold_plan(ids, config.num_folds, seed=config.seed + 1000)

    data = {}
    for entry in manifest["patients"]:
        image = preprocess_volume(read_volume(entry["vnc"]), config.preprocess)
        t = config.preprocess.target_spacing_mm
        labels = resample(read_labelmap(entry["labels_ccta"]), (t, t, t), output_shape=image.shape)
        data[entry["id"]] = {"image": image.data, "labels": labels.data}

    seed = _env_seed(args.seed)
    checkpoints = train_one(
        args.fold, seed=seed, data=data, fold_plan=plan,
        cfg=config.train, spec=config.network,
    )
    persist_checkpoints(args.out, args.fold, seed, checkpoints)
    print(f"fold {args.fold} seed {seed}: {len(checkpoints)} checkpoints in {args.out}")
    return 0


def _load_checkpoint_dir(path):
    from .network import load_params

    p = Path(path)
    if (p / "manifest.json").exists():
        return load_params(p)[0]
    candidates = sorted(p.glob("iter*/manifest.json"))
    if not candidates:
        raise DataError(f"{p} holds no checkpoint manifest")
    best = None
    best_key = None
    for manifest_path in candidates:
        manifest = json.loads(manifest_path.read_text())
        key = (manifest.get("val_loss", 0.0), manifest.get("iteration", 0))
        if best_key is None or key < best_key:
            best, best_key = manifest_path.parent, key
    return load_params(best)[0]


def cmd_infer(args):
    import numpy as np

    from .inference import segment
    from .volumes import PreprocessSettings, read_volume, write_volume

    members = [_load_checkpoint_dir(d) for d in args.checkpoints.split(",")]
    image = read_volume(args.image)
    settings = PreprocessSettings()
    result = segment(
        members, image, settings, overlap=args.overlap, keep_probabilities=args.save_probs
    )
    write_volume(result.labels, args.out)
    if args.save_probs:
        np.save(Path(args.out).with_suffix("").as_posix() + "_probs.npy", result.probabilities)
    print(f"labels written to {args.out}")
    return 0


def cmd_eval(args):
    from .metrics import evaluate_pair
    from .volumes import read_labelmap

    auto = read_labelmap(args.auto)
    ref = read_labelmap(args.ref)
    _dump(evaluate_pair(auto, ref).to_dict(), args.out)
    return 0


def cmd_grade(args):
    from .metrics import auto_grade
    from .volumes import read_labelmap

    auto = read_labelmap(args.auto)
    ref = read_labelmap(args.ref)
    result = auto_grade(auto, ref)
    result["deviations_mm"] = {
        k: (v if v != float("inf") else "inf") for k, v in result["deviations_mm"].items()
    }
    _dump(result, args.out)
    return 0


def cmd_stats(args):
    if args.stats_command == "bland-altman":
        from .stats import bland_altman, paired_t_test

        with open(args.pairs, newline="") as f:
            pairs = [(float(r["a"]), float(r["b"])) for r in csv.DictReader(f)]
        ba = bland_altman(pairs)
        t = paired_t_test(pairs)
        _dump(
            {
                "n": ba.n, "bias": ba.bias, "sd_diff": ba.sd_diff,
                "loa_low": ba.loa_low, "loa_high": ba.loa_high,
                "t": t["t"], "p": t["p"],
            },
            args.out,
        )
    else:
        from .stats import GradeRecord, agreement_summary, confusion_matrix

        with open(args.grades, newline="") as f:
            records = [
                GradeRecord(r["case_id"], r["observer_id"], int(r["grade"]))
                for r in csv.DictReader(f)
            ]
        rep = agreement_summary(confusion_matrix(records))
        _dump(
            {
                "weighted_kappa": rep.weighted_kappa,
                "raw_agreement": rep.raw_agreement,
                "joint_leq3_count": rep.joint_leq3_count,
                "mean_grade_per_observer": rep.mean_grade_per_observer,
                "confusion": rep.confusion.tolist(),
            },
            args.out,
        )
    return 0


def cmd_crossval(args):
    from .experiment import run_crossval

    config = _load_run_config(args.config, profile=args.profile, seed=args.seed)
    run_crossval(config, args.out, manifest_path=args.manifest)
    print(f"experiment complete: {args.out}")
    return 0


def cmd_report(args):
    from .report import run_report

    out = run_report(args.experiment, out_dir=args.out)
    print(f"report written to {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cardiseg",
        description="Whole-heart segmentation of non-contrast cardiac CT at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic cohort")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--spacing", type=float, default=1.5)
    p.add_argument("--shape", type=int, nargs=3, default=[64, 64, 64])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="smooth, normalize, and resample a volume")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma-mm", type=float, default=2.0, dest="sigma_mm")
    p.add_argument("--spacing", type=float, default=0.8)
    p.add_argument("--hu-min", type=float, default=-1024.0, dest="hu_min")
    p.add_argument("--hu-max", type=float, default=3071.0, dest="hu_max")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one (fold, seed) run")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment a volume with a checkpoint ensemble")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--save-probs", action="store_true", dest="save_probs")
    p.add_argument("--overlap", type=float, default=0.0)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="compare automatic labels against a reference")
    p.add_argument("--auto", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grade", help="five-point automatic grading of a segmentation")
    p.add_argument("--auto", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_grade)

    p = sub.add_parser("stats", help="agreement statistics")
    stats_sub = p.add_subparsers(dest="stats_command", required=True)
    pb = stats_sub.add_parser("bland-altman", help="bias and limits of agreement")
    pb.add_argument("--pairs", required=True, help="CSV with case_id,a,b")
    pb.add_argument("--out")
    pb.set_defaults(func=cmd_stats)
    pk = stats_sub.add_parser("kappa", help="weighted kappa from grade records")
    pk.add_argument("--grades", required=True, help="CSV with case_id,observer_id,grade")
    pk.add_argument("--out")
    pk.set_defaults(func=cmd_stats)

    p = sub.add_parser("crossval", help="run the full cross-validation experiment")
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=["desk", "paper"])
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("report", help="render tables and figures from an experiment")
    p.add_argument("--experiment", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CardisegError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
