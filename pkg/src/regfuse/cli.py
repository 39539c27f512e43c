"""Command-line entry point wiring datasets, training, inference, evaluation,
and ablation runs.

The default configuration is the CPU-scale desk profile; pass
``--full-schedule`` for the full training schedule. Any config key can be
overridden with ``--set key=value``. The PAMR_THREADS environment variable
caps worker parallelism.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .datasets import generate_dataset, load_dataset
from .image import load_image, save_image
from .metrics import MetricReport, evaluate_fusion, evaluate_registration
from .training import (Checkpoint, TrainConfig, coerce_config_value,
                       load_config, run_ablation, save_config, train,
                       write_history)
from .warpfield import save_field, tensor_to_field, tensor_to_image
from .warpfield import image_to_tensor


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except (ValueError, FileNotFoundError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _apply_thread_cap():
    cap = os.environ.get("PAMR_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regfuse",
                                     description="cross-modal synthesis, registration, and fusion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom pair dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--deform-magnitude", type=float, default=3.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="run the training scheme")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("register", help="synthesize, estimate the field, and warp")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pat", required=True)
    p.add_argument("--mri", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_register, with_fusion=False)

    p = sub.add_parser("fuse", help="register then fuse a pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pat", required=True)
    p.add_argument("--mri", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_register, with_fusion=True)

    p = sub.add_parser("evaluate", help="write metric reports for images")
    p.add_argument("--pat", action="append", default=[], help="source PAT image (repeatable)")
    p.add_argument("--mri", action="append", default=[], help="source MRI image (repeatable)")
    p.add_argument("--registered", action="append", default=[],
                   help="registered PAT image (repeatable, enables the registration report)")
    p.add_argument("--fused", action="append", default=[],
                   help="fused image (repeatable, enables the fusion report)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate the component-toggle variants")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ablate)
    return parser


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--full-schedule", action="store_true",
                   help="start from the full schedule instead of the desk profile")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", type=int, default=None, help="training image size")
    p.add_argument("--epochs-stage1", type=int, default=None)
    p.add_argument("--epochs-stage2", type=int, default=None)
    p.add_argument("--levels", type=int, default=None, help="registration pyramid levels")
    p.add_argument("--no-p2m", action="store_true", help="register the raw cross-modal pair")
    p.add_argument("--no-mlr", action="store_true", help="fuse without registration")
    p.add_argument("--no-joint", action="store_true",
                   help="train registration without fusion-loss gradients")
    p.add_argument("--single-stage", action="store_true", help="disable the two-stage scheme")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")


def _resolve_config(args) -> TrainConfig:
    if args.config:
        cfg = load_config(args.config)
    elif args.full_schedule:
        cfg = TrainConfig()
    else:
        cfg = TrainConfig.desk()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.size is not None:
        updates["image_size"] = args.size
    if args.epochs_stage1 is not None:
        updates["epochs_stage1"] = args.epochs_stage1
    if args.epochs_stage2 is not None:
        updates["epochs_stage2"] = args.epochs_stage2
    if args.levels is not None:
        updates["levels"] = args.levels
    if args.no_p2m:
        updates["use_p2m"] = False
    if args.no_mlr:
        updates["use_mlr"] = False
    if args.no_joint:
        updates["joint_reg_fusion"] = False
    if args.single_stage:
        updates["two_stage"] = False
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        updates[key] = coerce_config_value(key, value)
    return replace(cfg, **updates)


def _cmd_gen_data(args) -> int:
    manifest = generate_dataset(args.seed, args.count, args.size, args.deform_magnitude, args.out)
    print(f"wrote {args.count} pairs to {Path(args.out)} ({manifest.name})")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    dataset = load_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train(cfg, dataset)
    if "stage1" in result:
        result["stage1"].save(out_dir / "stage1.ckpt")
    result["final"].save(out_dir / "final.ckpt")
    write_history(result["history"], out_dir / "loss_log.csv")
    save_config(cfg, out_dir / "config.txt")
    print(f"trained {result['final'].stage} checkpoint -> {out_dir / 'final.ckpt'}")
    return 0


def _cmd_register(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    pipeline = ckpt.build_pipeline()
    pat = load_image(args.pat, "PAT")
    mri = load_image(args.mri, "MRI")
    out = pipeline.infer(image_to_tensor(pat), image_to_tensor(mri))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pseudo = tensor_to_image(out["pseudo_mri"], "PSEUDO_MRI")
    registered = tensor_to_image(out["registered_pat"], "PAT")
    save_image(pseudo, out_dir / "pseudo_mri.r32f")
    save_image(pseudo, out_dir / "pseudo_mri.png")
    save_field(tensor_to_field(out["phi"]), out_dir / "field.f32d")
    save_image(registered, out_dir / "registered_pat.r32f")
    save_image(registered, out_dir / "registered_pat.png")
    if args.with_fusion:
        fused = tensor_to_image(out["fused"], "FUSED")
        save_image(fused, out_dir / "fused.r32f")
        save_image(fused, out_dir / "fused.png")
    print(f"wrote outputs to {out_dir}")
    return 0


def _write_report(report: MetricReport, out_dir: Path, name: str):
    (out_dir / f"{name}.csv").write_text(report.to_csv())
    (out_dir / f"{name}.txt").write_text(report.to_text())


def _cmd_evaluate(args) -> int:
    if len(args.pat) != len(args.mri):
        raise ValueError("need matching --pat/--mri lists")
    pats = [load_image(p, "PAT") for p in args.pat]
    mris = [load_image(p, "MRI") for p in args.mri]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    wrote = []
    if args.registered:
        if len(args.registered) != len(pats):
            raise ValueError("need one --registered per source pair")
        registered = [load_image(p, "PAT") for p in args.registered]
        report = evaluate_registration(list(zip(pats, mris)), registered)
        _write_report(report, out_dir, "registration_report")
        wrote.append("registration_report")
    if args.fused:
        if len(args.fused) != len(pats):
            raise ValueError("need one --fused per source pair")
        fused = [load_image(p, "FUSED") for p in args.fused]
        report = evaluate_fusion(fused, list(zip(pats, mris)))
        _write_report(report, out_dir, "fusion_report")
        wrote.append("fusion_report")
    if not wrote:
        raise ValueError("nothing to evaluate: pass --registered and/or --fused")
    print(f"wrote {', '.join(wrote)} to {out_dir}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    train_pairs = load_dataset(args.data)
    eval_pairs = load_dataset(args.eval_data) if args.eval_data else None
    report = run_ablation(cfg, train_pairs, eval_pairs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation_report.csv").write_text(report.to_csv())
    (out_dir / "ablation_report.txt").write_text(report.to_text())
    print(f"wrote ablation_report to {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
