"""Command-line entry points for the full compression-expansion pipeline."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_config
from .data import DataFormatError, load_dataset
from .metrics import MetricsWriter, read_manifest, update_manifest
from .pipeline import (
    assemble_hybrid,
    assemble_meta,
    build_flow_module,
    build_meta_from_state,
    build_teacher_from_state,
    cascade_counts,
    evaluate,
    hybrid_checkpoint,
    hidden_width,
    load_stage_from_teacher,
    meta_checkpoint,
    model_cfg,
    model_from_checkpoint,
    module_checkpoint,
    phase_compress_stage,
    phase_finetune_global,
    phase_finetune_meta,
    phase_incubate,
    phase_train_teacher,
    stage_checkpoint,
    teacher_checkpoint,
    build_meta_shell,
    build_hybrid_shell,
)
from .resnet import build_resnet, count_params, snapshot_state
from .rng import SeededRng
from .tensor import NumericalError

SUBCOMMANDS = (
    "train-teacher",
    "compress",
    "assemble-meta",
    "finetune-meta",
    "incubate",
    "finetune-global",
    "eval",
    "count-params",
)


class PipelineStateError(RuntimeError):
    pass


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stageflow",
        description="Compress ResNet stages into flow mappers, then incubate them back.",
    )
    sub = parser.add_subparsers(dest="command")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if name != "count-params":
            p.add_argument("--out", default=None, help="artifact directory")
        if name in ("incubate", "compress"):
            p.add_argument("--stage", type=int, default=None, help="stage index")
        if name == "eval":
            p.add_argument("--ckpt", default=None, help="checkpoint to evaluate")
    return parser


def _require_out(args) -> str:
    if getattr(args, "out", None) is None:
        raise ConfigError(f"{args.command}: --out DIR is required")
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _load_run_config(args) -> RunConfig:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _manifest_ckpt(out: str, phase: str):
    entries = read_manifest(out)
    if phase not in entries:
        raise PipelineStateError(
            f"phase '{phase}' has no checkpoint in {out}; run the earlier phases first"
        )
    return load_checkpoint(entries[phase][0])


def _write_history(metrics: MetricsWriter, phase: str, history):
    for stats in history:
        metrics.add(phase, stats.epoch, stats.wall_time_s, stats.loss, stats.accuracy, stats.lr)


def _require_clean_freeze(phase: str, violations):
    if violations:
        raise NumericalError(
            f"{phase}: freeze contract violated for {len(violations)} tensors, "
            f"e.g. {violations[:3]}"
        )


def cmd_train_teacher(args) -> int:
    cfg = _load_run_config(args)
    out = _require_out(args)
    data = load_dataset(cfg.data, cfg.augment, cfg.norm_override)
    model, result = phase_train_teacher(cfg, data, SeededRng(cfg.seed).child("teacher"))
    metrics = MetricsWriter(os.path.join(out, "metrics.csv"))
    _write_history(metrics, "teacher", result.history)
    log = {
        "phase": "teacher",
        "epochs": cfg.teacher.epochs,
        "final_accuracy": result.final_accuracy,
        "best_accuracy": result.best_accuracy,
    }
    final_path = os.path.join(out, "teacher_final.ckpt")
    best_path = os.path.join(out, "teacher_best.ckpt")
    d_final = save_checkpoint(teacher_checkpoint(cfg, snapshot_state(model), log), final_path)
    d_best = save_checkpoint(teacher_checkpoint(cfg, result.best_state, log), best_path)
    update_manifest(out, "teacher_final", final_path, d_final)
    update_manifest(out, "teacher", best_path, d_best)
    print(f"teacher: final acc {result.final_accuracy:.4f}, best acc {result.best_accuracy:.4f}")
    return 0


def cmd_compress(args) -> int:
    cfg = _load_run_config(args)
    out = _require_out(args)
    if args.stage is not None and not 1 <= args.stage <= 4:
        raise ConfigError(f"compress: stage must be 1-4, got {args.stage}")
    data = load_dataset(cfg.data, cfg.augment, cfg.norm_override)
    teacher = build_teacher_from_state(cfg, _manifest_ckpt(out, "teacher").tensors)
    metrics = MetricsWriter(os.path.join(out, "metrics.csv"))
    stages = (args.stage,) if args.stage else (1, 2, 3, 4)
    rng = SeededRng(cfg.seed).child("compress")
    for l in stages:
        module, result, violations = phase_compress_stage(cfg, teacher, data, l, rng)
        _require_clean_freeze(f"compress stage {l}", violations)
        for epoch, loss, lr, wall in result.history:
            metrics.add(f"meanflow{l}", epoch, wall, loss, float("nan"), lr)
        log = {"phase": f"meanflow{l}", "final_loss": result.final_loss}
        path = os.path.join(out, f"module_stage{l}.ckpt")
        digest = save_checkpoint(module_checkpoint(cfg, module, log), path)
        update_manifest(out, f"module{l}", path, digest)
        print(f"stage {l} mapper: final flow loss {result.final_loss:.6f}")
    return 0


def cmd_assemble_meta(args) -> int:
    cfg = _load_run_config(args)
    out = _require_out(args)
    teacher = build_teacher_from_state(cfg, _manifest_ckpt(out, "teacher").tensors)
    modules = []
    for l in range(1, 5):
        ckpt = _manifest_ckpt(out, f"module{l}")
        module = build_flow_module(cfg, l, SeededRng(0))
        module.load_state(ckpt.tensors)
        modules.append(module)
    meta = assemble_meta(teacher, modules)
    counts = cascade_counts(meta)
    log = {"phase": "assemble-meta", "param_counts": counts}
    path = os.path.join(out, "meta_init.ckpt")
    digest = save_checkpoint(meta_checkpoint(cfg, snapshot_state(meta), log), path)
    update_manifest(out, "meta_init", path, digest)
    print(f"meta assembled: {counts['total']:,} parameters")
    return 0


def cmd_finetune_meta(args) -> int:
    cfg = _load_run_config(args)
    out = _require_out(args)
    data = load_dataset(cfg.data, cfg.augment, cfg.norm_override)
    meta = build_meta_from_state(cfg, _manifest_ckpt(out, "meta_init").tensors)
    result = phase_finetune_meta(cfg, meta, data, SeededRng(cfg.seed).child("meta"))
    _require_clean_freeze("finetune-meta", result.freeze_violations)
    metrics = MetricsWriter(os.path.join(out, "metrics.csv"))
    _write_history(metrics, "meta", result.fit.history)
    log = {
        "phase": "meta",
        "final_accuracy": result.fit.final_accuracy,
        "best_accuracy": result.fit.best_accuracy,
    }
    final_path = os.path.join(out, "meta_final.ckpt")
    best_path = os.path.join(out, "meta.ckpt")
    d_final = save_checkpoint(meta_checkpoint(cfg, snapshot_state(meta), log), final_path)
    d_best = save_checkpoint(meta_checkpoint(cfg, result.fit.best_state, log), best_path)
    update_manifest(out, "meta_final", final_path, d_final)
    update_manifest(out, "meta", best_path, d_best)
    print(f"meta: final acc {result.fit.final_accuracy:.4f}, best acc {result.fit.best_accuracy:.4f}")
    return 0


def cmd_incubate(args) -> int:
    cfg = _load_run_config(args)
    out = _require_out(args)
    if args.stage is None or not 1 <= args.stage <= 3:
        raise ConfigError(
            f"incubate: --stage must be 1, 2, or 3 (stage 4 stays a flow module); "
            f"got {args.stage}"
        )
    data = load_dataset(cfg.data, cfg.augment, cfg.norm_override)
    meta_state = _manifest_ckpt(out, "meta").tensors
    teacher_state = _manifest_ckpt(out, "teacher").tensors
    stage_state, result = phase_incubate(
        cfg, meta_state, teacher_state, args.stage, data,
        SeededRng(cfg.seed).child("incubate", args.stage),
    )
    _require_clean_freeze(f"incubate stage {args.stage}", result.freeze_violations)
    metrics = MetricsWriter(os.path.join(out, "metrics.csv"))
    _write_history(metrics, f"incubate{args.stage}", result.fit.history)
    log = {
        "phase": f"incubate{args.stage}",
        "final_accuracy": result.fit.final_accuracy,
    }
    path = os.path.join(out, f"stage{args.stage}.ckpt")
    digest = save_checkpoint(stage_checkpoint(cfg, args.stage, stage_state, log), path)
    update_manifest(out, f"stage{args.stage}", path, digest)
    print(f"incubated stage {args.stage}: final acc {result.fit.final_accuracy:.4f}")
    return 0


def cmd_finetune_global(args) -> int:
    cfg = _load_run_config(args)
    out = _require_out(args)
    data = load_dataset(cfg.data, cfg.augment, cfg.norm_override)
    meta = build_meta_from_state(cfg, _manifest_ckpt(out, "meta").tensors)
    rcfg = model_cfg(cfg)
    stages = {}
    for l in (1, 2, 3):
        ckpt = _manifest_ckpt(out, f"stage{l}")
        stage = load_stage_from_teacher(rcfg, l, _manifest_ckpt(out, "teacher").tensors)
        stage.load_state(ckpt.tensors)
        stages[l] = stage
    hybrid = assemble_hybrid(meta, stages)
    result = phase_finetune_global(cfg, hybrid, data, SeededRng(cfg.seed).child("global"))
    metrics = MetricsWriter(os.path.join(out, "metrics.csv"))
    _write_history(metrics, "global", result.fit.history)
    counts = cascade_counts(hybrid)
    log = {
        "phase": "global",
        "final_accuracy": result.fit.final_accuracy,
        "best_accuracy": result.fit.best_accuracy,
        "param_counts": counts,
    }
    final_path = os.path.join(out, "hybrid_final.ckpt")
    best_path = os.path.join(out, "hybrid.ckpt")
    d_final = save_checkpoint(hybrid_checkpoint(cfg, snapshot_state(hybrid), log), final_path)
    d_best = save_checkpoint(hybrid_checkpoint(cfg, result.fit.best_state, log), best_path)
    update_manifest(out, "hybrid_final", final_path, d_final)
    update_manifest(out, "hybrid", best_path, d_best)
    report = evaluate(hybrid, data.test_inputs, data.test_labels)
    with open(os.path.join(out, "hybrid_eval.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"accuracy = {report.accuracy:.6f}\n")
        fh.write(f"loss = {report.loss:.6f}\n")
        fh.write(f"params_total = {counts['total']}\n")
    print(
        f"hybrid: final acc {result.fit.final_accuracy:.4f}, "
        f"best acc {result.fit.best_accuracy:.4f}, params {counts['total']:,}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    if args.ckpt is None:
        raise ConfigError("eval: --ckpt PATH is required")
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(cfg, ckpt)
    data = load_dataset(cfg.data, cfg.augment, cfg.norm_override)
    report = evaluate(model, data.test_inputs, data.test_labels)
    lines = [
        f"kind = {ckpt.kind}",
        f"accuracy = {report.accuracy:.6f}",
        f"loss = {report.loss:.6f}",
        f"params_total = {report.param_counts['total']}",
    ]
    print("\n".join(lines))
    if getattr(args, "out", None):
        os.makedirs(args.out, exist_ok=True)
        base = os.path.splitext(os.path.basename(args.ckpt))[0]
        with open(os.path.join(args.out, f"eval_{base}.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    return 0


def cmd_count_params(args) -> int:
    cfg = _load_run_config(args)
    model = build_resnet(model_cfg(cfg), SeededRng(cfg.seed))
    counts = count_params(model)
    meta = build_meta_shell(cfg)
    meta_counts = cascade_counts(meta)
    hybrid = build_hybrid_shell(cfg)
    hyb_counts = cascade_counts(hybrid)
    print(f"backbone {cfg.backbone} (width x{cfg.width_multiplier}, {cfg.classes} classes)")
    for key in ("stem", "stage1", "stage2", "stage3", "stage4", "head", "total"):
        print(f"  {key:7s} {counts[key]:>12,}  ({counts[key] / 1e6:.2f}M)")
    print(f"meta model total   {meta_counts['total']:>12,}  ({meta_counts['total'] / 1e6:.2f}M)"
          f"  [velocity hidden width {hidden_width(cfg)}]")
    print(f"hybrid model total {hyb_counts['total']:>12,}  ({hyb_counts['total'] / 1e6:.2f}M)")
    reduction = 1.0 - hyb_counts["total"] / counts["total"]
    print(f"hybrid reduction vs teacher: {reduction * 100:.2f}%")
    return 0


_HANDLERS = {
    "train-teacher": cmd_train_teacher,
    "compress": cmd_compress,
    "assemble-meta": cmd_assemble_meta,
    "finetune-meta": cmd_finetune_meta,
    "incubate": cmd_incubate,
    "finetune-global": cmd_finetune_global,
    "eval": cmd_eval,
    "count-params": cmd_count_params,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit:
        # argparse already printed its message; unknown input is a usage error
        return 1
    if args.command is None or extra:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _HANDLERS[args.command](args)
    except (ConfigError, DataFormatError, FileNotFoundError, PipelineStateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
