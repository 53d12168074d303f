"""Compression-expansion lifecycle: meta assembly, incubation, hybrid model.

Phases communicate exclusively through checkpoints plus the manifest, so
each phase can run as its own process. Every fine-tuning phase freezes by
parameter-name prefix; frozen tensors are snapshotted and byte-compared
afterwards, and the violations list is part of each phase's result.

When augmentation is off, activations entering the first trainable stage
are constant across epochs (frozen prefix in eval mode), so phases cache
them once per run; this changes nothing numerically, only wall time.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import SplitData, load_dataset
from .meanflow import (
    MeanFlowModule,
    map_stage,
    train_stage_meanflow,
)
from .nn import BatchNorm2d, Conv2d, Linear, Module, avgpool_global
from .resnet import (
    BACKBONES,
    ResNet,
    ResNetConfig,
    Stage,
    build_resnet,
    count_params,
    eval_model,
    snapshot_state,
    train_teacher,
)
from .rng import SeededRng
from .tensor import ShapeError, Tensor
from .training import FitHyper, FitResult, evaluate_forward, fit_classifier, iterate_batches

# Hidden widths calibrated once per backbone so the full-width meta model
# lands on its published parameter budget (~5.1M for both backbones).
DEFAULT_HIDDEN = {"resnet18": 710, "resnet34": 710, "resnet50": 176}

STAGE_COUNT = 4


def model_cfg(cfg: RunConfig) -> ResNetConfig:
    return BACKBONES[cfg.backbone](
        classes=cfg.classes, width_multiplier=cfg.width_multiplier
    )


def hidden_width(cfg: RunConfig) -> int:
    if cfg.velocity_hidden > 0:
        return cfg.velocity_hidden
    base = DEFAULT_HIDDEN[cfg.backbone]
    return max(8, int(round(base * cfg.width_multiplier)))


def stage_dims(rcfg: ResNetConfig) -> list[tuple]:
    """(C, H, W) entering/leaving each stage: index 0 is the stem output."""
    size = rcfg.image_size
    dims = [(rcfg.scaled(rcfg.stem_width), size, size)]
    for sc in rcfg.stages:
        size //= sc.stride
        expansion = 1 if sc.block == "basic" else 4
        dims.append((rcfg.scaled(sc.width) * expansion, size, size))
    return dims


def build_flow_module(cfg: RunConfig, stage_index: int, rng: SeededRng) -> MeanFlowModule:
    dims = stage_dims(model_cfg(cfg))
    return MeanFlowModule(
        stage_index,
        dims[stage_index - 1],
        dims[stage_index],
        hidden=hidden_width(cfg),
        embed=cfg.velocity_embed,
        rng=rng,
        jvp_mode=cfg.jvp_mode,
    )


class CascadeModel(Module):
    """Stem + four stage operators (flow modules or residual stages) + head."""

    def __init__(self, stem_conv: Conv2d, stem_bn: BatchNorm2d, stage_ops, head: Linear):
        super().__init__()
        if len(stage_ops) != STAGE_COUNT:
            raise ShapeError(f"cascade needs {STAGE_COUNT} stage operators")
        self.stem_conv = stem_conv
        self.stem_bn = stem_bn
        self.stage_ops = list(stage_ops)
        self.head = head

    def forward_stem(self, x):
        return T.relu(self.stem_bn.forward(self.stem_conv.forward(x)))

    def forward_stage(self, index: int, h):
        op = self.stage_ops[index]
        if isinstance(op, MeanFlowModule):
            return map_stage(op, h)
        return op.forward(h)

    def forward_from(self, h, first_stage: int):
        """Run stages `first_stage`..4 (1-based) and the head."""
        for i in range(first_stage - 1, STAGE_COUNT):
            h = self.forward_stage(i, h)
        return self.head.forward(avgpool_global(h))

    def forward(self, x):
        return self.forward_from(self.forward_stem(x), 1)

    def is_hybrid(self) -> bool:
        return any(isinstance(op, Stage) for op in self.stage_ops)


@dataclass
class FreezeMask:
    """Prefixes of trainable parameter names; everything else freezes."""

    trainable_prefixes: tuple

    def is_trainable(self, name: str) -> bool:
        return any(name.startswith(p) for p in self.trainable_prefixes)

    def apply(self, model: Module) -> dict:
        trainable = {}
        for name, p in model.named_params().items():
            if self.is_trainable(name):
                p.requires_grad = True
                trainable[name] = p
            else:
                p.requires_grad = False
        return trainable


class FreezeCheck:
    """Byte-level snapshot of everything a phase is forbidden to touch.

    Covers frozen parameters and the buffers (BN running stats) of fully
    frozen subtrees; buffers under a trainable prefix update legitimately.
    """

    def __init__(self, model: Module, mask: FreezeMask):
        self.mask = mask
        self.snapshot = {
            name: t.data.tobytes()
            for name, t in model.named_state().items()
            if not mask.is_trainable(name)
        }

    def violations(self, model: Module) -> list[str]:
        out = []
        state = model.named_state()
        for name, frozen_bytes in self.snapshot.items():
            if state[name].data.tobytes() != frozen_bytes:
                out.append(name)
        return out


@dataclass
class PhaseResult:
    fit: FitResult
    freeze_violations: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# tap extraction and prefix caching


def teacher_stage_taps(teacher: ResNet, inputs: np.ndarray, stage_index: int,
                       batch_size: int = 128):
    """(X_in, X_out) activation pair arrays for one stage of a frozen teacher."""
    teacher.eval()
    srcs, dsts = [], []
    for batch_idx in iterate_batches(inputs.shape[0], batch_size):
        feats = teacher.forward_with_taps(Tensor(inputs[batch_idx]))
        src = feats.stem if stage_index == 1 else feats.stages[stage_index - 2]
        dst = feats.stages[stage_index - 1]
        srcs.append(src.data.copy())
        dsts.append(dst.data.copy())
    return np.concatenate(srcs), np.concatenate(dsts)


def prefix_outputs(model: CascadeModel, inputs: np.ndarray, last_stage: int,
                   batch_size: int = 128) -> np.ndarray:
    """Activations after the stem and stages 1..last_stage, in eval mode."""
    modes = [(m, m.training) for m in model.modules()]
    model.eval()
    try:
        outs = []
        for batch_idx in iterate_batches(inputs.shape[0], batch_size):
            h = model.forward_stem(Tensor(inputs[batch_idx]))
            for i in range(last_stage):
                h = model.forward_stage(i, h)
            outs.append(h.data.copy())
    finally:
        for m, flag in modes:
            m.training = flag
    return np.concatenate(outs)


# ---------------------------------------------------------------------------
# assembly


def assemble_meta(teacher: ResNet, modules: list, head: Linear | None = None) -> CascadeModel:
    """Cascade the four stage mappers behind the teacher's stem and head.

    The stem and head weights are copied (the meta model owns its tensors);
    the stage dimension chain is validated end to end.
    """
    if len(modules) != STAGE_COUNT:
        raise ShapeError(f"assemble_meta: need {STAGE_COUNT} modules, got {len(modules)}")
    for a, b in zip(modules[:-1], modules[1:]):
        if a.out_dims != b.in_dims:
            raise ShapeError(
                f"assemble_meta: stage {a.stage_index} outputs {a.out_dims} but "
                f"stage {b.stage_index} expects {b.in_dims}"
            )
    if not modules[3].two_step:
        raise ShapeError("assemble_meta: stage-4 module must be two-step")

    stem_ch = teacher.stem_conv.out_ch
    if modules[0].in_dims[0] != stem_ch:
        raise ShapeError(
            f"assemble_meta: module 1 expects {modules[0].in_dims[0]} channels, "
            f"stem provides {stem_ch}"
        )
    stem_conv = Conv2d(3, stem_ch, 3, stride=1, padding=1, bias=False)
    stem_conv.weight.data[...] = teacher.stem_conv.weight.data
    stem_bn = BatchNorm2d(stem_ch)
    for attr in ("gamma", "beta", "running_mean", "running_var"):
        getattr(stem_bn, attr).data[...] = getattr(teacher.stem_bn, attr).data

    if head is None:
        head = Linear(teacher.head.in_dim, teacher.head.out_dim)
        head.weight.data[...] = teacher.head.weight.data
        head.bias.data[...] = teacher.head.bias.data
    if head.in_dim != modules[3].out_dims[0]:
        raise ShapeError(
            f"assemble_meta: head expects {head.in_dim} features, stage 4 outputs "
            f"{modules[3].out_dims[0]}"
        )
    meta = CascadeModel(stem_conv, stem_bn, [*modules], head)
    meta.eval()
    return meta


def build_stage_blocks(rcfg: ResNetConfig, stage_index: int, rng: SeededRng) -> Stage:
    """Residual block stack for one stage, structurally equal to the teacher's."""
    template = build_resnet(rcfg, rng)
    return template.stages[stage_index - 1]


def load_stage_from_teacher(rcfg: ResNetConfig, stage_index: int,
                            teacher_state: dict) -> Stage:
    stage = build_stage_blocks(rcfg, stage_index, SeededRng(0))
    prefix = f"stages.{stage_index - 1}."
    arrays = {
        name[len(prefix):]: arr for name, arr in teacher_state.items() if name.startswith(prefix)
    }
    stage.load_state(arrays)
    return stage


def assemble_hybrid(meta: CascadeModel, stages: dict) -> CascadeModel:
    """Meta model with stages 1-3 swapped for incubated residual stages."""
    ops = list(meta.stage_ops)
    for l, stage in stages.items():
        if not 1 <= l <= 3:
            raise ValueError(f"only stages 1-3 are incubated, got {l}")
        ops[l - 1] = stage
    hybrid = CascadeModel(meta.stem_conv, meta.stem_bn, ops, meta.head)
    hybrid.eval()
    return hybrid


# ---------------------------------------------------------------------------
# phases


def phase_hyper(cfg: RunConfig, phase: FitHyper) -> FitHyper:
    return FitHyper(
        epochs=phase.epochs,
        lr=phase.lr,
        batch_size=cfg.batch_size,
        weight_decay=cfg.weight_decay,
        label_smoothing=cfg.label_smoothing,
    )


def phase_train_teacher(cfg: RunConfig, data: SplitData, rng: SeededRng):
    return train_teacher(model_cfg(cfg), data, phase_hyper(cfg, cfg.teacher), rng)


def phase_compress_stage(cfg: RunConfig, teacher: ResNet, data: SplitData,
                         stage_index: int, rng: SeededRng, on_epoch=None):
    """Train one stage mapper on frozen-teacher activation pairs.

    Taps are produced from the un-augmented normalized training split: flow
    matching needs fixed endpoints per sample, and the frozen teacher
    guarantees them.
    """
    src, dst = teacher_stage_taps(teacher, data.train_inputs, stage_index, cfg.batch_size)
    module = build_flow_module(cfg, stage_index, rng.child("init", stage_index))
    before = snapshot_state(teacher)
    result = train_stage_meanflow(
        src,
        dst,
        module,
        phase_hyper(cfg, cfg.meanflow),
        rng.child("fit", stage_index),
        on_epoch=on_epoch,
    )
    violated = [
        name for name, arr in snapshot_state(teacher).items()
        if arr.tobytes() != before[name].tobytes()
    ]
    return module, result, violated


META_TRAINABLE = tuple(
    [f"stage_ops.{i}.nets." for i in range(STAGE_COUNT)] + ["head."]
)


def phase_finetune_meta(cfg: RunConfig, meta: CascadeModel, data: SplitData,
                        rng: SeededRng, on_epoch=None) -> PhaseResult:
    """Classification fine-tune of the cascade.

    Trainable: velocity nets and head. Frozen: stem and every alignment
    layer (only the velocity-field networks are optimized; alignment stays
    as trained during compression).
    """
    mask = FreezeMask(META_TRAINABLE)
    trainable = mask.apply(meta)
    check = FreezeCheck(meta, mask)
    meta.eval()  # frozen BN everywhere; velocity nets have no mode-sensitive ops

    if data.augment.enabled:
        forward = meta.forward
        inputs = data.fit_train_inputs
        augment_fn = data.augment_fn
        eval_fn = lambda: eval_model(meta, meta.forward, data.test_inputs, data.test_labels)[0]
    else:
        train_acts = prefix_outputs(meta, data.train_inputs, 0, cfg.batch_size)
        test_acts = prefix_outputs(meta, data.test_inputs, 0, cfg.batch_size)
        forward = lambda h: meta.forward_from(h, 1)
        inputs = train_acts
        augment_fn = None
        eval_fn = lambda: eval_model(meta, forward, test_acts, data.test_labels)[0]

    fit = fit_classifier(
        forward,
        trainable,
        inputs,
        data.train_labels,
        phase_hyper(cfg, cfg.meta),
        rng,
        eval_fn=eval_fn,
        snapshot_fn=lambda: snapshot_state(meta),
        augment_fn=augment_fn,
        on_epoch=on_epoch,
        phase="meta",
    )
    return PhaseResult(fit=fit, freeze_violations=check.violations(meta))


def phase_incubate(cfg: RunConfig, meta_state: dict, teacher_state: dict,
                   stage_index: int, data: SplitData, rng: SeededRng,
                   on_epoch=None):
    """Swap stage `stage_index` for the teacher's blocks and train only them.

    The meta model is rebuilt from its checkpoint state, so incubations are
    independent: nothing from one stage's run can leak into another's.
    Returns (trained stage state, PhaseResult).
    """
    if not 1 <= stage_index <= 3:
        raise ValueError(f"stage 4 is never incubated (got stage {stage_index})")
    meta = build_meta_from_state(cfg, meta_state)
    rcfg = model_cfg(cfg)
    stage = load_stage_from_teacher(rcfg, stage_index, teacher_state)
    hybrid = assemble_hybrid(meta, {stage_index: stage})

    prefix = f"stage_ops.{stage_index - 1}."
    mask = FreezeMask((prefix,))
    trainable = mask.apply(hybrid)
    check = FreezeCheck(hybrid, mask)
    hybrid.eval()
    stage.train()  # only the incubated stage runs with batch statistics

    if data.augment.enabled:
        forward = hybrid.forward
        inputs = data.fit_train_inputs
        augment_fn = data.augment_fn
        eval_fn = lambda: eval_model(hybrid, hybrid.forward, data.test_inputs, data.test_labels)[0]
    else:
        train_acts = prefix_outputs(hybrid, data.train_inputs, stage_index - 1, cfg.batch_size)
        test_acts = prefix_outputs(hybrid, data.test_inputs, stage_index - 1, cfg.batch_size)
        forward = lambda h: hybrid.forward_from(h, stage_index)
        inputs = train_acts
        augment_fn = None
        eval_fn = lambda: eval_model(hybrid, forward, test_acts, data.test_labels)[0]

    fit = fit_classifier(
        forward,
        trainable,
        inputs,
        data.train_labels,
        phase_hyper(cfg, cfg.incubate),
        rng,
        eval_fn=eval_fn,
        augment_fn=augment_fn,
        on_epoch=on_epoch,
        phase=f"incubate{stage_index}",
    )
    return snapshot_state(stage), PhaseResult(fit=fit, freeze_violations=check.violations(hybrid))


def phase_finetune_global(cfg: RunConfig, hybrid: CascadeModel, data: SplitData,
                          rng: SeededRng, on_epoch=None) -> PhaseResult:
    """End-to-end fine-tune of the hybrid; every parameter updates."""
    mask = FreezeMask(("",))
    trainable = mask.apply(hybrid)
    hybrid.train()
    fit = fit_classifier(
        hybrid.forward,
        trainable,
        data.fit_train_inputs,
        data.train_labels,
        phase_hyper(cfg, cfg.global_ft),
        rng,
        eval_fn=lambda: eval_model(hybrid, hybrid.forward, data.test_inputs, data.test_labels)[0],
        snapshot_fn=lambda: snapshot_state(hybrid),
        augment_fn=data.augment_fn,
        on_epoch=on_epoch,
        phase="global",
    )
    hybrid.eval()
    return PhaseResult(fit=fit)


@dataclass
class EvalReport:
    accuracy: float
    loss: float
    param_counts: dict


def evaluate(model: Module, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 256) -> EvalReport:
    modes = [(m, m.training) for m in model.modules()]
    model.eval()
    try:
        acc, loss = evaluate_forward(model.forward, images, labels, batch_size)
    finally:
        for m, flag in modes:
            m.training = flag
    counts = count_params(model) if hasattr(model, "stages") else cascade_counts(model)
    return EvalReport(accuracy=acc, loss=loss, param_counts=counts)


def cascade_counts(model: CascadeModel) -> dict:
    counts = {"stem": model.stem_conv.param_count() + model.stem_bn.param_count()}
    for i, op in enumerate(model.stage_ops):
        counts[f"stage{i + 1}"] = op.param_count()
    counts["head"] = model.head.param_count()
    counts["total"] = model.param_count()
    return counts


# ---------------------------------------------------------------------------
# checkpoint construction / reconstruction


def _cfg_hyper(cfg: RunConfig) -> dict:
    return {
        "backbone": cfg.backbone,
        "width_multiplier": cfg.width_multiplier,
        "classes": cfg.classes,
        "hidden": hidden_width(cfg),
        "embed": cfg.velocity_embed,
        "jvp_mode": cfg.jvp_mode,
    }


def teacher_checkpoint(cfg: RunConfig, state: dict, log: dict) -> Checkpoint:
    return Checkpoint("teacher", state, _cfg_hyper(cfg), log)


def module_checkpoint(cfg: RunConfig, module: MeanFlowModule, log: dict) -> Checkpoint:
    hyper = _cfg_hyper(cfg)
    hyper["stage"] = module.stage_index
    return Checkpoint("flow-module", snapshot_state(module), hyper, log)


def meta_checkpoint(cfg: RunConfig, state: dict, log: dict) -> Checkpoint:
    return Checkpoint("meta", state, _cfg_hyper(cfg), log)


def stage_checkpoint(cfg: RunConfig, stage_index: int, state: dict, log: dict) -> Checkpoint:
    hyper = _cfg_hyper(cfg)
    hyper["stage"] = stage_index
    return Checkpoint("stage-weights", state, hyper, log)


def hybrid_checkpoint(cfg: RunConfig, state: dict, log: dict) -> Checkpoint:
    return Checkpoint("hybrid", state, _cfg_hyper(cfg), log)


def _check_cfg_match(cfg: RunConfig, hyper: dict, what: str):
    for key in ("backbone", "width_multiplier", "classes"):
        if key in hyper and hyper[key] != getattr(cfg, key):
            raise ValueError(
                f"{what}: checkpoint was built with {key}={hyper[key]!r}, "
                f"config says {getattr(cfg, key)!r}"
            )


def build_teacher_from_state(cfg: RunConfig, state: dict) -> ResNet:
    model = build_resnet(model_cfg(cfg), SeededRng(0))
    model.load_state(state)
    model.eval()
    return model


def build_meta_shell(cfg: RunConfig, rng: SeededRng | None = None) -> CascadeModel:
    """Meta model with freshly initialized modules (pre-state-load shell)."""
    rng = rng or SeededRng(0)
    rcfg = model_cfg(cfg)
    teacher = build_resnet(rcfg, rng.child("shell"))
    modules = [build_flow_module(cfg, l, rng.child("module", l)) for l in range(1, 5)]
    return assemble_meta(teacher, modules)


def build_meta_from_state(cfg: RunConfig, state: dict) -> CascadeModel:
    meta = build_meta_shell(cfg)
    meta.load_state(state)
    meta.eval()
    return meta


def build_hybrid_shell(cfg: RunConfig) -> CascadeModel:
    meta = build_meta_shell(cfg)
    rcfg = model_cfg(cfg)
    stages = {l: build_stage_blocks(rcfg, l, SeededRng(0)) for l in (1, 2, 3)}
    return assemble_hybrid(meta, stages)


def build_hybrid_from_state(cfg: RunConfig, state: dict) -> CascadeModel:
    hybrid = build_hybrid_shell(cfg)
    hybrid.load_state(state)
    hybrid.eval()
    return hybrid


def model_from_checkpoint(cfg: RunConfig, ckpt: Checkpoint) -> Module:
    _check_cfg_match(cfg, ckpt.hyper, ckpt.kind)
    if ckpt.kind == "teacher":
        return build_teacher_from_state(cfg, ckpt.tensors)
    if ckpt.kind == "meta":
        return build_meta_from_state(cfg, ckpt.tensors)
    if ckpt.kind == "hybrid":
        return build_hybrid_from_state(cfg, ckpt.tensors)
    if ckpt.kind == "flow-module":
        module = build_flow_module(cfg, ckpt.hyper["stage"], SeededRng(0))
        module.load_state(ckpt.tensors)
        module.eval()
        return module
    raise ValueError(f"cannot rebuild a model from kind {ckpt.kind!r}")
