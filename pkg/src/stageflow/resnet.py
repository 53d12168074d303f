"""ResNet-18/34/50 (CIFAR-style stems) with per-stage feature taps.

The stem is a single 3x3 stride-1 convolution to 64 channels with no
max-pool, so 32x32 inputs keep their spatial extent into stage 1. A width
multiplier scales every channel count for desk-scale runs; 1.0 reproduces
the standard configurations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Linear, Module, avgpool_global
from .rng import SeededRng
from .tensor import ShapeError, Tensor
from .training import FitHyper, FitResult, evaluate_forward, fit_classifier


@dataclass
class StageConfig:
    block: str  # "basic" | "bottleneck"
    blocks: int
    width: int  # base width before multiplier / expansion
    stride: int

    def __post_init__(self):
        if self.block not in ("basic", "bottleneck"):
            raise ValueError(f"unknown block kind {self.block!r}")
        if self.blocks < 1 or self.stride not in (1, 2):
            raise ValueError(f"invalid stage config {self}")


@dataclass
class ResNetConfig:
    name: str
    stages: tuple
    classes: int = 10
    width_multiplier: float = 1.0
    stem_width: int = 64
    image_size: int = 32
    zero_init_last_bn: bool = False

    def scaled(self, base: int) -> int:
        return max(1, int(round(base * self.width_multiplier)))


def resnet18_config(classes=10, width_multiplier=1.0, **kw) -> ResNetConfig:
    stages = tuple(
        StageConfig("basic", n, w, s)
        for n, w, s in zip((2, 2, 2, 2), (64, 128, 256, 512), (1, 2, 2, 2))
    )
    return ResNetConfig("resnet18", stages, classes, width_multiplier, **kw)


def resnet34_config(classes=10, width_multiplier=1.0, **kw) -> ResNetConfig:
    stages = tuple(
        StageConfig("basic", n, w, s)
        for n, w, s in zip((3, 4, 6, 3), (64, 128, 256, 512), (1, 2, 2, 2))
    )
    return ResNetConfig("resnet34", stages, classes, width_multiplier, **kw)


def resnet50_config(classes=10, width_multiplier=1.0, **kw) -> ResNetConfig:
    stages = tuple(
        StageConfig("bottleneck", n, w, s)
        for n, w, s in zip((3, 4, 6, 3), (64, 128, 256, 512), (1, 2, 2, 2))
    )
    return ResNetConfig("resnet50", stages, classes, width_multiplier, **kw)


BACKBONES = {
    "resnet18": resnet18_config,
    "resnet34": resnet34_config,
    "resnet50": resnet50_config,
}


class BasicBlock(Module):
    expansion = 1

    def __init__(self, in_ch, width, stride, rng, zero_init_last_bn=False):
        super().__init__()
        out_ch = width * self.expansion
        self.conv1 = Conv2d(in_ch, width, 3, stride=stride, padding=1, bias=False, rng=rng)
        self.bn1 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, out_ch, 3, stride=1, padding=1, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(out_ch)
        if zero_init_last_bn:
            self.bn2.gamma.data[...] = 0.0
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = Sequential2(
                Conv2d(in_ch, out_ch, 1, stride=stride, bias=False, rng=rng),
                BatchNorm2d(out_ch),
            )
        self.out_ch = out_ch

    def forward(self, x):
        main = self.bn2.forward(self.conv2.forward(T.relu(self.bn1.forward(self.conv1.forward(x)))))
        short = x if self.downsample is None else self.downsample.forward(x)
        if main.shape != short.shape:
            raise ShapeError(
                f"residual branches disagree: main {main.shape} vs shortcut {short.shape}"
            )
        return T.relu(T.add(main, short))


class Bottleneck(Module):
    expansion = 4

    def __init__(self, in_ch, width, stride, rng, zero_init_last_bn=False):
        super().__init__()
        out_ch = width * self.expansion
        self.conv1 = Conv2d(in_ch, width, 1, bias=False, rng=rng)
        self.bn1 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, width, 3, stride=stride, padding=1, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(width)
        self.conv3 = Conv2d(width, out_ch, 1, bias=False, rng=rng)
        self.bn3 = BatchNorm2d(out_ch)
        if zero_init_last_bn:
            self.bn3.gamma.data[...] = 0.0
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = Sequential2(
                Conv2d(in_ch, out_ch, 1, stride=stride, bias=False, rng=rng),
                BatchNorm2d(out_ch),
            )
        self.out_ch = out_ch

    def forward(self, x):
        h = T.relu(self.bn1.forward(self.conv1.forward(x)))
        h = T.relu(self.bn2.forward(self.conv2.forward(h)))
        main = self.bn3.forward(self.conv3.forward(h))
        short = x if self.downsample is None else self.downsample.forward(x)
        if main.shape != short.shape:
            raise ShapeError(
                f"residual branches disagree: main {main.shape} vs shortcut {short.shape}"
            )
        return T.relu(T.add(main, short))


class Sequential2(Module):
    """Two-layer pipeline (conv + bn shortcut); kept tiny on purpose."""

    def __init__(self, first, second):
        super().__init__()
        self.first = first
        self.second = second

    def forward(self, x):
        return self.second.forward(self.first.forward(x))


class Stage(Module):
    def __init__(self, blocks):
        super().__init__()
        self.blocks = list(blocks)
        self.out_ch = blocks[-1].out_ch

    def forward(self, x):
        for block in self.blocks:
            x = block.forward(x)
        return x


@dataclass
class StageFeatures:
    image: Tensor
    stem: Tensor
    stages: list
    logits: Tensor


class ResNet(Module):
    def __init__(self, cfg: ResNetConfig, rng: SeededRng):
        super().__init__()
        self.cfg = cfg
        stem_ch = cfg.scaled(cfg.stem_width)
        self.stem_conv = Conv2d(3, stem_ch, 3, stride=1, padding=1, bias=False, rng=rng.child("stem"))
        self.stem_bn = BatchNorm2d(stem_ch)
        block_cls = {"basic": BasicBlock, "bottleneck": Bottleneck}
        in_ch = stem_ch
        stages = []
        for si, sc in enumerate(cfg.stages):
            cls = block_cls[sc.block]
            width = cfg.scaled(sc.width)
            blocks = []
            for bi in range(sc.blocks):
                blocks.append(
                    cls(
                        in_ch,
                        width,
                        sc.stride if bi == 0 else 1,
                        rng.child("stage", si, bi),
                        zero_init_last_bn=cfg.zero_init_last_bn,
                    )
                )
                in_ch = blocks[-1].out_ch
            stages.append(Stage(blocks))
        self.stages = stages
        self.head = Linear(in_ch, cfg.classes, rng=rng.child("head"))

    def forward_stem(self, x):
        return T.relu(self.stem_bn.forward(self.stem_conv.forward(x)))

    def forward(self, x):
        h = self.forward_stem(x)
        for stage in self.stages:
            h = stage.forward(h)
        return self.head.forward(avgpool_global(h))

    def forward_with_taps(self, x) -> StageFeatures:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"forward_with_taps: expected [B, 3, H, W], got {x.shape}")
        stem = self.forward_stem(x)
        taps = []
        h = stem
        for stage in self.stages:
            h = stage.forward(h)
            taps.append(h)
        logits = self.head.forward(avgpool_global(h))
        return StageFeatures(image=x, stem=stem, stages=taps, logits=logits)


def build_resnet(cfg: ResNetConfig, rng: SeededRng) -> ResNet:
    return ResNet(cfg, rng)


def count_params(model) -> dict:
    """Per-stage and total parameter counts; stem/head reported separately."""
    counts = {}
    if hasattr(model, "stem_conv"):
        counts["stem"] = model.stem_conv.param_count() + model.stem_bn.param_count()
    for i, stage in enumerate(model.stages):
        counts[f"stage{i + 1}"] = stage.param_count()
    counts["head"] = model.head.param_count()
    counts["total"] = model.param_count()
    return counts


def snapshot_state(module: Module) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in module.named_state().items()}


def eval_model(model, forward, images, labels, batch_size=256):
    """Accuracy under eval mode; the module's mode flags are restored after."""
    modes = [(m, m.training) for m in model.modules()]
    model.eval()
    try:
        acc, loss = evaluate_forward(forward, images, labels, batch_size)
    finally:
        for m, flag in modes:
            m.training = flag
    return acc, loss


def train_teacher(cfg: ResNetConfig, data, hyper: FitHyper, rng: SeededRng):
    """Train a backbone classifier from scratch; returns (model, FitResult)."""
    model = build_resnet(cfg, rng.child("init"))
    model.train()

    def eval_fn():
        return eval_model(model, model.forward, data.test_images, data.test_labels)[0]

    result = fit_classifier(
        model.forward,
        model.named_params(),
        data.train_images,
        data.train_labels,
        hyper,
        rng.child("fit"),
        eval_fn=eval_fn,
        snapshot_fn=lambda: snapshot_state(model),
        augment_fn=data.augment_fn,
        phase="teacher",
    )
    if result.best_state is None:
        result.best_state = snapshot_state(model)
        result.best_accuracy = eval_fn()
        result.final_accuracy = result.best_accuracy
    model.eval()
    return model, result
