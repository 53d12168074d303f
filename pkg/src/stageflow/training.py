"""Shared classification training loop used by every fine-tuning phase."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import AdamW, cosine_lr, cross_entropy_label_smoothed
from .tensor import GradTape, NumericalError, Tensor, backward


@dataclass
class FitHyper:
    epochs: int
    lr: float
    batch_size: int = 128
    weight_decay: float = 0.01
    label_smoothing: float = 0.1


@dataclass
class EpochStats:
    epoch: int
    wall_time_s: float
    loss: float
    accuracy: float
    lr: float


@dataclass
class FitResult:
    history: list[EpochStats] = field(default_factory=list)
    final_accuracy: float = float("nan")
    best_accuracy: float = float("nan")
    best_state: dict | None = None


def iterate_batches(n: int, batch_size: int, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start : start + batch_size]


def fit_classifier(
    forward,
    params,
    inputs: np.ndarray,
    labels: np.ndarray,
    hyper: FitHyper,
    rng,
    eval_fn=None,
    snapshot_fn=None,
    augment_fn=None,
    on_epoch=None,
    phase: str = "train",
) -> FitResult:
    """Cross-entropy training with AdamW and a cosine schedule.

    `forward` maps a float32 input batch Tensor to logits; `params` is the
    trainable subset (frozen parameters simply are not passed). Shuffling and
    augmentation draw from per-epoch child streams of `rng`, so results do
    not depend on prefetch depth or on what ran before this phase.
    """
    n = inputs.shape[0]
    opt = AdamW(params, lr=hyper.lr, weight_decay=hyper.weight_decay)
    result = FitResult()
    t0 = time.perf_counter()

    for epoch in range(hyper.epochs):
        lr = cosine_lr(hyper.lr, epoch, hyper.epochs)
        opt.lr = lr
        order = rng.child("shuffle", epoch).permutation(n)
        aug_rng = rng.child("augment", epoch) if augment_fn is not None else None
        loss_sum = 0.0
        seen = 0
        correct = 0
        for batch_idx in iterate_batches(n, hyper.batch_size, order):
            xb = inputs[batch_idx]
            yb = labels[batch_idx]
            if augment_fn is not None:
                xb = augment_fn(xb, aug_rng)
            tape = GradTape()
            with tape:
                tape.watch_params(params)
                logits = forward(Tensor(xb))
                loss = cross_entropy_label_smoothed(logits, yb, hyper.label_smoothing)
            lval = loss.item()
            if not np.isfinite(lval):
                raise NumericalError(
                    f"{phase}: training diverged at epoch {epoch} (loss={lval})"
                )
            grads = backward(loss, tape)
            opt.step(grads)
            loss_sum += lval * len(batch_idx)
            seen += len(batch_idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())

        acc = eval_fn() if eval_fn is not None else correct / seen
        stats = EpochStats(
            epoch=epoch,
            wall_time_s=time.perf_counter() - t0,
            loss=loss_sum / seen,
            accuracy=acc,
            lr=lr,
        )
        result.history.append(stats)
        result.final_accuracy = acc
        if snapshot_fn is not None and (
            result.best_state is None or acc >= result.best_accuracy
        ):
            result.best_accuracy = acc
            result.best_state = snapshot_fn()
        elif snapshot_fn is None:
            result.best_accuracy = max(
                acc, result.best_accuracy if np.isfinite(result.best_accuracy) else acc
            )
        if on_epoch is not None:
            on_epoch(stats)
    return result


def evaluate_forward(forward, inputs: np.ndarray, labels: np.ndarray, batch_size: int = 256,
                     label_smoothing: float = 0.0):
    """Deterministic accuracy/loss of `forward` over a split; no recording."""
    if inputs.shape[0] == 0:
        raise ValueError("evaluate: empty split")
    correct = 0
    loss_sum = 0.0
    for batch_idx in iterate_batches(inputs.shape[0], batch_size):
        xb = inputs[batch_idx]
        yb = labels[batch_idx]
        logits = forward(Tensor(xb))
        loss = cross_entropy_label_smoothed(logits, yb, label_smoothing)
        loss_sum += loss.item() * len(batch_idx)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    n = inputs.shape[0]
    return correct / n, loss_sum / n
