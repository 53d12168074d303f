"""Dataset ingestion: CIFAR binaries, synthetic fallback, augmentation."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .rng import SeededRng

CIFAR10_RECORD = 3073  # 1 label byte + 3 * 1024 pixel bytes
CIFAR100_RECORD = 3074  # coarse + fine label bytes + pixels

CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILES = ["test_batch.bin"]
CIFAR100_TRAIN_FILES = ["train.bin"]
CIFAR100_TEST_FILES = ["test.bin"]


class DataFormatError(ValueError):
    pass


@dataclass
class DatasetSpec:
    kind: str = "synthetic"  # cifar10 | cifar100 | synthetic
    root: str = ""
    seed: int = 0
    train_size: int = 2000
    test_size: int = 512
    classes: int = 10
    separation: float = 6.0
    noise_std: float = 0.1
    image_size: int = 32


@dataclass
class AugmentConfig:
    enabled: bool = False
    random_crop: bool = True
    pad: int = 4
    flip_prob: float = 0.5
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))
    std: np.ndarray = field(default_factory=lambda: np.ones(3, dtype=np.float32))


def _read_records(path: str, record_size: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % record_size:
        raise DataFormatError(
            f"{path}: truncated or malformed file ({len(raw)} bytes is not a "
            f"multiple of the {record_size}-byte record)"
        )
    return np.frombuffer(raw, dtype=np.uint8).reshape(-1, record_size)


def _decode_cifar(records: np.ndarray, kind: str, path: str):
    if kind == "cifar10":
        labels = records[:, 0].astype(np.int64)
        pixels = records[:, 1:]
        n_classes = 10
    else:
        coarse = records[:, 0]
        if coarse.max(initial=0) >= 20:
            raise DataFormatError(f"{path}: corrupt record (coarse label {coarse.max()} >= 20)")
        labels = records[:, 1].astype(np.int64)
        pixels = records[:, 2:]
        n_classes = 100
    if labels.max(initial=0) >= n_classes:
        raise DataFormatError(
            f"{path}: corrupt record (label {labels.max()} outside [0, {n_classes}))"
        )
    images = pixels.reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return images, labels


def load_cifar_binary(root: str, kind: str, split: str = "train"):
    """Load a CIFAR-10/100 binary split as float32 images in [0, 1].

    CIFAR-10 records are 3,073 bytes (label + channel-major RGB pixels);
    CIFAR-100 records are 3,074 bytes (coarse label, fine label, pixels).
    """
    if kind not in ("cifar10", "cifar100"):
        raise DataFormatError(f"unknown cifar kind {kind!r}")
    if split not in ("train", "test"):
        raise DataFormatError(f"unknown split {split!r}")
    record = CIFAR10_RECORD if kind == "cifar10" else CIFAR100_RECORD
    names = {
        ("cifar10", "train"): CIFAR10_TRAIN_FILES,
        ("cifar10", "test"): CIFAR10_TEST_FILES,
        ("cifar100", "train"): CIFAR100_TRAIN_FILES,
        ("cifar100", "test"): CIFAR100_TEST_FILES,
    }[(kind, split)]
    chunks = []
    for name in names:
        path = os.path.join(root, name)
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing dataset file {path}")
        chunks.append(_read_records(path, record))
    records = np.concatenate(chunks, axis=0)
    return _decode_cifar(records, kind, os.path.join(root, names[0]))


def serialize_cifar_records(images: np.ndarray, labels: np.ndarray, kind: str = "cifar10",
                            coarse_labels: np.ndarray | None = None) -> bytes:
    """Inverse of the loader for [0, 1] images; used for fixtures and tests."""
    pixels = np.rint(images * 255.0).astype(np.uint8).reshape(len(labels), -1)
    if kind == "cifar10":
        rows = np.concatenate([labels.astype(np.uint8)[:, None], pixels], axis=1)
    else:
        if coarse_labels is None:
            coarse_labels = np.zeros(len(labels), dtype=np.uint8)
        rows = np.concatenate(
            [coarse_labels.astype(np.uint8)[:, None], labels.astype(np.uint8)[:, None], pixels],
            axis=1,
        )
    return rows.tobytes()


def synthetic_dataset(seed: int, n: int, classes: int, image_size: int = 32,
                      separation: float = 3.0, noise_std: float = 0.1):
    """Class-conditional Gaussian images around fixed smooth per-class means.

    Each class mean is a unit-norm colored spatial bump; means are placed so
    pairwise distances are ~`separation` noise standard deviations, which
    controls Bayes-optimal separability independent of image size.
    """
    if n < classes:
        raise ValueError(f"need at least one sample per class (n={n}, classes={classes})")
    rng = SeededRng(seed).child("synthetic")
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float32)
    radius = image_size / 4.0
    width = image_size / 6.0
    means = np.empty((classes, 3, image_size, image_size), dtype=np.float32)
    color_rng = rng.child("colors")
    for k in range(classes):
        angle = 2.0 * np.pi * k / classes
        cy = image_size / 2.0 + radius * np.sin(angle)
        cx = image_size / 2.0 + radius * np.cos(angle)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width**2))
        color = color_rng.normal((3,))
        color /= np.linalg.norm(color) + 1e-8
        pattern = color[:, None, None] * bump[None]
        pattern /= np.linalg.norm(pattern) + 1e-8
        means[k] = pattern
    amplitude = np.float32(separation * noise_std / np.sqrt(2.0))

    labels = np.arange(n, dtype=np.int64) % classes
    labels = labels[rng.child("labels").permutation(n)]
    noise = rng.child("noise").normal((n, 3, image_size, image_size), scale=noise_std)
    images = 0.5 + amplitude * means[labels] + noise
    np.clip(images, 0.0, 1.0, out=images)
    return images.astype(np.float32), labels


def channel_stats(images: np.ndarray):
    mean = images.mean(axis=(0, 2, 3)).astype(np.float32)
    std = images.std(axis=(0, 2, 3)).astype(np.float32)
    std[std < 1e-6] = 1.0
    return mean, std


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return ((images - mean.reshape(1, 3, 1, 1)) / std.reshape(1, 3, 1, 1)).astype(np.float32)


def augment_batch(images: np.ndarray, cfg: AugmentConfig, rng: SeededRng) -> np.ndarray:
    """Pad+crop and horizontal flip in [0, 1] space, then normalize."""
    out = images
    n, _, h, w = images.shape
    if cfg.enabled and cfg.random_crop and cfg.pad > 0:
        p = cfg.pad
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        offs = rng.integers(0, 2 * p + 1, (n, 2))
        out = np.empty_like(images)
        for i in range(n):
            oy, ox = offs[i]
            out[i] = padded[i, :, oy : oy + h, ox : ox + w]
    if cfg.enabled and cfg.flip_prob > 0:
        flips = rng.random((n,)) < cfg.flip_prob
        out = out.copy() if out is images else out
        out[flips] = out[flips, :, :, ::-1]
    return normalize(out, cfg.mean, cfg.std)


@dataclass
class SplitData:
    """Raw splits plus normalization; training inputs depend on augmentation.

    `train_inputs`/`test_inputs` are normalized arrays for phases that do
    not augment; when augmentation is on, training code feeds raw images
    through `augment_fn` per batch instead.
    """

    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    classes: int
    augment: AugmentConfig

    def __post_init__(self):
        self.train_inputs = normalize(self.train_images, self.augment.mean, self.augment.std)
        self.test_inputs = normalize(self.test_images, self.augment.mean, self.augment.std)

    @property
    def augment_fn(self):
        if not self.augment.enabled:
            return None
        cfg = self.augment
        return lambda batch, rng: augment_batch(batch, cfg, rng)

    @property
    def fit_train_inputs(self):
        """What to hand the training loop: raw if augmenting, else normalized."""
        return self.train_images if self.augment.enabled else self.train_inputs


def load_dataset(spec: DatasetSpec, augment: AugmentConfig | None = None,
                 norm_override=None) -> SplitData:
    """Materialize a DatasetSpec into train/test splits with normalization."""
    if spec.kind == "synthetic":
        total = spec.train_size + spec.test_size
        images, labels = synthetic_dataset(
            spec.seed, total, spec.classes, spec.image_size, spec.separation, spec.noise_std
        )
        tr_img, tr_lab = images[: spec.train_size], labels[: spec.train_size]
        te_img, te_lab = images[spec.train_size :], labels[spec.train_size :]
    elif spec.kind in ("cifar10", "cifar100"):
        tr_img, tr_lab = load_cifar_binary(spec.root, spec.kind, "train")
        te_img, te_lab = load_cifar_binary(spec.root, spec.kind, "test")
        if spec.train_size > len(tr_lab) or spec.test_size > len(te_lab):
            raise DataFormatError(
                f"subset sizes ({spec.train_size}/{spec.test_size}) exceed available "
                f"records ({len(tr_lab)}/{len(te_lab)})"
            )
        rng = SeededRng(spec.seed).child("subset")
        tr_sel = rng.child("train").permutation(len(tr_lab))[: spec.train_size]
        te_sel = rng.child("test").permutation(len(te_lab))[: spec.test_size]
        tr_img, tr_lab = tr_img[tr_sel], tr_lab[tr_sel]
        te_img, te_lab = te_img[te_sel], te_lab[te_sel]
    else:
        raise DataFormatError(f"unknown dataset kind {spec.kind!r}")

    aug = augment if augment is not None else AugmentConfig()
    if norm_override is not None:
        aug.mean, aug.std = norm_override
    else:
        aug.mean, aug.std = channel_stats(tr_img)
    classes = spec.classes if spec.kind != "cifar100" else 100
    if spec.kind == "cifar10":
        classes = 10
    return SplitData(tr_img, tr_lab, te_img, te_lab, classes, aug)
