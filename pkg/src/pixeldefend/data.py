"""Datasets on the integer pixel grid.

Images are numpy integer arrays of shape (H, W, C) holding levels in
``[0, levels - 1]``; batches stack them as (N, H, W, C).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .autograd import checkpoint
from .errors import ConfigurationError, ConsistencyError, DimensionError, FormatError

SPLITS = ("train", "validation", "test")
SHAPE_NAMES = ("disk", "square", "cross", "triangle", "ring", "diamond", "saltire", "bar")
NOISE_SIGMA = 1.0

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # (N, H, W, C) integer levels
    labels: np.ndarray  # (N,)
    split: str = "train"
    seed: int = 0
    levels: int = 256
    n_classes: int = field(default=0)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim != 4:
            raise DimensionError(f"images must be (N, H, W, C), got {self.images.shape}")
        if self.split not in SPLITS:
            raise ConfigurationError(f"unknown split {self.split!r}")
        if self.n_classes == 0:
            n = int(self.labels.max()) + 1 if len(self.labels) else 0
            object.__setattr__(self, "n_classes", n)
        self.images.flags.writeable = False
        self.labels.flags.writeable = False

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, count: int) -> "LabeledDataset":
        return LabeledDataset(self.images[:count].copy(), self.labels[:count].copy(),
                              self.split, self.seed, self.levels, self.n_classes)


def _shape_mask(kind: int, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    name = SHAPE_NAMES[kind]
    arm = max(r * 0.38, 1.0)
    if name == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if name == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if name == "cross":
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    if name == "triangle":
        # apex up; base at cy + r
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if name == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (r * 0.55) ** 2)
    if name == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if name == "saltire":
        return (np.abs(dy - dx) <= arm * 1.2) & (np.abs(dy + dx) <= 2 * r) | \
               (np.abs(dy + dx) <= arm * 1.2) & (np.abs(dy - dx) <= 2 * r)
    # horizontal bar
    return (np.abs(dy) <= r * 0.35) & (np.abs(dx) <= r)


def generate_shapes(seed: int, count: int, side: int = 16, n_classes: int = 4,
                    split: str = "train") -> LabeledDataset:
    """Procedural grayscale shape images, a pure function of the arguments.

    Labels are an exact round-robin over classes in shuffled order. Each image
    draws a position, radius, background level and a foreground level at
    least 60 levels away, then adds Gaussian noise (sigma 1) rounded to
    integers.
    """
    if side < 8:
        raise ConfigurationError(f"side must be >= 8, got {side}")
    if not 2 <= n_classes <= len(SHAPE_NAMES):
        raise ConfigurationError(f"n_classes must be in 2..{len(SHAPE_NAMES)}, got {n_classes}")
    if count < 0:
        raise ConfigurationError("count must be non-negative")
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = rng.permutation(np.arange(count) % n_classes).astype(np.int64)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    images = np.empty((count, side, side, 1), dtype=np.int64)
    for n in range(count):
        r = rng.uniform(0.28, 0.42) * side
        margin = r * 0.8
        cy = rng.uniform(margin, side - 1 - margin)
        cx = rng.uniform(margin, side - 1 - margin)
        bg = rng.uniform(40, 215)
        contrast = rng.uniform(60, 130) * rng.choice((-1.0, 1.0))
        fg = bg + contrast
        if not 20 <= fg <= 235:
            fg = bg - contrast
        mask = _shape_mask(int(labels[n]), yy, xx, cy, cx, r)
        clean = np.where(mask, fg, bg)
        noise = np.rint(rng.normal(0.0, NOISE_SIGMA, size=(side, side)))
        images[n, :, :, 0] = np.clip(np.rint(clean) + noise, 0, 255)
    return LabeledDataset(images, labels, split=split, seed=seed, levels=256, n_classes=n_classes)


def desk_corpus(seed: int = 0, side: int = 16, n_classes: int = 4, train: int = 4000,
                validation: int = 500, test: int = 1000) -> dict:
    """Train/validation/test splits drawn from independent generator streams."""
    seeds = np.random.SeedSequence(seed).generate_state(3, dtype=np.uint64)
    counts = {"train": train, "validation": validation, "test": test}
    return {split: generate_shapes(int(s), counts[split], side, n_classes, split)
            for split, s in zip(SPLITS, seeds)}


# -- IDX -------------------------------------------------------------------

def _read_idx(path, expected_magic: int) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise FormatError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(blob) - header < count:
        raise FormatError(f"{path}: expected {count} data bytes, found {len(blob) - header}")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> LabeledDataset:
    """Read an IDX image/label file pair (e.g. Fashion-MNIST)."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise ConsistencyError(f"{len(images)} images but {len(labels)} labels")
    return LabeledDataset(images.astype(np.int64)[..., None], labels.astype(np.int64),
                          split=split, levels=256)


def write_idx(images_path, labels_path, dataset: LabeledDataset) -> None:
    imgs = np.asarray(dataset.images[..., 0], dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(">3I", *imgs.shape))
        fh.write(imgs.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_LABELS_MAGIC))
        fh.write(struct.pack(">I", len(dataset.labels)))
        fh.write(np.asarray(dataset.labels, dtype=np.uint8).tobytes())


# -- dataset cache ---------------------------------------------------------

def save_dataset(path: Union[str, os.PathLike], dataset: LabeledDataset) -> None:
    checkpoint.save(path, {"images": dataset.images, "labels": dataset.labels,
                           "levels": np.array(float(dataset.levels))},
                    meta={"kind": "dataset", "split": dataset.split, "seed": int(dataset.seed),
                          "n_classes": int(dataset.n_classes)})


def load_dataset(path: Union[str, os.PathLike]) -> LabeledDataset:
    tensors, meta = checkpoint.load(path)
    try:
        images, labels = tensors["images"], tensors["labels"]
    except KeyError as exc:
        raise FormatError(f"{path}: missing record {exc}") from None
    return LabeledDataset(images.astype(np.int64), labels.astype(np.int64),
                          split=meta.get("split", "train"), seed=int(meta.get("seed", 0)),
                          levels=int(tensors.get("levels", np.array(256.0))),
                          n_classes=int(meta.get("n_classes", 0)))


# -- pixel-space utilities -------------------------------------------------

def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def clip_linf(candidate, anchor, eps: int, levels: int = 256) -> np.ndarray:
    """Project ``candidate`` onto the L-inf ball of radius ``eps`` around ``anchor``,
    then onto the valid level range."""
    candidate, anchor = np.asarray(candidate), np.asarray(anchor)
    if candidate.shape != anchor.shape:
        raise DimensionError(f"shape {candidate.shape} differs from anchor {anchor.shape}")
    out = np.minimum(np.maximum(candidate, anchor - eps), anchor + eps)
    return np.clip(out, 0, levels - 1).astype(np.int64)


def normalize(image, levels: int = 256) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) / (levels - 1)


def denormalize(x, levels: int = 256) -> np.ndarray:
    return np.clip(round_half_away(np.asarray(x) * (levels - 1)), 0, levels - 1).astype(np.int64)
