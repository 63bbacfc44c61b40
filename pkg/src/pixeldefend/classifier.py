"""Desk-scale convolutional classifier and the training-side defenses."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .autograd import ComputationTape, Tensor, backward, checkpoint, ops
from .data import LabeledDataset, normalize, round_half_away
from .errors import ConfigurationError, FormatError, TrainingError
from .nn import Adam, as_leaves, batches, he_normal

logger = logging.getLogger(__name__)

SLOPE = 0.1
DEFENSES = ("normal", "label_smoothing", "adv_fgsm", "adv_bim")


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 8
    learning_rate: float = 2e-3
    seed: int = 0
    batch_size: int = 32
    widths: Sequence[int] = (16, 32, 64)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))


class Classifier:
    """Three conv blocks (3x3 conv, leaky relu, 2x2 max pool) and a linear head."""

    def __init__(self, image_shape: tuple, n_classes: int, levels: int = 256,
                 config: ClassifierConfig = ClassifierConfig(), params: Optional[dict] = None,
                 defense: str = "normal", defense_params: Optional[dict] = None):
        self.image_shape = tuple(int(s) for s in image_shape)
        self.n_classes = int(n_classes)
        self.levels = int(levels)
        self.config = config
        self.defense = defense
        self.defense_params = dict(defense_params or {})
        h, w, _ = self.image_shape
        pool = 2 ** len(config.widths)
        if h % pool or w % pool:
            raise ConfigurationError(f"image side must be divisible by {pool}")
        self.params = params if params is not None else self._init_params()

    def _init_params(self) -> dict:
        rng = np.random.Generator(np.random.PCG64(self.config.seed))
        p, cin = {}, self.image_shape[2]
        for n, cout in enumerate(self.config.widths):
            p[f"conv{n}.w"] = he_normal(rng, (3, 3, cin, cout), 9 * cin)
            p[f"conv{n}.b"] = np.zeros(cout)
            cin = cout
        h, w, _ = self.image_shape
        pool = 2 ** len(self.config.widths)
        flat = (h // pool) * (w // pool) * cin
        p["fc.w"] = he_normal(rng, (flat, self.n_classes), flat, gain=1.0)
        p["fc.b"] = np.zeros(self.n_classes)
        return p

    def forward(self, x: Tensor, params: Optional[dict] = None) -> Tensor:
        """Normalised (N, H, W, C) input -> (N, n_classes) logits."""
        p = params if params is not None else {k: Tensor(v, check=False) for k, v in self.params.items()}
        h = x
        for n in range(len(self.config.widths)):
            h = ops.conv2d(h, p[f"conv{n}.w"]) + p[f"conv{n}.b"]
            h = ops.max_pool2d(ops.leaky_relu(h, SLOPE))
        h = ops.reshape(h, (h.shape[0], -1))
        return ops.matmul(h, p["fc.w"]) + p["fc.b"]

    def logits(self, images: np.ndarray, chunk: int = 256) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        out = [self.forward(Tensor(normalize(images[s:s + chunk], self.levels), check=False)).data
               for s in range(0, len(images), chunk)]
        return np.concatenate(out) if out else np.zeros((0, self.n_classes))

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.logits(images).argmax(axis=1)

    def accuracy(self, images: np.ndarray, labels: np.ndarray) -> float:
        return float((self.predict(images) == np.asarray(labels)).mean())

    # -- gradients w.r.t. the input ---------------------------------------

    def loss_gradient(self, x_norm: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """d(sum of per-example cross-entropy)/d(input) in normalised space."""
        x = Tensor(x_norm, check=False)
        with ComputationTape() as tape:
            loss = ops.cross_entropy(self.forward(x), np.asarray(labels, dtype=np.int64), reduction="sum")
        return backward(tape, loss, wrt=[x])[x].data

    def logit_gradients(self, x_norm: np.ndarray) -> tuple:
        """Logits (N, K) and their input gradients (N, K, H, W, C)."""
        x = Tensor(x_norm, check=False)
        with ComputationTape() as tape:
            z = self.forward(x)
            picks = [ops.sum(ops.multiply(z, np.eye(self.n_classes)[k])) for k in range(self.n_classes)]
        grads = np.stack([backward(tape, pk, wrt=[x])[x].data for pk in picks], axis=1)
        return z.data, grads

    def margin_gradient(self, x_norm: np.ndarray, labels: np.ndarray, kappa: float) -> tuple:
        """Per-example max(Z_y - max_{i != y} Z_i, -kappa) and its input gradient."""
        x = Tensor(x_norm, check=False)
        labels = np.asarray(labels, dtype=np.int64)
        with ComputationTape() as tape:
            z = self.forward(x)
            onehot = np.eye(self.n_classes)[labels]
            other = np.where(onehot > 0, -np.inf, z.data).argmax(axis=1)
            sel = onehot - np.eye(self.n_classes)[other]
            margin = ops.sum(ops.multiply(z, sel), axis=1)
            active = (margin.data > -kappa).astype(np.float64)
            loss = ops.sum(ops.multiply(margin, active))
        g = backward(tape, loss, wrt=[x])[x].data
        return np.maximum(margin.data, -kappa), g


# -- label smoothing -------------------------------------------------------

def smooth_labels(label, n_classes: int, eps: float = 0.1) -> np.ndarray:
    """Soft target(s): 1 - eps on the true class, eps / (n_classes - 1) elsewhere."""
    if not 0 <= eps < 1:
        raise ConfigurationError(f"label smoothing eps must be in [0, 1), got {eps}")
    label = np.asarray(label, dtype=np.int64)
    out = np.full(label.shape + (n_classes,), eps / (n_classes - 1))
    np.put_along_axis(out, label[..., None], 1.0 - eps, axis=-1)
    return out


# -- training --------------------------------------------------------------

def _fit(dataset: LabeledDataset, config: ClassifierConfig, defense: str,
         defense_params: dict, augment=None) -> Classifier:
    if dataset.split != "train":
        raise TrainingError(f"classifier must be fit on the train split, got {dataset.split!r}")
    clf = Classifier(dataset.image_shape, dataset.n_classes, dataset.levels, config,
                     defense=defense, defense_params=defense_params)
    opt = Adam(clf.params, lr=config.learning_rate)
    rng = np.random.Generator(np.random.PCG64(config.seed + 1))
    smoothing = defense_params.get("smoothing", 0.0)
    for epoch in range(config.epochs):
        total = 0.0
        for idx in batches(len(dataset), config.batch_size, rng):
            images, labels = dataset.images[idx], dataset.labels[idx]
            if augment is not None:
                images, labels = augment(clf, images, labels, rng)
            target = smooth_labels(labels, clf.n_classes, smoothing) if smoothing else labels
            leaves = as_leaves(clf.params)
            with ComputationTape() as tape:
                loss = ops.cross_entropy(clf.forward(Tensor(normalize(images, clf.levels)), leaves), target)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"classifier loss diverged at epoch {epoch}")
            grads = backward(tape, loss, wrt=list(leaves.values()))
            opt.step(clf.params, {k: grads[t].data for k, t in leaves.items()})
            total += loss.item() * len(idx)
        logger.info("classifier[%s] epoch %d: loss %.4f", defense, epoch, total / len(dataset))
    return clf


def train_classifier(dataset: LabeledDataset, config: ClassifierConfig = ClassifierConfig(),
                     label_smoothing: float = 0.0) -> Classifier:
    if label_smoothing:
        smooth_labels(0, max(dataset.n_classes, 2), label_smoothing)  # validates eps
        return _fit(dataset, config, "label_smoothing", {"smoothing": label_smoothing})
    return _fit(dataset, config, "normal", {})


def sample_attack_eps(rng: np.random.Generator, delta: float, size: int) -> np.ndarray:
    """|N(0, delta)| draws, rejection-truncated to [0, 2 delta]."""
    out = np.empty(0)
    while len(out) < size:
        draw = np.abs(rng.normal(0.0, delta, size=2 * size))
        out = np.concatenate([out, draw[draw <= 2 * delta]])
    return out[:size]


def train_adversarial(dataset: LabeledDataset, config: ClassifierConfig = ClassifierConfig(),
                      inner_attack: str = "fgsm", delta: float = 8.0) -> Classifier:
    """Adversarial training with on-the-fly attacks from the model's own predictions.

    Each minibatch is its clean images plus one adversarial copy of each,
    built against the current parameters with per-example eps drawn from
    :func:`sample_attack_eps` and rounded to whole levels.
    """
    from . import attacks

    if inner_attack not in ("fgsm", "bim"):
        raise ConfigurationError(f"inner attack must be fgsm or bim, got {inner_attack!r}")

    def augment(clf, images, labels, rng):
        eps = round_half_away(sample_attack_eps(rng, delta, len(images))).astype(np.int64)
        predicted = clf.predict(images)
        if inner_attack == "fgsm":
            adv = attacks.attack_fgsm(clf, images, predicted, eps)
        else:
            adv = attacks.attack_bim(clf, images, predicted, eps)
        return np.concatenate([images, adv]), np.concatenate([labels, labels])

    return _fit(dataset, config, f"adv_{inner_attack}", {"delta": delta}, augment)


# -- feature squeezing -----------------------------------------------------

def quantize_colors(image, color_levels: int = 8, levels: int = 256) -> np.ndarray:
    """Snap each value to the nearest of ``color_levels`` evenly spaced levels."""
    if color_levels < 2 or color_levels > levels:
        raise ConfigurationError(f"color_levels must be in 2..{levels}")
    step = (levels - 1) / (color_levels - 1)
    k = round_half_away(np.asarray(image, dtype=np.float64) / step)
    return round_half_away(k * step).astype(np.int64)


def median_filter_2x2(image) -> np.ndarray:
    """2x2 median over the window ending at each pixel, reflect-padded top/left.

    The median of four values is the rounded mean of the middle two.
    Works on (H, W, C) or (N, H, W, C).
    """
    x = np.asarray(image)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    xp = np.pad(x, ((0, 0), (1, 0), (1, 0), (0, 0)), mode="reflect")
    win = np.stack([xp[:, :-1, :-1], xp[:, :-1, 1:], xp[:, 1:, :-1], xp[:, 1:, 1:]], axis=-1)
    win = np.sort(win, axis=-1)
    out = round_half_away((win[..., 1] + win[..., 2]) / 2.0).astype(np.int64)
    return out if batched else out[0]


def feature_squeeze(image, color_levels: int = 8, levels: int = 256) -> np.ndarray:
    return median_filter_2x2(quantize_colors(image, color_levels, levels))


class SqueezedClassifier:
    """Feature squeezing in front of an unmodified classifier."""

    def __init__(self, base: Classifier, color_levels: int = 8):
        self.base, self.color_levels = base, color_levels
        self.n_classes = base.n_classes

    def predict(self, images) -> np.ndarray:
        return self.base.predict(feature_squeeze(images, self.color_levels, self.base.levels))


class FragileClassifier:
    """Base predictions for in-distribution inputs, random labels otherwise."""

    def __init__(self, base, model, bpd_threshold: float, seed: int = 0):
        self.base, self.model = base, model
        self.bpd_threshold = bpd_threshold
        self.seed = seed
        self.n_classes = base.n_classes

    def predict(self, images) -> np.ndarray:
        from .density import bits_per_dimension_batch

        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        pred = self.base.predict(images)
        if self.bpd_threshold == np.inf:
            return pred
        bpd = bits_per_dimension_batch(self.model, images)
        rng = np.random.Generator(np.random.PCG64(self.seed))
        random_labels = rng.integers(0, self.n_classes, size=len(images))
        return np.where(bpd < self.bpd_threshold, pred, random_labels)


def fragile_classifier(base, model, bpd_threshold: float, seed: int = 0) -> FragileClassifier:
    return FragileClassifier(base, model, bpd_threshold, seed)


# -- persistence -----------------------------------------------------------

def save_classifier(path, clf: Classifier) -> None:
    meta = {"kind": "classifier", "image_shape": list(clf.image_shape), "n_classes": clf.n_classes,
            "levels": clf.levels, "config": asdict(clf.config), "defense": clf.defense,
            "defense_params": clf.defense_params}
    checkpoint.save(path, clf.params, meta)


def load_classifier(path) -> Classifier:
    params, meta = checkpoint.load(path)
    if meta.get("kind") != "classifier":
        raise FormatError(f"{path} is not a classifier checkpoint")
    return Classifier(tuple(meta["image_shape"]), meta["n_classes"], meta["levels"],
                      ClassifierConfig(**meta["config"]), params, meta["defense"], meta["defense_params"])
