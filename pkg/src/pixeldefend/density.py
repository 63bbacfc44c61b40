"""Autoregressive masked-convolution density model over integer images.

The network is a type-A masked convolution followed by residual type-B
masked convolutions and a 1x1 head emitting ``levels`` logits per pixel and
channel. Pixels are ordered in raster scan (row, column, channel).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .autograd import ComputationTape, Tensor, backward, checkpoint, ops
from .data import LabeledDataset, normalize
from .errors import DimensionError, FormatError, TrainingError
from .nn import Adam, as_leaves, batches, he_normal

logger = logging.getLogger(__name__)

SLOPE = 0.01


@dataclass(frozen=True)
class DensityConfig:
    depth: int = 6
    width: int = 48
    epochs: int = 20
    learning_rate: float = 1e-3
    seed: int = 0
    batch_size: int = 32
    first_kernel: int = 5
    kernel: int = 3


def causal_mask(kh: int, kw: int, cin: int, cout: int, channels: int, mask_type: str,
                in_groups: Optional[np.ndarray] = None, out_groups: Optional[np.ndarray] = None) -> np.ndarray:
    """Raster-order mask for a (kh, kw, cin, cout) kernel.

    Taps above the centre row, or left of centre on the centre row, are
    open. At the centre, input group g feeds output group h when g < h
    (type "A") or g <= h (type "B"); groups index image channels.
    """
    if in_groups is None:
        in_groups = np.arange(cin) * channels // cin
    if out_groups is None:
        out_groups = np.arange(cout) * channels // cout
    mask = np.zeros((kh, kw, cin, cout))
    ch, cw = kh // 2, kw // 2
    mask[:ch] = 1.0
    mask[ch, :cw] = 1.0
    if mask_type == "A":
        centre = in_groups[:, None] < out_groups[None, :]
    elif mask_type == "B":
        centre = in_groups[:, None] <= out_groups[None, :]
    else:
        raise ValueError(f"mask type must be 'A' or 'B', got {mask_type!r}")
    mask[ch, cw] = centre.astype(np.float64)
    return mask


class DensityModel:
    """Trained (or freshly initialised) parameters plus the masks they use."""

    def __init__(self, image_shape: tuple, levels: int = 256,
                 config: DensityConfig = DensityConfig(), params: Optional[dict] = None):
        self.image_shape = tuple(int(s) for s in image_shape)
        self.levels = int(levels)
        self.config = config
        h, w, c = self.image_shape
        d, width = config.depth, config.width
        ka, kb = config.first_kernel, config.kernel
        if ka % 2 == 0 or kb % 2 == 0:
            raise DimensionError("kernel sizes must be odd")
        self.masks = {"conv0": causal_mask(ka, ka, c, width, c, "A")}
        for l in range(1, d):
            self.masks[f"conv{l}"] = causal_mask(kb, kb, width, width, c, "B")
        head_groups = np.arange(c * self.levels) // self.levels
        self.masks["head"] = causal_mask(1, 1, width, c * self.levels, c, "B", out_groups=head_groups)
        self.params = params if params is not None else self._init_params()

    def _init_params(self) -> dict:
        rng = np.random.Generator(np.random.PCG64(self.config.seed))
        p = {}
        for l in range(self.config.depth):
            name = f"conv{l}"
            m = self.masks[name]
            fan_in = max(int(m.sum(axis=(0, 1, 2)).mean()), 1)
            p[f"{name}.w"] = he_normal(rng, m.shape, fan_in) * m
            p[f"{name}.b"] = np.zeros(m.shape[-1])
            if l > 0:
                # keep the residual stream from growing with depth
                p[f"{name}.w"] *= 1.0 / math.sqrt(self.config.depth)
        p["head.w"] = np.zeros(self.masks["head"].shape)
        p["head.b"] = np.zeros(self.masks["head"].shape[-1])
        return p

    # -- forward ---------------------------------------------------------

    def logits(self, x_norm, params: Optional[dict] = None) -> Tensor:
        """Full forward pass; (N, H, W, C) normalised input -> (N, H, W, C, L) logits."""
        p = params if params is not None else {k: Tensor(v, check=False) for k, v in self.params.items()}
        x = x_norm if isinstance(x_norm, Tensor) else Tensor(x_norm, check=False)
        h = ops.leaky_relu(ops.conv2d(x, p["conv0.w"], self.masks["conv0"]) + p["conv0.b"], SLOPE)
        for l in range(1, self.config.depth):
            name = f"conv{l}"
            h = h + ops.leaky_relu(ops.conv2d(h, p[f"{name}.w"], self.masks[name]) + p[f"{name}.b"], SLOPE)
        out = ops.conv2d(h, p["head.w"], self.masks["head"]) + p["head.b"]
        n, hh, ww, _ = out.shape
        return ops.reshape(out, (n, hh, ww, self.image_shape[2], self.levels))

    def _check_images(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != self.image_shape:
            raise DimensionError(f"image shape {images.shape[1:]} != model shape {self.image_shape}")
        if images.min(initial=0) < 0 or images.max(initial=0) >= self.levels:
            raise DimensionError(f"image levels outside [0, {self.levels - 1}]")
        return images.astype(np.int64)

    def nll_loss(self, images: np.ndarray, params: dict) -> Tensor:
        """Mean negative log-likelihood per dimension (nats) of a batch."""
        return ops.cross_entropy(self.logits(normalize(images, self.levels), params), images)

    def log_probs(self, images: np.ndarray, chunk: int = 64) -> np.ndarray:
        """Per-pixel log-probability of the observed level, (N, H, W, C)."""
        images = self._check_images(images)
        out = np.empty(images.shape)
        for s in range(0, len(images), chunk):
            batch = images[s:s + chunk]
            z = self.logits(normalize(batch, self.levels)).data
            m = z.max(axis=-1, keepdims=True)
            ls = z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
            out[s:s + chunk] = np.take_along_axis(ls, batch[..., None], axis=-1)[..., 0]
        return out

    # -- cone evaluation -------------------------------------------------

    @property
    def _radius(self) -> int:
        c = self.config
        return c.first_kernel // 2 + (c.kernel // 2) * (c.depth - 1)

    def _padded(self, images: np.ndarray) -> np.ndarray:
        r = self._radius
        return np.pad(normalize(images, self.levels), ((0, 0), (r, 0), (r, r), (0, 0)))

    def _cone_logits(self, xp: np.ndarray, i: int, j: int) -> np.ndarray:
        """Logits (N, C, L) at pixel (i, j) computed from only its receptive field.

        ``xp`` is the output of :meth:`_padded`: the normalised batch with
        ``radius`` zero rows on top and zero columns on each side.
        """
        cfg, (hgt, wid, _) = self.config, self.image_shape
        rb = cfg.kernel // 2
        ra = cfg.first_kernel // 2
        d = cfg.depth
        r = self._radius

        def extent(l):
            # reach of layer l's region above / beside (i, j)
            return rb * (d - 1 - l)

        def inside(rows0, cols0, nr, nc):
            rr = np.arange(rows0, rows0 + nr)
            cc = np.arange(cols0, cols0 + nc)
            return ((rr >= 0) & (rr < hgt))[:, None] & ((cc >= 0) & (cc < wid))[None, :]

        # input window rows [i - r, i], cols [j - r, j + r]
        src = xp[:, i:i + r + 1, j:j + 2 * r + 1]
        h = None
        for l in range(d):
            name = f"conv{l}"
            w, m, b = self.params[f"{name}.w"], self.masks[name], self.params[f"{name}.b"]
            k = w.shape[0] // 2
            e = extent(l)
            nr, nc = e + 1, 2 * e + 1
            inp = src if l == 0 else h
            ein = r if l == 0 else extent(l - 1)
            # inp covers rows [i - ein, i], cols [j - ein, j + ein]
            acc = np.zeros((inp.shape[0], nr, nc, w.shape[-1]))
            keff = w * m
            for a in range(w.shape[0]):
                for c in range(w.shape[1]):
                    if not m[a, c].any():
                        continue
                    r0 = ein - e + (a - k)
                    c0 = ein - e + (c - k)
                    acc += inp[:, r0:r0 + nr, c0:c0 + nc] @ keff[a, c]
            z = acc + b
            act = np.where(z > 0, z, SLOPE * z)
            if l > 0:
                off = ein - e
                act = inp[:, off:off + nr, off:off + nc] + act
            act *= inside(i - e, j - e, nr, nc)[None, :, :, None]
            h = act
        feat = h[:, 0, 0]
        logits = feat @ (self.params["head.w"][0, 0] * self.masks["head"][0, 0]) + self.params["head.b"]
        return logits.reshape(len(xp), self.image_shape[2], self.levels)

    def conditional_logits(self, images: np.ndarray, i: int, j: int) -> np.ndarray:
        images = self._check_images(images)
        hgt, wid, _ = self.image_shape
        if not (0 <= i < hgt and 0 <= j < wid):
            raise DimensionError(f"position ({i}, {j}) outside {hgt}x{wid}")
        return self._cone_logits(self._padded(images), i, j)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# -- public operations -----------------------------------------------------

def log_likelihood(model: DensityModel, image) -> float:
    """Natural-log likelihood of one image under the raster-order factorisation."""
    return float(model.log_probs(image).sum())


def log_likelihoods(model: DensityModel, images) -> np.ndarray:
    lp = model.log_probs(images)
    return lp.reshape(len(lp), -1).sum(axis=1)


def bits_per_dimension(model: DensityModel, image) -> float:
    dims = int(np.prod(model.image_shape))
    return -log_likelihood(model, image) / (dims * math.log(2))


def bits_per_dimension_batch(model: DensityModel, images) -> np.ndarray:
    dims = int(np.prod(model.image_shape))
    return -log_likelihoods(model, images) / (dims * math.log(2))


def conditional_softmax_at(model: DensityModel, image, position: tuple) -> np.ndarray:
    """Distribution over levels at ``position`` = (i, j, k) given its raster predecessors."""
    i, j, k = position
    if not 0 <= k < model.image_shape[2]:
        raise DimensionError(f"channel {k} outside 0..{model.image_shape[2] - 1}")
    z = model.conditional_logits(image, i, j)[0, k]
    return _softmax(z)


def full_forward_softmax(model: DensityModel, image) -> np.ndarray:
    """(H, W, C, L) per-position distributions from one full forward pass."""
    image = model._check_images(image)
    return _softmax(model.logits(normalize(image, model.levels)).data[0])


def sample(model: DensityModel, seed: int, count: int = 1) -> np.ndarray:
    """Ancestral samples in raster order; (count, H, W, C) integer levels."""
    rng = np.random.Generator(np.random.PCG64(seed))
    hgt, wid, ch = model.image_shape
    images = np.zeros((count, hgt, wid, ch), dtype=np.int64)
    xp = model._padded(images)
    r = model._radius
    for i in range(hgt):
        for j in range(wid):
            for k in range(ch):
                p = _softmax(model._cone_logits(xp, i, j)[:, k])
                u = rng.random(count)[:, None]
                v = np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), model.levels - 1)
                images[:, i, j, k] = v
                xp[:, i + r, j + r, k] = v / (model.levels - 1)
    return images if count > 1 else images[0]


def train_density(dataset: LabeledDataset, config: DensityConfig = DensityConfig(),
                  log_every: int = 0) -> DensityModel:
    """Fit by Adam on mean per-dimension NLL; deterministic given ``config.seed``."""
    if dataset.split != "train":
        raise TrainingError(f"density model must be fit on the train split, got {dataset.split!r}")
    model = DensityModel(dataset.image_shape, dataset.levels, config)
    opt = Adam(model.params, lr=config.learning_rate)
    rng = np.random.Generator(np.random.PCG64(config.seed + 1))
    model.epoch_losses = []
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for idx in batches(len(dataset), config.batch_size, rng):
            leaves = as_leaves(model.params)
            with ComputationTape() as tape:
                loss = model.nll_loss(dataset.images[idx], leaves)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"density loss diverged at epoch {epoch}")
            grads = backward(tape, loss, wrt=list(leaves.values()))
            opt.step(model.params, {k: grads[t].data for k, t in leaves.items()})
            total += loss.item() * len(idx)
            count += len(idx)
        avg = total / count
        model.epoch_losses.append(avg)
        logger.info("density epoch %d: %.4f bits/dim", epoch, avg / math.log(2))
    return model


def save_density(path, model: DensityModel) -> None:
    meta = {"kind": "density", "image_shape": list(model.image_shape), "levels": model.levels,
            "config": asdict(model.config)}
    checkpoint.save(path, model.params, meta)


def load_density(path) -> DensityModel:
    params, meta = checkpoint.load(path)
    if meta.get("kind") != "density":
        raise FormatError(f"{path} is not a density checkpoint")
    return DensityModel(tuple(meta["image_shape"]), meta["levels"], DensityConfig(**meta["config"]), params)
