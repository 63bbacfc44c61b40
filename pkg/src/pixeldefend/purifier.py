"""Greedy purification of images toward high density under the model.

``purify_greedy`` visits pixels in raster order and replaces each with the
most probable level inside ``[x - eps, x + eps]`` given the already purified
prefix and the untouched suffix of the working image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autograd import ComputationTape, Tensor, backward, ops
from .data import normalize, round_half_away
from .density import DensityModel, bits_per_dimension_batch
from .errors import ConfigurationError, DimensionError, NumericError

SKIP_LOW_BPD = "low_bpd"    # leave already-probable images (BPD < tau) untouched
SKIP_HIGH_BPD = "high_bpd"  # literal reading: leave improbable images untouched


@dataclass(frozen=True)
class DefenseConfig:
    eps_defend: int = 26
    mode: str = "fixed"
    tau: Optional[float] = None
    skip: str = SKIP_LOW_BPD
    baseline: str = "none"
    baseline_steps: int = 100
    baseline_step_size: float = 0.5

    def __post_init__(self):
        if self.eps_defend < 0:
            raise ConfigurationError("eps_defend must be >= 0")
        if self.mode not in ("fixed", "adaptive"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.mode == "adaptive" and (self.tau is None or self.tau <= 0):
            raise ConfigurationError("adaptive mode needs tau > 0")
        if self.skip not in (SKIP_LOW_BPD, SKIP_HIGH_BPD):
            raise ConfigurationError(f"unknown skip rule {self.skip!r}")
        if self.baseline not in ("none", "gradient_ascent"):
            raise ConfigurationError(f"unknown baseline {self.baseline!r}")


def _as_batch(model: DensityModel, images) -> tuple:
    x = np.asarray(images, dtype=np.int64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[1:] != model.image_shape:
        raise DimensionError(f"image shape {x.shape[1:]} != model shape {model.image_shape}")
    if x.size and (x.min() < 0 or x.max() >= model.levels):
        raise DimensionError(f"image levels outside [0, {model.levels - 1}]")
    return x, single


def constrained_argmax(logits: np.ndarray, original: np.ndarray, eps: int, levels: int) -> np.ndarray:
    """Most probable level in [x - eps, x + eps] per row.

    Ties go to the level closest to the original value, then the smaller level.
    """
    z = np.arange(levels)
    lo = np.maximum(original - eps, 0)[:, None]
    hi = np.minimum(original + eps, levels - 1)[:, None]
    feasible = (z >= lo) & (z <= hi)
    masked = np.where(feasible, logits, -np.inf)
    best = masked.max(axis=1, keepdims=True)
    key = np.where(masked == best, np.abs(z - original[:, None]) * levels + z, np.iinfo(np.int64).max)
    return key.argmin(axis=1)


def purify_greedy(model: DensityModel, images, eps_defend: int, chunk: int = 256) -> np.ndarray:
    x, single = _as_batch(model, images)
    if eps_defend < 0:
        raise ConfigurationError("eps_defend must be >= 0")
    if eps_defend == 0:
        return x[0].copy() if single else x.copy()
    out = np.empty_like(x)
    for s in range(0, len(x), chunk):
        out[s:s + chunk] = _greedy_chunk(model, x[s:s + chunk], int(eps_defend))
    return out[0] if single else out


def _greedy_chunk(model: DensityModel, x: np.ndarray, eps: int) -> np.ndarray:
    work = x.copy()
    xp = model._padded(x)
    r = model._radius
    hgt, wid, ch = model.image_shape
    scale = 1.0 / (model.levels - 1)
    for i in range(hgt):
        for j in range(wid):
            for k in range(ch):
                logits = model._cone_logits(xp, i, j)[:, k]
                v = constrained_argmax(logits, x[:, i, j, k], eps, model.levels)
                work[:, i, j, k] = v
                xp[:, i + r, j + r, k] = v * scale
    return work


def purify_adaptive(model: DensityModel, images, eps_defend: int, tau: float,
                    skip: str = SKIP_LOW_BPD) -> np.ndarray:
    """Greedy purification gated by each image's bits per dimension.

    With the default ``skip="low_bpd"``, images with BPD < tau are returned
    unchanged and the rest are purified; ``skip="high_bpd"`` inverts the gate.
    """
    x, single = _as_batch(model, images)
    bpd = bits_per_dimension_batch(model, x)
    todo = bpd >= tau if skip == SKIP_LOW_BPD else bpd < tau
    out = x.copy()
    if todo.any():
        out[todo] = purify_greedy(model, x[todo], eps_defend)
    return out[0] if single else out


def relaxed_log_likelihood(model: DensityModel, u: np.ndarray) -> tuple:
    """Piecewise-linear relaxation of log p over real-valued normalised images.

    The network conditions on ``u`` directly; the observed-level term
    interpolates log-probabilities of the two neighbouring levels. Returns
    per-image values and their gradient w.r.t. ``u``.
    """
    levels = model.levels
    v = np.clip(u, 0.0, 1.0) * (levels - 1)
    lo = np.minimum(np.floor(v), levels - 2).astype(np.int64)
    frac = v - lo
    weights = np.zeros(u.shape + (levels,))
    np.put_along_axis(weights, lo[..., None], (1 - frac)[..., None], axis=-1)
    np.put_along_axis(weights, (lo + 1)[..., None], frac[..., None], axis=-1)
    ut = Tensor(u, check=False)
    with ComputationTape() as tape:
        ls = ops.log_softmax(model.logits(ut), axis=-1)
        total = ops.sum(ops.multiply(ls, weights))
    g = backward(tape, total, wrt=[ut])[ut].data
    lsd = ls.data
    a = np.take_along_axis(lsd, lo[..., None], axis=-1)[..., 0]
    b = np.take_along_axis(lsd, (lo + 1)[..., None], axis=-1)[..., 0]
    inside = (u > 0) & (u < 1)
    g = g + np.where(inside, (b - a) * (levels - 1), 0.0)
    per_image = (lsd * weights).reshape(len(u), -1).sum(axis=1)
    return per_image, g


def purify_gradient_baseline(model: DensityModel, images, eps_defend: int, steps: int = 100,
                             step_size: float = 0.5) -> np.ndarray:
    """Projected signed-gradient ascent on the relaxed log-likelihood.

    ``step_size`` is in levels; iterates stay in the eps ball and [0, 1].
    The result is rounded to the level grid.
    """
    x, single = _as_batch(model, images)
    if eps_defend == 0:
        return x[0].copy() if single else x.copy()
    levels = model.levels
    x0 = normalize(x, levels)
    lo = np.maximum(x0 - eps_defend / (levels - 1), 0.0)
    hi = np.minimum(x0 + eps_defend / (levels - 1), 1.0)
    u = x0.copy()
    for _ in range(steps):
        _, g = relaxed_log_likelihood(model, u)
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient in gradient-ascent purification")
        u = np.clip(u + step_size / (levels - 1) * np.sign(g), lo, hi)
    out = round_half_away(u * (levels - 1)).astype(np.int64)
    out = np.clip(np.minimum(np.maximum(out, x - eps_defend), x + eps_defend), 0, levels - 1)
    return out[0] if single else out


def purify(model: DensityModel, images, config: DefenseConfig) -> np.ndarray:
    if config.baseline == "gradient_ascent":
        return purify_gradient_baseline(model, images, config.eps_defend,
                                        config.baseline_steps, config.baseline_step_size)
    if config.mode == "adaptive":
        return purify_adaptive(model, images, config.eps_defend, config.tau, config.skip)
    return purify_greedy(model, images, config.eps_defend)


def defend_and_classify(classifier, model: DensityModel, images, config: DefenseConfig) -> np.ndarray:
    """Purify, then classify with the unmodified classifier."""
    return classifier.predict(purify(model, images, config))


class PurifiedClassifier:
    """Predictor wrapper: purification in front of any classifier."""

    def __init__(self, classifier, model: DensityModel, config: DefenseConfig):
        self.classifier, self.model, self.config = classifier, model, config
        self.n_classes = classifier.n_classes

    def predict(self, images) -> np.ndarray:
        return defend_and_classify(self.classifier, self.model, images, self.config)
