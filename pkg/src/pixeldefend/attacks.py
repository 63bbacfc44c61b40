"""White-box attacks in integer pixel space.

Gradients are taken w.r.t. the normalised input; steps, clipping and
rounding happen on the integer level grid, so every output satisfies
``|adv - x|_inf <= eps`` exactly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .autograd import Tensor, checkpoint
from .data import clip_linf, normalize, round_half_away
from .errors import ConfigurationError, FormatError, NumericError

METHODS = ("rand", "fgsm", "bim", "deepfool", "cw")


@dataclass(frozen=True)
class AttackConfig:
    method: str
    eps: int
    seed: int = 0
    alpha: int = 1
    max_iter: int = 50
    overshoot: float = 0.02
    kappa: float = 0.0
    steps: int = 40
    step_size: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown attack {self.method!r}; expected one of {METHODS}")
        if self.eps < 0 or int(self.eps) != self.eps:
            raise ConfigurationError(f"eps must be a non-negative integer, got {self.eps}")


@dataclass
class AdversarialBatch:
    originals: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray
    pred_clean: np.ndarray
    pred_adv: np.ndarray
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        eps = self.config.get("eps")
        if eps is not None and np.abs(self.perturbed - self.originals).max(initial=0) > eps:
            raise ConfigurationError("perturbation exceeds eps")


def _eps_array(eps, n: int) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.int64)
    if eps.ndim == 0:
        eps = np.full(n, int(eps))
    if (eps < 0).any():
        raise ConfigurationError("eps must be non-negative")
    return eps


def _per_image(eps: np.ndarray) -> np.ndarray:
    return eps.reshape(-1, 1, 1, 1)


def _batch(images) -> tuple:
    x = np.asarray(images, dtype=np.int64)
    single = x.ndim == 3
    return (x[None] if single else x), single


def _finite(g: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient in {what}")
    return g


def image_seed(seed: int, index: int) -> np.random.Generator:
    """Independent stream for image ``index`` under a global ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index)])))


def attack_rand(images, eps, seed: int = 0, levels: int = 256, offset: int = 0) -> np.ndarray:
    x, single = _batch(images)
    eps = _eps_array(eps, len(x))
    noise = np.stack([image_seed(seed, offset + n).integers(-e, e + 1, size=x.shape[1:])
                      for n, e in enumerate(eps)]) if len(x) else np.zeros_like(x)
    out = np.clip(x + noise, 0, levels - 1)
    return out[0] if single else out


def attack_fgsm(classifier, images, labels, eps, levels: Optional[int] = None) -> np.ndarray:
    levels = levels or classifier.levels
    x, single = _batch(images)
    eps = _eps_array(eps, len(x))
    g = _finite(classifier.loss_gradient(normalize(x, levels), np.atleast_1d(labels)), "fgsm")
    out = clip_linf(x + _per_image(eps) * np.sign(g).astype(np.int64), x, _per_image(eps), levels)
    return out[0] if single else out


def bim_iterations(eps) -> int:
    """floor(min(eps + 4, 1.25 eps))."""
    return int(math.floor(min(eps + 4, 1.25 * eps)))


def attack_bim(classifier, images, labels, eps, alpha: int = 1, levels: Optional[int] = None) -> np.ndarray:
    levels = levels or classifier.levels
    x, single = _batch(images)
    eps = _eps_array(eps, len(x))
    labels = np.atleast_1d(labels)
    iters = np.array([bim_iterations(int(e)) for e in eps])
    cur = x.copy()
    for t in range(int(iters.max(initial=0))):
        g = _finite(classifier.loss_gradient(normalize(cur, levels), labels), "bim")
        step = alpha * np.sign(g).astype(np.int64) * _per_image((t < iters).astype(np.int64))
        cur = clip_linf(cur + step, x, _per_image(eps), levels)
    return cur[0] if single else cur


def deepfool_step(logits: np.ndarray, grads: np.ndarray, current: np.ndarray) -> np.ndarray:
    """Minimal L2 step to the nearest linearised boundary of the current class.

    ``logits`` (N, K), ``grads`` (N, K, ...) and ``current`` (N,) class
    indices. Returns the step with the input's trailing shape.
    """
    n, k = logits.shape
    rows = np.arange(n)
    w = grads - grads[rows, current][:, None]
    f = logits - logits[rows, current][:, None]
    wn = np.sqrt((w.reshape(n, k, -1) ** 2).sum(axis=2))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.abs(f) / wn
    ratio[rows, current] = np.inf
    ratio[~np.isfinite(ratio)] = np.inf
    target = ratio.argmin(axis=1)
    wl = w[rows, target]
    fl = np.abs(f[rows, target])
    wl2 = wn[rows, target] ** 2
    scale = np.where(wl2 > 0, fl / np.where(wl2 > 0, wl2, 1.0), 0.0)
    return scale.reshape((n,) + (1,) * (wl.ndim - 1)) * wl


def deepfool_raw(classifier, images, max_iter: int = 50, overshoot: float = 0.02,
                 levels: Optional[int] = None) -> tuple:
    """Unclipped DeepFool iterate in normalised space and a per-image flipped flag."""
    levels = levels or classifier.levels
    x, _ = _batch(images)
    x0 = normalize(x, levels)
    r_tot = np.zeros_like(x0)
    start = classifier.logits(x).argmax(axis=1)
    active = np.ones(len(x), dtype=bool)
    cur = x0.copy()
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        z, g = classifier.logit_gradients(cur[idx])
        _finite(g, "deepfool")
        flipped = z.argmax(axis=1) != start[idx]
        active[idx[flipped]] = False
        keep = idx[~flipped]
        if len(keep) == 0:
            break
        sel = ~flipped
        r_tot[keep] += deepfool_step(z[sel], g[sel], start[keep])
        cur[keep] = x0[keep] + (1 + overshoot) * r_tot[keep]
    final = np.concatenate([classifier.forward(Tensor(cur[s:s + 256], check=False)).data
                            for s in range(0, len(cur), 256)])
    return cur, final.argmax(axis=1) != start


def denorm_real(x_norm: np.ndarray, levels: int) -> np.ndarray:
    return round_half_away(x_norm * (levels - 1)).astype(np.int64)


def project_deepfool(raw: np.ndarray, images, eps, levels: int = 256) -> np.ndarray:
    x, single = _batch(images)
    out = clip_linf(denorm_real(raw, levels), x, _per_image(_eps_array(eps, len(x))), levels)
    return out[0] if single else out


def attack_deepfool(classifier, images, eps, max_iter: int = 50, overshoot: float = 0.02,
                    return_flags: bool = False):
    raw, flipped = deepfool_raw(classifier, images, max_iter, overshoot)
    out = project_deepfool(raw, images, eps, classifier.levels)
    return (out, flipped) if return_flags else out


def attack_cw(classifier, images, labels, eps, kappa: float = 0.0, steps: int = 40,
              step_size: float = 1.0, levels: Optional[int] = None) -> np.ndarray:
    """Signed-gradient descent on the clamped logit margin, clipped to the eps ball."""
    levels = levels or classifier.levels
    x, single = _batch(images)
    eps = _per_image(_eps_array(eps, len(x)))
    labels = np.atleast_1d(labels)
    x0 = normalize(x, levels)
    lo = np.maximum(x0 - eps / (levels - 1), 0.0)
    hi = np.minimum(x0 + eps / (levels - 1), 1.0)
    cur = x0.copy()
    for _ in range(steps):
        _, g = classifier.margin_gradient(cur, labels, kappa)
        _finite(g, "cw")
        cur = np.clip(cur - step_size / (levels - 1) * np.sign(g), lo, hi)
    out = clip_linf(denorm_real(cur, levels), x, eps, levels)
    return out[0] if single else out


def run_attack(classifier, images, labels, config: AttackConfig, offset: int = 0) -> AdversarialBatch:
    x, _ = _batch(images)
    labels = np.asarray(labels, dtype=np.int64)
    m = config.method
    if m == "rand":
        adv = attack_rand(x, config.eps, config.seed, classifier.levels, offset)
    elif m == "fgsm":
        adv = attack_fgsm(classifier, x, labels, config.eps)
    elif m == "bim":
        adv = attack_bim(classifier, x, labels, config.eps, config.alpha)
    elif m == "deepfool":
        adv = attack_deepfool(classifier, x, config.eps, config.max_iter, config.overshoot)
    else:
        adv = attack_cw(classifier, x, labels, config.eps, config.kappa, config.steps, config.step_size)
    return AdversarialBatch(x, adv, labels, classifier.predict(x), classifier.predict(adv), asdict(config))


def save_batch(path, batch: AdversarialBatch) -> None:
    checkpoint.save(path, {"originals": batch.originals, "perturbed": batch.perturbed,
                           "labels": batch.labels, "pred_clean": batch.pred_clean,
                           "pred_adv": batch.pred_adv},
                    meta={"kind": "adversarial_batch", "config": batch.config})


def load_batch(path) -> AdversarialBatch:
    t, meta = checkpoint.load(path)
    if meta.get("kind") != "adversarial_batch":
        raise FormatError(f"{path} is not an adversarial batch archive")
    as_int = {k: v.astype(np.int64) for k, v in t.items()}
    return AdversarialBatch(as_int["originals"], as_int["perturbed"], as_int["labels"],
                            as_int["pred_clean"], as_int["pred_adv"], meta.get("config", {}))
