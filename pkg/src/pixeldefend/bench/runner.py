"""Run an ExperimentPlan end to end.

Stages run in a fixed order and every random draw is seeded from the plan,
so the report is a pure function of the plan. Intermediate artifacts go
through :class:`ArtifactCache`; a failing stage raises :class:`StageError`
naming the stage, and artifacts cached before it stay on disk.
"""

from __future__ import annotations

import hashlib
import logging
import time
import zlib
from dataclasses import asdict
from typing import Optional

import numpy as np

from .. import attacks as atk
from ..autograd import checkpoint
from ..classifier import (
    Classifier,
    SqueezedClassifier,
    fragile_classifier,
    load_classifier,
    save_classifier,
    train_adversarial,
    train_classifier,
)
from ..data import LabeledDataset, desk_corpus
from ..density import DensityModel, bits_per_dimension_batch, load_density, save_density, train_density
from ..detector import LikelihoodIndex, detect, ks_uniform, roc_curve
from ..errors import PixelDefendError, StageError
from ..purifier import purify_gradient_baseline, purify_greedy
from .cache import ArtifactCache, content_key, default_cache_dir
from .plan import ExperimentPlan, attack_columns
from .report import AccuracyRow, ExperimentReport

logger = logging.getLogger(__name__)

MODEL_KINDS = {"density", "classifier", "index"}


def derive_seed(seed: int, *names) -> int:
    """Stable 63-bit seed for a named cell."""
    words = [int(seed)] + [zlib.crc32(str(n).encode()) for n in names]
    return int(np.random.SeedSequence(words).generate_state(2, np.uint64)[0] >> np.uint64(1))


def images_key(images: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(images, dtype=np.int64).tobytes()).hexdigest()


def _save_array(path, arr):
    checkpoint.save(path, {"array": np.asarray(arr, dtype=np.float64)}, {"kind": "array"})


def _load_int(path):
    return checkpoint.load(path)[0]["array"].astype(np.int64)


def _load_float(path):
    return checkpoint.load(path)[0]["array"]


class _Stage:
    def __init__(self, name: str, timings: dict):
        self.name, self.timings = name, timings

    def __enter__(self):
        logger.info("stage %s", self.name)
        self.start = time.perf_counter()
        return self

    def __exit__(self, kind, exc, tb):
        self.timings[self.name] = time.perf_counter() - self.start
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, f"{type(exc).__name__}: {exc}") from exc
        return False


def separating_threshold(low, high) -> float:
    """Cut that misclassifies the fewest of ``low`` (>= cut) and ``high`` (< cut).

    Candidates are midpoints between consecutive pooled values; among equally
    good cuts the middle one is taken.
    """
    low, high = np.sort(np.asarray(low, float)), np.sort(np.asarray(high, float))
    pooled = np.unique(np.r_[low, high])
    if len(pooled) < 2:
        return float(pooled[0]) if len(pooled) else np.inf
    cuts = (pooled[:-1] + pooled[1:]) / 2
    errors = (len(low) - np.searchsorted(low, cuts, side="left")) / len(low) + \
        np.searchsorted(high, cuts, side="left") / len(high)
    best = np.flatnonzero(errors == errors.min())
    return float(cuts[best[len(best) // 2]])


class PlanRunner:
    def __init__(self, plan: ExperimentPlan, cache: Optional[ArtifactCache] = None):
        self.plan = plan
        self.cache = cache if cache is not None else ArtifactCache(default_cache_dir())
        self.timings: dict = {}
        self._purified: dict = {}

    # -- artifacts -------------------------------------------------------

    def corpus(self) -> dict:
        d = self.plan.dataset
        return desk_corpus(self.plan.seed, d.side, d.n_classes, d.train, d.validation, d.test)

    def data_key(self) -> str:
        return content_key("data", {"seed": self.plan.seed, **asdict(self.plan.dataset)})

    def density(self, train: LabeledDataset) -> tuple:
        key = content_key("density", {"data": self.data_key(), "config": asdict(self.plan.density)})
        model = self.cache.fetch("density", key, lambda: train_density(train, self.plan.density),
                                 save_density, load_density)
        return model, key

    def classifier(self, network: str, train: LabeledDataset) -> tuple:
        p = self.plan
        payload = {"data": self.data_key(), "network": network, "config": asdict(p.classifier)}
        if network == "label_smoothing":
            payload["smoothing"] = p.label_smoothing
        elif network.startswith("adv_"):
            payload["delta"] = p.adversarial_delta

        def build():
            if network == "normal":
                return train_classifier(train, p.classifier)
            if network == "label_smoothing":
                return train_classifier(train, p.classifier, label_smoothing=p.label_smoothing)
            return train_adversarial(train, p.classifier, network[4:], p.adversarial_delta)

        key = content_key("classifier", payload)
        return self.cache.fetch("classifier", key, build, save_classifier, load_classifier), key

    def attack_config(self, method: str, eps: int) -> atk.AttackConfig:
        g = self.plan.attacks
        return atk.AttackConfig(method, eps, seed=derive_seed(self.plan.seed, "attack", method, eps),
                                max_iter=g.deepfool_max_iter, overshoot=g.deepfool_overshoot,
                                kappa=g.cw_kappa, steps=g.cw_steps, step_size=g.cw_step_size)

    def adversarial(self, clf: Classifier, clf_key: str, x, y, method: str, eps: int) -> np.ndarray:
        cfg = self.attack_config(method, eps)
        key = content_key("attack", {"classifier": clf_key, "images": images_key(x), "config": asdict(cfg)})
        return self.cache.fetch("attack", key, lambda: atk.run_attack(clf, x, y, cfg).perturbed,
                                _save_array, _load_int)

    def purified(self, model: DensityModel, model_key: str, x: np.ndarray, eps: int) -> np.ndarray:
        ik = images_key(x)
        memo = (ik, eps)
        if memo not in self._purified:
            key = content_key("purified", {"model": model_key, "images": ik, "eps": eps})
            self._purified[memo] = self.cache.fetch(
                "purified", key, lambda: purify_greedy(model, x, eps), _save_array, _load_int)
        return self._purified[memo]

    # -- the run ---------------------------------------------------------

    def run(self) -> ExperimentReport:
        p = self.plan
        started = time.perf_counter()
        with _Stage("data", self.timings):
            corpus = self.corpus()
            train, val, test = corpus["train"], corpus["validation"], corpus["test"]
            x_eval, y_eval = test.images[:p.eval_size], test.labels[:p.eval_size]
        with _Stage("density", self.timings):
            model, model_key = self.density(train)
        networks = list(dict.fromkeys(n for n, _ in p.rows))
        with _Stage("classifiers", self.timings):
            built = {n: self.classifier(n, train) for n in networks}
            classifiers = {n: c for n, (c, _) in built.items()}
            clf_keys = {n: k for n, (_, k) in built.items()}
        grid = [(m, e) for e in p.attacks.eps for m in p.attacks.methods]
        with _Stage("attacks", self.timings):
            adv = {(n, m, e): self.adversarial(classifiers[n], clf_keys[n], x_eval, y_eval, m, e)
                   for n in networks for m, e in grid}
        needs_purify = {n for n, d in p.rows if d.startswith("pixeldefend")}
        with _Stage("purify", self.timings):
            for n in sorted(needs_purify):
                self.purified(model, model_key, x_eval, p.eps_defend)
                for m, e in grid:
                    self.purified(model, model_key, adv[(n, m, e)], p.eps_defend)
        with _Stage("calibrate", self.timings):
            calibration = self.calibrate(model, model_key, classifiers, val,
                                         [n for n, d in p.rows if d == "pixeldefend_adaptive"])
        with _Stage("evaluate", self.timings):
            rows = self.evaluate(model, model_key, classifiers, adv, calibration, x_eval, y_eval, grid)
        with _Stage("detection", self.timings):
            detection = self.detection(model, model_key, train, test, classifiers, clf_keys, adv, grid)
        with _Stage("fig5", self.timings):
            fig5 = self.fig5(model, model_key, classifiers, clf_keys, test)
        with _Stage("fragile", self.timings):
            fragile = self.fragile(model, classifiers, clf_keys, val, x_eval, y_eval)
        provenance = {
            "seed": p.seed,
            "density_seed": p.density.seed,
            "classifier_seed": p.classifier.seed,
            "plan_digest": p.digest(),
            "plan": p.to_dict(),
            "wall_clock_seconds": round(time.perf_counter() - started, 3),
            "stage_seconds": {k: round(v, 3) for k, v in self.timings.items()},
        }
        return ExperimentReport(attack_columns(p.attacks.methods), rows, detection,
                                calibration, fig5, fragile, provenance)

    # -- stages ----------------------------------------------------------

    def calibrate(self, model, model_key, classifiers, val, networks) -> dict:
        """Lowest BPD threshold whose adaptive clean accuracy matches the bare classifier."""
        if not networks:
            return {}
        p = self.plan
        xv, yv = val.images[:p.calibration_size], val.labels[:p.calibration_size]
        bpd = bits_per_dimension_batch(model, xv)
        purified = self.purified(model, model_key, xv, p.eps_defend)
        candidates = np.unique(np.r_[np.quantile(bpd, np.linspace(0, 1, 21)), np.inf])
        out = {}
        for n in networks:
            clf = classifiers[n]
            bare = clf.accuracy(xv, yv)
            pred_pur = clf.predict(purified)
            pred_bare = clf.predict(xv)
            chosen = np.inf
            for tau in candidates:
                acc = float((np.where(bpd >= tau, pred_pur, pred_bare) == yv).mean())
                if acc >= bare:
                    chosen = float(tau)
                    break
            out[n] = {"tau": chosen, "validation_accuracy_bare": bare,
                      "validation_mean_bpd": float(bpd.mean()), "n": int(len(xv))}
        return out

    def _adaptive(self, model, model_key, x, tau) -> np.ndarray:
        bpd = bits_per_dimension_batch(model, x)
        purified = self.purified(model, model_key, x, self.plan.eps_defend)
        todo = bpd >= tau if self.plan.adaptive_skip == "low_bpd" else bpd < tau
        return np.where(todo[:, None, None, None], purified, x)

    def _predict(self, model, model_key, classifiers, calibration, network, defense, x):
        clf = classifiers[network]
        if defense == "none":
            return clf.predict(x)
        if defense == "feature_squeeze":
            return SqueezedClassifier(clf).predict(x)
        if defense == "pixeldefend":
            return clf.predict(self.purified(model, model_key, x, self.plan.eps_defend))
        return clf.predict(self._adaptive(model, model_key, x, calibration[network]["tau"]))

    def evaluate(self, model, model_key, classifiers, adv, calibration, x, y, grid) -> list:
        p = self.plan
        eps_list = list(p.attacks.eps) if p.attacks.methods else [None]
        rows = []
        for network, defense in p.rows:
            clean = float((self._predict(model, model_key, classifiers, calibration, network, defense, x) == y).mean())
            for eps in eps_list:
                acc, counts = {"CLEAN": clean}, {"CLEAN": int(len(y))}
                for method in p.attacks.methods:
                    pred = self._predict(model, model_key, classifiers, calibration, network, defense,
                                         adv[(network, method, eps)])
                    acc[method.upper()] = float((pred == y).mean())
                    counts[method.upper()] = int(len(y))
                if p.attacks.methods:
                    attack_cols = [m.upper() for m in p.attacks.methods]
                    acc["STRONGEST"] = min(acc[c] for c in attack_cols)
                    counts["STRONGEST"] = int(len(y))
                rows.append(AccuracyRow(network, defense, eps, acc, counts))
        return rows

    def _index(self, model, model_key, train) -> LikelihoodIndex:
        from ..density import log_likelihoods

        key = content_key("index", {"model": model_key, "data": self.data_key()})
        values = self.cache.fetch("index", key, lambda: log_likelihoods(model, train.images),
                                  _save_array, _load_float)
        return LikelihoodIndex(values)

    def detection(self, model, model_key, train, test, classifiers, clf_keys, adv, grid) -> dict:
        p = self.plan
        index = self._index(model, model_key, train)
        clean = detect(index, model, test.images[:p.detection_size], "clean")
        out = {"index_size": index.n, "clean_n": len(clean), "clean_ks": ks_uniform(clean.p),
               "clean_median_p": float(np.median(clean.p)), "clean_mean_p": float(clean.p.mean()),
               "clean_mean_bpd": float(clean.bpd.mean()), "attacks": []}
        if not grid:
            return out
        target = "normal" if "normal" in classifiers else next(iter(classifiers))
        out["target"] = target
        for method, eps in grid:
            x_adv = adv[(target, method, eps)]
            raw = detect(index, model, x_adv, method)
            pur = detect(index, model, self.purified(model, model_key, x_adv, p.eps_defend), method)
            out["attacks"].append({
                "attack": method, "eps": int(eps), "n": len(raw),
                "auc": roc_curve(clean, raw).auc, "auc_purified": roc_curve(clean, pur).auc,
                "median_p": float(np.median(raw.p)), "median_p_purified": float(np.median(pur.p)),
                "mean_p": float(raw.p.mean()), "mean_p_purified": float(pur.p.mean()),
                "mean_bpd": float(raw.bpd.mean()), "mean_bpd_purified": float(pur.bpd.mean()),
            })
        return out

    def fig5(self, model, model_key, classifiers, clf_keys, test) -> dict:
        p = self.plan
        if p.fig5_size <= 0:
            return {}
        target = "normal" if "normal" in classifiers else next(iter(classifiers))
        x, y = test.images[:p.fig5_size], test.labels[:p.fig5_size]
        x_adv = self.adversarial(classifiers[target], clf_keys[target], x, y, "fgsm", p.fig5_eps)
        greedy = self.purified(model, model_key, x_adv, p.eps_defend)
        key = content_key("baseline", {"model": model_key, "images": images_key(x_adv), "eps": p.eps_defend,
                                       "steps": p.baseline_steps, "step": p.baseline_step_size})
        grad = self.cache.fetch("purified", key, lambda: purify_gradient_baseline(
            model, x_adv, p.eps_defend, p.baseline_steps, p.baseline_step_size), _save_array, _load_int)
        b_adv = bits_per_dimension_batch(model, x_adv)
        b_greedy = bits_per_dimension_batch(model, greedy)
        b_grad = bits_per_dimension_batch(model, grad)
        return {"n": int(len(x)), "eps": int(p.fig5_eps),
                "bpd_clean": float(bits_per_dimension_batch(model, x).mean()),
                "bpd_adversarial": float(b_adv.mean()), "bpd_greedy": float(b_greedy.mean()),
                "bpd_gradient": float(b_grad.mean()),
                "greedy_wins": float(((b_adv - b_greedy) > (b_adv - b_grad)).mean())}

    def fragile(self, model, classifiers, clf_keys, val, x, y) -> dict:
        p = self.plan
        if "normal" not in classifiers or p.fragile_rand_eps <= 0:
            return {}
        base = classifiers["normal"]
        xv = val.images[:p.calibration_size]
        seed = derive_seed(p.seed, "fragile")
        rand_val = atk.attack_rand(xv, p.fragile_rand_eps, derive_seed(p.seed, "fragile-calibration"))
        clean_bpd = bits_per_dimension_batch(model, xv)
        rand_bpd = bits_per_dimension_batch(model, rand_val)
        threshold = separating_threshold(clean_bpd, rand_bpd)
        frag = fragile_classifier(base, model, threshold, seed)
        x_rand = self.adversarial(base, clf_keys["normal"], x, y, "rand", p.fragile_rand_eps)
        return {"threshold": threshold, "rand_eps": int(p.fragile_rand_eps), "n": int(len(y)),
                "base_clean": base.accuracy(x, y), "fragile_clean": float((frag.predict(x) == y).mean()),
                "base_rand": base.accuracy(x_rand, y), "fragile_rand": float((frag.predict(x_rand) == y).mean()),
                "chance": 1.0 / base.n_classes}


def run_plan(plan: ExperimentPlan, cache: Optional[ArtifactCache] = None) -> ExperimentReport:
    try:
        return PlanRunner(plan, cache).run()
    except StageError:
        raise
    except PixelDefendError as exc:  # pragma: no cover - stages wrap their own errors
        raise StageError("plan", str(exc)) from exc
