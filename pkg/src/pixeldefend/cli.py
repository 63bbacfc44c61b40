"""Command-line interface: ``pixeldefend <subcommand> [options]``.

Exit codes: 0 on success, 1 on usage errors (bad flags, missing config),
2 on runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import attacks as atk
from .autograd import checkpoint
from .bench import ArtifactCache, ExperimentPlan, default_cache_dir, emit_report, load_plan, run_plan
from .classifier import load_classifier, save_classifier, train_adversarial, train_classifier
from .data import LabeledDataset, desk_corpus, save_dataset, write_idx
from .density import bits_per_dimension_batch, load_density, log_likelihoods, save_density, train_density
from .detector import build_index, detect, ks_uniform, write_report_csv
from .errors import ConfigurationError, FormatError, PixelDefendError
from .purifier import DefenseConfig, purify

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

logger = logging.getLogger("pixeldefend")


class UsageError(Exception):
    def __init__(self, message: str, help_text: str = ""):
        super().__init__(message)
        self.help_text = help_text


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_help())


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=default, help="global seed (overrides the config)")
    p.add_argument("--config", default=default, help="JSON experiment plan supplying defaults")
    p.add_argument("--out", default=default, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)
    return p


def build_parser() -> _Parser:
    parser = _Parser(prog="pixeldefend", parents=[_global_flags(False)],
                     description="Likelihood-based detection and purification of adversarial images.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    common = [_global_flags(True)]

    p = sub.add_parser("gen-data", parents=common, help="generate the synthetic desk corpus")
    p.add_argument("--idx", action="store_true", help="also write IDX image/label files per split")

    p = sub.add_parser("train-density", parents=common, help="train the autoregressive density model")
    p.add_argument("--data", required=True, help="training split archive (.ptk)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("train-classifier", parents=common, help="train a classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--defense", default="normal", choices=["normal", "label_smoothing", "adv_fgsm", "adv_bim"])
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("attack", parents=common, help="attack a classifier on an image archive")
    p.add_argument("--classifier", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", required=True, choices=list(atk.METHODS))
    p.add_argument("--eps", type=int, required=True)
    p.add_argument("--limit", type=int, help="attack only the first N images")

    p = sub.add_parser("score", parents=common, help="log-likelihood and bits/dim per image")
    p.add_argument("--density", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("detect", parents=common, help="permutation-test p-values against the training set")
    p.add_argument("--density", required=True)
    p.add_argument("--train", required=True, help="training split archive used for the index")
    p.add_argument("--data", required=True)
    p.add_argument("--source", default=None, help="source tag written to the report")

    p = sub.add_parser("purify", parents=common, help="purify an image archive")
    p.add_argument("--density", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eps-defend", type=int, default=None)
    p.add_argument("--adaptive-tau", type=float, default=None, help="skip images with bits/dim below tau")
    p.add_argument("--baseline", choices=["none", "gradient_ascent"], default="none")

    sub.add_parser("bench", parents=common, help="run an experiment plan and write reports")
    return parser


# -- helpers ---------------------------------------------------------------

def _plan(args) -> ExperimentPlan:
    if args.config is None:
        plan = ExperimentPlan()
    else:
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        plan = load_plan(args.config)
    if args.seed is not None:
        plan = dataclasses.replace(plan, seed=args.seed)
    return plan


def _out(args, plan: Optional[ExperimentPlan] = None) -> Path:
    out = args.out or (plan.output if plan is not None else None) or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _read_archive(path) -> tuple:
    """Images and labels from a dataset or adversarial-batch archive."""
    if not Path(path).is_file():
        raise FileNotFoundError(f"no such archive: {path}")
    tensors, meta = checkpoint.load(path)
    kind = meta.get("kind")
    if kind == "dataset":
        return tensors["images"].astype(np.int64), tensors["labels"].astype(np.int64), meta
    if kind == "adversarial_batch":
        return tensors["perturbed"].astype(np.int64), tensors["labels"].astype(np.int64), meta
    raise FormatError(f"{path}: expected a dataset or adversarial batch archive, found {kind!r}")


def _read_dataset(path, split: str = "train") -> LabeledDataset:
    images, labels, meta = _read_archive(path)
    return LabeledDataset(images, labels, split=meta.get("split", split), seed=int(meta.get("seed", 0)),
                          n_classes=int(meta.get("n_classes", 0)) or int(labels.max(initial=0)) + 1)


# -- subcommands -----------------------------------------------------------

def cmd_gen_data(args) -> int:
    plan = _plan(args)
    d = plan.dataset
    out = _out(args, plan)
    corpus = desk_corpus(plan.seed, d.side, d.n_classes, d.train, d.validation, d.test)
    for split, ds in corpus.items():
        save_dataset(out / f"{split}.ptk", ds)
        if args.idx:
            write_idx(out / f"{split}-images.idx", out / f"{split}-labels.idx", ds)
        print(f"{split}: {len(ds)} images -> {out / f'{split}.ptk'}")
    return EXIT_OK


def cmd_train_density(args) -> int:
    plan = _plan(args)
    cfg = plan.density
    overrides = {k: v for k, v in {"epochs": args.epochs, "depth": args.depth, "width": args.width,
                                   "learning_rate": args.lr, "seed": args.seed}.items() if v is not None}
    cfg = dataclasses.replace(cfg, **overrides)
    model = train_density(_read_dataset(args.data), cfg)
    path = _out(args, plan) / "density.ptk"
    save_density(path, model)
    print(f"density model -> {path} (final train loss {model.epoch_losses[-1] / np.log(2):.4f} bits/dim)")
    return EXIT_OK


def cmd_train_classifier(args) -> int:
    plan = _plan(args)
    overrides = {k: v for k, v in {"epochs": args.epochs, "seed": args.seed}.items() if v is not None}
    cfg = dataclasses.replace(plan.classifier, **overrides)
    data = _read_dataset(args.data)
    if args.defense == "normal":
        clf = train_classifier(data, cfg)
    elif args.defense == "label_smoothing":
        clf = train_classifier(data, cfg, label_smoothing=plan.label_smoothing)
    else:
        clf = train_adversarial(data, cfg, args.defense[4:], plan.adversarial_delta)
    path = _out(args, plan) / f"classifier_{args.defense}.ptk"
    save_classifier(path, clf)
    print(f"classifier [{args.defense}] -> {path} (train accuracy {clf.accuracy(data.images, data.labels):.4f})")
    return EXIT_OK


def cmd_attack(args) -> int:
    plan = _plan(args)
    clf = load_classifier(args.classifier)
    images, labels, _ = _read_archive(args.data)
    if args.limit is not None:
        images, labels = images[:args.limit], labels[:args.limit]
    g = plan.attacks
    cfg = atk.AttackConfig(args.method, args.eps, seed=plan.seed, max_iter=g.deepfool_max_iter,
                           overshoot=g.deepfool_overshoot, kappa=g.cw_kappa, steps=g.cw_steps,
                           step_size=g.cw_step_size)
    batch = atk.run_attack(clf, images, labels, cfg)
    path = _out(args, plan) / f"attack_{args.method}_{args.eps}.ptk"
    atk.save_batch(path, batch)
    print(f"{args.method} eps={args.eps}: accuracy {np.mean(batch.pred_clean == labels):.4f} -> "
          f"{np.mean(batch.pred_adv == labels):.4f} on {len(labels)} images -> {path}")
    return EXIT_OK


def cmd_score(args) -> int:
    plan = _plan(args)
    model = load_density(args.density)
    images, _, _ = _read_archive(args.data)
    ll = log_likelihoods(model, images)
    bpd = bits_per_dimension_batch(model, images)
    path = _out(args, plan) / "scores.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "log_likelihood", "bpd"])
        for i, (a, b) in enumerate(zip(ll, bpd)):
            w.writerow([i, repr(float(a)), repr(float(b))])
    print(f"mean bits/dim {bpd.mean():.4f} over {len(bpd)} images -> {path}")
    return EXIT_OK


def cmd_detect(args) -> int:
    plan = _plan(args)
    model = load_density(args.density)
    train, _, _ = _read_archive(args.train)
    images, _, meta = _read_archive(args.data)
    source = args.source or meta.get("config", {}).get("method") or meta.get("split", "input")
    report = detect(build_index(model, train), model, images, source)
    path = _out(args, plan) / "detection.csv"
    write_report_csv(path, [report])
    ks = ks_uniform(report.p) if len(report) else float("nan")
    print(f"{source}: mean p {report.p.mean():.4f}, median p {np.median(report.p):.4f}, "
          f"KS to uniform {ks:.4f} over {len(report)} images -> {path}")
    return EXIT_OK


def cmd_purify(args) -> int:
    plan = _plan(args)
    model = load_density(args.density)
    images, labels, meta = _read_archive(args.data)
    eps = args.eps_defend if args.eps_defend is not None else plan.eps_defend
    if args.adaptive_tau is not None:
        cfg = DefenseConfig(eps_defend=eps, mode="adaptive", tau=args.adaptive_tau, skip=plan.adaptive_skip,
                            baseline=args.baseline)
    else:
        cfg = DefenseConfig(eps_defend=eps, baseline=args.baseline, baseline_steps=plan.baseline_steps,
                            baseline_step_size=plan.baseline_step_size)
    out_images = purify(model, images, cfg)
    path = _out(args, plan) / "purified.ptk"
    save_dataset(path, LabeledDataset(out_images, labels, split=meta.get("split", "test"), seed=plan.seed,
                                      levels=model.levels, n_classes=int(meta.get("n_classes", 0))))
    before = bits_per_dimension_batch(model, images).mean()
    after = bits_per_dimension_batch(model, out_images).mean()
    print(f"purified {len(images)} images (eps_defend={eps}): bits/dim {before:.4f} -> {after:.4f} -> {path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    plan = _plan(args)
    out = _out(args, plan)
    report = run_plan(plan, ArtifactCache(default_cache_dir()))
    for path in emit_report(report, out):
        print(path)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train-density": cmd_train_density, "train-classifier": cmd_train_classifier,
    "attack": cmd_attack, "score": cmd_score, "detect": cmd_detect, "purify": cmd_purify, "bench": cmd_bench,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config is not None and not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
    except UsageError as exc:
        print(f"pixeldefend: error: {exc}", file=sys.stderr)
        if exc.help_text:
            print(exc.help_text, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"pixeldefend: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"pixeldefend: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PixelDefendError, OSError, KeyError, ValueError) as exc:
        print(f"pixeldefend: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
