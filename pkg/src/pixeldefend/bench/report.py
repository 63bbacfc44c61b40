"""Experiment report: accuracy matrix, detection summaries and provenance."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from ..data import round_half_away

FORMATS = ("csv", "json", "markdown")


@dataclass
class AccuracyRow:
    """Accuracy (fraction in [0, 1]) per column for one (network, defense, eps)."""

    network: str
    defense: str
    eps: Optional[int]
    accuracy: dict
    counts: dict

    def percent(self, column: str) -> int:
        return int(round_half_away(100.0 * self.accuracy[column]))


@dataclass
class ExperimentReport:
    columns: list
    rows: list
    detection: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)
    fig5: dict = field(default_factory=dict)
    fragile: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def row(self, network: str, defense: str, eps: Optional[int] = None) -> AccuracyRow:
        for r in self.rows:
            if r.network == network and r.defense == defense and (eps is None or r.eps == eps):
                return r
        raise KeyError((network, defense, eps))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        rows = [AccuracyRow(**r) for r in d["rows"]]
        return cls(d["columns"], rows, d.get("detection", {}), d.get("calibration", {}),
                   d.get("fig5", {}), d.get("fragile", {}), d.get("provenance", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        return cls.from_dict(json.loads(text))


def _has_eps(report: ExperimentReport) -> bool:
    return any(r.eps is not None for r in report.rows)


def table_header(report: ExperimentReport) -> list:
    head = ["network", "defense"] + (["eps"] if _has_eps(report) else []) + ["n"]
    return head + list(report.columns)


def table_rows(report: ExperimentReport) -> Iterable[list]:
    for r in report.rows:
        lead = [r.network, r.defense] + ([r.eps] if _has_eps(report) else [])
        n = min(r.counts.values()) if r.counts else 0
        yield lead + [n] + [r.percent(c) for c in report.columns]


def write_accuracy_csv(path, report: ExperimentReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table_header(report))
        for row in table_rows(report):
            w.writerow(row)


def write_detection_csv(path, report: ExperimentReport) -> None:
    keys = ["attack", "eps", "n", "auc", "auc_purified", "median_p", "median_p_purified",
            "mean_p", "mean_p_purified"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for entry in report.detection.get("attacks", []):
            w.writerow([entry[k] if isinstance(entry[k], (str, int)) else repr(float(entry[k])) for k in keys])


def markdown_table(report: ExperimentReport) -> str:
    header = table_header(report)
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in table_rows(report):
        lines.append("| " + " | ".join(str(v) for v in row) + " |")
    return "\n".join(lines) + "\n"


def emit_report(report: ExperimentReport, out_dir, formats=FORMATS) -> list:
    """Write the report in the requested formats; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "csv":
            write_accuracy_csv(out / "accuracy.csv", report)
            written.append(out / "accuracy.csv")
            if report.detection.get("attacks"):
                write_detection_csv(out / "detection.csv", report)
                written.append(out / "detection.csv")
        elif fmt == "json":
            (out / "report.json").write_text(report.to_json())
            written.append(out / "report.json")
        elif fmt == "markdown":
            (out / "report.md").write_text(_markdown_document(report))
            written.append(out / "report.md")
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    return written


def _markdown_document(report: ExperimentReport) -> str:
    parts = ["# Accuracy (%)\n", markdown_table(report)]
    det = report.detection
    if det:
        parts.append("\n# Detection\n")
        parts.append(f"Clean test p-values: KS distance to uniform {det['clean_ks']:.4f} "
                     f"(n = {det['clean_n']}).\n\n")
        if det.get("attacks"):
            parts.append("| attack | eps | AUC | AUC after purification | median p |\n|---|---|---|---|---|\n")
            for e in det["attacks"]:
                parts.append(f"| {e['attack']} | {e['eps']} | {e['auc']:.3f} | {e['auc_purified']:.3f} "
                             f"| {e['median_p']:.4f} |\n")
    if report.fig5:
        f = report.fig5
        parts.append("\n# Purification vs gradient ascent\n")
        parts.append(f"Mean bits/dim: adversarial {f['bpd_adversarial']:.4f}, greedy {f['bpd_greedy']:.4f}, "
                     f"gradient {f['bpd_gradient']:.4f}; greedy wins on {100 * f['greedy_wins']:.0f}% "
                     f"of {f['n']} images.\n")
    return "".join(parts)
