"""Shared fixtures and the acceptance summary printed at the end of a run."""

import hashlib
import time

import pytest

from pixeldefend.bench import ArtifactCache, ExperimentPlan, default_cache_dir, emit_report, run_plan
from pixeldefend.bench.runner import MODEL_KINDS

_RESULTS = {}


def record(number, title, checks):
    """Store one acceptance criterion outcome; ``checks`` maps a label to (ok, detail)."""
    ok = all(passed for passed, _ in checks.values())
    detail = "; ".join(f"{label}: {'ok' if passed else 'FAILED'} ({info})"
                       for label, (passed, info) in checks.items())
    _RESULTS[number] = (ok, title, detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        ok, title, detail = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")


def sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class BenchRun:
    def __init__(self, report, out, seconds, cold):
        self.report, self.out, self.seconds, self.cold = report, out, seconds, cold


@pytest.fixture(scope="session")
def cache_root(tmp_path_factory):
    return default_cache_dir() or tmp_path_factory.mktemp("ptk-cache")


@pytest.fixture(scope="session")
def default_bench(cache_root, tmp_path_factory):
    """The default plan, run once per session and shared by the acceptance checks."""
    cache = ArtifactCache(cache_root)
    start = time.process_time()
    report = run_plan(ExperimentPlan(), cache)
    seconds = time.process_time() - start
    out = tmp_path_factory.mktemp("bench-first")
    emit_report(report, out)
    return BenchRun(report, out, seconds, cold=cache.hits == 0)


@pytest.fixture(scope="session")
def default_bench_again(default_bench, cache_root, tmp_path_factory):
    """A second execution that reuses only trained models and recomputes everything else."""
    report = run_plan(ExperimentPlan(), ArtifactCache(cache_root, kinds=MODEL_KINDS))
    out = tmp_path_factory.mktemp("bench-second")
    emit_report(report, out)
    return BenchRun(report, out, None, cold=False)
