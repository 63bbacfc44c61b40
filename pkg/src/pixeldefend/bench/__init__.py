"""Experiment orchestration: plans, cached artifacts and reports."""

from .cache import ArtifactCache, content_key, default_cache_dir
from .plan import AttackGrid, DatasetSpec, ExperimentPlan, load_plan, small_plan
from .report import AccuracyRow, ExperimentReport, emit_report, markdown_table
from .runner import PlanRunner, derive_seed, run_plan, separating_threshold

__all__ = [
    "AccuracyRow", "ArtifactCache", "AttackGrid", "DatasetSpec", "ExperimentPlan", "ExperimentReport",
    "PlanRunner", "content_key", "default_cache_dir", "derive_seed", "emit_report", "load_plan",
    "markdown_table", "run_plan", "separating_threshold", "small_plan",
]
