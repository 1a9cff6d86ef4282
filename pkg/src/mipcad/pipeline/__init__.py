"""Configuration, fold planning and stage orchestration."""

from .config import PipelineConfig, dump_toml
from .folds import FoldPlan, assign_subsets, discover_subsets, make_fold_plan
from .runner import STAGES, Pipeline, StageResult, run_pipeline

__all__ = [
    "FoldPlan",
    "Pipeline",
    "PipelineConfig",
    "STAGES",
    "StageResult",
    "assign_subsets",
    "discover_subsets",
    "dump_toml",
    "make_fold_plan",
    "run_pipeline",
]
