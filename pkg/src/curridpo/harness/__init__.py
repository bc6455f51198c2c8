"""Experiment runner, evaluation and metrics emission."""
from .evaluation import (EvalReport, adjusted_win_rate, build_report, decompose_by_cell, emit_report,
                         implicit_reward_margin, implicit_reward_margins, load_report)
from .metrics import HEADER, MetricsRecord, emit_metrics, read_metrics
from .runner import MODES, RunConfig, RunResult, prepare, make_plan, run_baseline, run_curriculum, train

__all__ = [
    "EvalReport", "adjusted_win_rate", "build_report", "decompose_by_cell", "emit_report",
    "implicit_reward_margin", "implicit_reward_margins", "load_report", "HEADER", "MetricsRecord",
    "emit_metrics", "read_metrics", "MODES", "RunConfig", "RunResult", "prepare", "make_plan",
    "run_baseline", "run_curriculum", "train",
]
