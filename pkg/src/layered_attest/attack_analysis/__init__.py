"""Minimal adversary schedules against a layered measurement graph."""

from .instances import random_instance
from .model import (
    QUERY_AT_END,
    QUERY_AT_MEASUREMENT,
    WINDOW_BOOT_BOUNDARY,
    WINDOW_UNRESTRICTED,
    AdversarySpec,
    AnalysisError,
    AnalysisInput,
    AttackTrace,
    CardinalityRule,
    GraphFormatError,
    MeasurementGraph,
    MsEvent,
    UnknownComponent,
    measurement_passes,
    multiset_key,
    parse_analysis_text,
    render_graph,
    render_spec,
)
from .oracle import InstanceTooLarge, brute_force_oracle
from .search import (
    AblationReport,
    AblationRow,
    BudgetTooLarge,
    check_trace,
    constraint_ablation,
    find_attacks,
    render_attacks,
)

__all__ = [name for name in dir() if not name.startswith("_")]
