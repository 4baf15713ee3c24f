"""Command-line front end and scenario runner."""

from .main import build_parser, fixture_manifest, main
from .scenario import (
    ScenarioParseError,
    ScenarioResult,
    ScenarioRunner,
    StepFailed,
    parse_scenario,
    run_scenario,
    run_scenario_text,
)

__all__ = [
    "ScenarioParseError",
    "ScenarioResult",
    "ScenarioRunner",
    "StepFailed",
    "build_parser",
    "fixture_manifest",
    "main",
    "parse_scenario",
    "run_scenario",
    "run_scenario_text",
]
