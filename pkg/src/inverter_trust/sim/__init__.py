"""Deterministic multi-actor simulation, adversary toolkit and benchmarks."""

from .bench import BenchReport, run_bench
from .clock import SimClock
from .scenario import ScenarioError, ScenarioReport, load_scenario, run_scenario

__all__ = ["BenchReport", "ScenarioError", "ScenarioReport", "SimClock", "load_scenario", "run_bench", "run_scenario"]
