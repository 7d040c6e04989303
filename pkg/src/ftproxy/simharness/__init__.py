"""Discrete-event simulation harness for replicated deployments."""
from .latency import LatencyModel, Purpose, ks_distance, min_of_n_cdf_oracle, percentile, stream
from .report import RunRecord, RunReport, emit_report, read_records
from .runner import SimCluster, run_scenario
from .scenario import Scenario, ScenarioError, load_scenario, parse_scenario

__all__ = [
    "LatencyModel", "Purpose", "ks_distance", "min_of_n_cdf_oracle", "percentile", "stream",
    "RunRecord", "RunReport", "emit_report", "read_records",
    "SimCluster", "run_scenario",
    "Scenario", "ScenarioError", "load_scenario", "parse_scenario",
]
