"""Resource manager for disaggregated-datacenter slices.

A slice is a set of compute nodes plus pool devices (GPUs, NVMe) attached
to them over a PCIe-over-Ethernet fabric for the lifetime of one job.
"""

from .engine import Engine, EventKind, SlicePhase, run_scenario
from .fabric import FabricState
from .model import (ClusterConfig, DeviceKind, JobSpec, LatencyParams, Scenario, SliceSpec, TaskSpec,
                    Timeline, breakdown, check_feasible, parse_cluster_config, parse_job_spec,
                    parse_scenario)

__all__ = [
    "ClusterConfig", "DeviceKind", "Engine", "EventKind", "FabricState", "JobSpec", "LatencyParams",
    "Scenario", "SlicePhase", "SliceSpec", "TaskSpec", "Timeline", "breakdown", "check_feasible",
    "parse_cluster_config", "parse_job_spec", "parse_scenario", "run_scenario",
]
