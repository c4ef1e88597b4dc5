"""The reference testbed and its experiment scenarios.

The JSON files next to this module are the bundled scenarios the CLI runs
by name; they are regenerated by ``scripts/calibrate.py`` from the builders
below.
"""

from __future__ import annotations

import json
from importlib import resources
from typing import Optional

from ..model import (ClusterConfig, Device, DeviceKind, JobKind, JobSpec, Kind, LatencyParams,
                     NodeSpec, Scenario, SliceSpec, TaskSpec, latency_from_doc, parse_scenario)

P100 = DeviceKind(Kind.GPU, "P100")
P40 = DeviceKind(Kind.GPU, "P40")
SSD750 = DeviceKind(Kind.NVME, "SSD750")

# run-task seconds measured on the testbed
MNIST_RUN_S = {"4node-1gpu": 366.36, "2node-2gpu": 237.31, "1node-4gpu": 104.57}

# not reported; four times the 1node-4gpu run, i.e. one GPU doing the work of four
SHARING_P40_RUN_S = 418.28

BUNDLED = ("mnist-3configs", "imagenet-2configs", "sharing-4slices")


def calibrated_params() -> LatencyParams:
    doc = json.loads(resources.files(__package__).joinpath("calibrated_params.json").read_text("utf-8"))
    return latency_from_doc(doc)


def reference_cluster(params: Optional[LatencyParams] = None) -> ClusterConfig:
    """Four 10-core nodes, 4xP100 + 1xP40 + 4xSSD750, GbE, 3 GB image."""
    pool = [Device(f"gpu{i}", P100) for i in range(4)]
    pool.append(Device("gpu4", P40))
    pool += [Device(f"nvme{i}", SSD750) for i in range(4)]
    return ClusterConfig(
        nodes=tuple(NodeSpec(f"n{i}", 10, 128) for i in range(4)),
        pool=tuple(pool),
        link_gbps=1.0,
        image_gb=3.0,
        fabric_params=params or LatencyParams(),
    )


def gang_job(job_id: str, spec: SliceSpec, run_s: float, prefix: str = "rank") -> JobSpec:
    n = spec.node_count
    tasks = tuple(TaskSpec(f"{prefix}{i}", duration_s=run_s, node_index=i) for i in range(n))
    kind = JobKind.SINGLE_NODE if n == 1 else JobKind.MULTI_NODE
    return JobSpec(job_id, spec, tasks, kind)


def mnist_scenario(params: Optional[LatencyParams] = None) -> Scenario:
    jobs = tuple((0.0, gang_job(f"mnist-{label}", SliceSpec.from_label(label), run))
                 for label, run in MNIST_RUN_S.items())
    return Scenario(reference_cluster(params), jobs, name="mnist-3configs")


def imagenet_scenario(run_s: dict[str, float], params: Optional[LatencyParams] = None) -> Scenario:
    """ResNet-50 runs, each slice also holding two NVMe SSDs for the dataset."""
    jobs = tuple(
        (0.0, gang_job(f"imagenet-{label}",
                       SliceSpec.from_label(label, slice_devices=((SSD750, 2),)), run))
        for label, run in run_s.items()
    )
    return Scenario(reference_cluster(params), jobs, name="imagenet-2configs")


def sharing_scenario(params: Optional[LatencyParams] = None) -> Scenario:
    jobs = (
        (0.0, gang_job("Slice1", SliceSpec.from_label("2node-2gpu"), MNIST_RUN_S["2node-2gpu"])),
        (0.0, gang_job("Slice2", SliceSpec.from_label("2node-2gpu"), MNIST_RUN_S["2node-2gpu"])),
        (0.0, gang_job("Slice3", SliceSpec.from_label("1node-1gpu", gpu_model="P40"), SHARING_P40_RUN_S)),
        (0.0, gang_job("Slice4", SliceSpec.from_label("4node-1gpu"), MNIST_RUN_S["4node-1gpu"])),
    )
    return Scenario(reference_cluster(params), jobs, name="sharing-4slices")


def load_bundled(name: str) -> Scenario:
    if name not in BUNDLED:
        raise KeyError(f"no bundled scenario {name!r}; choose from {', '.join(BUNDLED)}")
    return parse_scenario(resources.files(__package__).joinpath(f"{name}.json").read_text("utf-8"))
