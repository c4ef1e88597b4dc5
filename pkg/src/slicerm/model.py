"""Domain types, document parsing and timeline arithmetic.

Everything in here is a plain value: no clocks, no mutable engine state.
Documents are UTF-8 JSON with snake_case field names; ``render_*`` is the
inverse of the matching ``parse_*``.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, Optional


class ParseError(ValueError):
    """Malformed document (not JSON, or wrong shape)."""


class ValidationError(ValueError):
    """Well-formed document that violates a domain invariant."""


class TimelineError(ValueError):
    pass


def to_ms(seconds: float) -> int:
    """Seconds to integer milliseconds, rounding half up."""
    return int((Decimal(str(seconds)) * 1000).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def natural_key(ident: str) -> tuple:
    # "n2" < "n10"
    return tuple(int(p) if p.isdigit() else p for p in re.split(r"(\d+)", ident))


class Kind(str, enum.Enum):
    GPU = "GPU"
    NVME = "NVME"


@dataclass(frozen=True, order=True)
class DeviceKind:
    kind: Kind
    model: str

    def __post_init__(self):
        if not self.model:
            raise ValidationError("device model must be non-empty")

    def __str__(self):
        return f"{self.kind.value}/{self.model}"


@dataclass(frozen=True)
class Device:
    id: str
    device_class: DeviceKind


@dataclass(frozen=True)
class NodeSpec:
    id: str
    cpu_cores: int = 10
    memory_gb: int = 128

    def __post_init__(self):
        if self.cpu_cores < 1 or self.memory_gb < 1:
            raise ValidationError(f"node {self.id}: cpu_cores and memory_gb must be >= 1")


@dataclass(frozen=True)
class LatencyParams:
    """Per-operation latencies of the slice lifecycle, in seconds.

    The defaults are the output of ``scripts/calibrate.py``; see
    ``slicerm/scenarios/calibrated_params.json``.
    """

    attach_s: float = 2.0
    detach_s: float = 2.0
    machine_boot_s: float = 70.0
    prepare_s: float = 10.0
    launch_per_device_s: float = 20.0
    destroy_s: float = 35.0
    bandwidth_ratio: float = 0.2

    def __post_init__(self):
        for name in ("attach_s", "detach_s", "machine_boot_s", "prepare_s",
                     "launch_per_device_s", "destroy_s"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if not 0 < self.bandwidth_ratio <= 1:
            raise ValidationError("bandwidth_ratio must be in (0, 1]")


@dataclass(frozen=True)
class ClusterConfig:
    nodes: tuple[NodeSpec, ...]
    pool: tuple[Device, ...]
    link_gbps: float = 1.0
    image_gb: float = 3.0
    fabric_params: LatencyParams = field(default_factory=LatencyParams)

    def __post_init__(self):
        if not self.nodes:
            raise ValidationError("cluster needs at least one node")
        ids = [n.id for n in self.nodes] + [d.id for d in self.pool]
        seen = set()
        for i in ids:
            if i in seen:
                raise ValidationError(f"duplicate id {i!r}")
            seen.add(i)
        if not self.link_gbps > 0:
            raise ValidationError("link_gbps must be > 0")
        if self.image_gb < 0:
            raise ValidationError("image_gb must be >= 0")

    def inventory(self) -> dict[DeviceKind, int]:
        inv: dict[DeviceKind, int] = {}
        for d in self.pool:
            inv[d.device_class] = inv.get(d.device_class, 0) + 1
        return inv

    def device(self, device_id: str) -> Device:
        for d in self.pool:
            if d.id == device_id:
                return d
        raise KeyError(device_id)


@dataclass(frozen=True)
class SliceSpec:
    """Slice request: ``node_count`` nodes with identical device sets.

    ``slice_devices`` are requested once per slice and spread round-robin
    over the slice's nodes, lowest node first (two NVMe on a 4-node slice
    land on nodes 0 and 1).
    """

    node_count: int
    devices_per_node: tuple[tuple[DeviceKind, int], ...] = ()
    slice_devices: tuple[tuple[DeviceKind, int], ...] = ()

    def __post_init__(self):
        if self.node_count < 1:
            raise ValidationError("node_count must be >= 1")
        for group in (self.devices_per_node, self.slice_devices):
            classes = [c for c, _ in group]
            if len(set(classes)) != len(classes):
                raise ValidationError("device class listed twice in one request")
            if any(n < 0 for _, n in group):
                raise ValidationError("device counts must be >= 0")

    @classmethod
    def from_label(cls, label: str, gpu_model: str = "P100", slice_devices=()) -> "SliceSpec":
        """Build from the ``<n>node-<m>gpu`` naming convention."""
        m = re.fullmatch(r"(\d+)node-(\d+)gpu", label)
        if not m:
            raise ValidationError(f"bad slice label {label!r}")
        n, g = int(m.group(1)), int(m.group(2))
        per_node = ((DeviceKind(Kind.GPU, gpu_model), g),) if g else ()
        return cls(n, per_node, tuple(slice_devices))

    def demand(self) -> dict[DeviceKind, int]:
        """Total devices of each class this slice needs."""
        out: dict[DeviceKind, int] = {}
        for c, n in self.devices_per_node:
            out[c] = out.get(c, 0) + n * self.node_count
        for c, n in self.slice_devices:
            out[c] = out.get(c, 0) + n
        return {c: n for c, n in out.items() if n}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    duration_s: Optional[float] = None
    command: Optional[str] = None
    node_index: int = 0
    timeout_s: Optional[float] = None
    # simulated mode only: the task ends FAILED after duration_s
    fail: bool = False

    def __post_init__(self):
        if (self.duration_s is None) == (self.command is None):
            raise ValidationError(f"task {self.name!r}: exactly one of duration_s/command required")
        if self.duration_s is not None and self.duration_s < 0:
            raise ValidationError(f"task {self.name!r}: negative duration")
        if self.node_index < 0:
            raise ValidationError(f"task {self.name!r}: negative node_index")
        if self.timeout_s is not None and self.timeout_s < 0:
            raise ValidationError(f"task {self.name!r}: negative timeout")


class JobKind(str, enum.Enum):
    SINGLE_NODE = "SINGLE_NODE"
    MULTI_NODE = "MULTI_NODE"


@dataclass(frozen=True)
class JobSpec:
    id: Optional[str]
    slice: SliceSpec
    tasks: tuple[TaskSpec, ...]
    kind: JobKind = JobKind.MULTI_NODE

    def __post_init__(self):
        if not self.tasks:
            raise ValidationError("job has no tasks")
        n = self.slice.node_count
        if any(t.node_index >= n for t in self.tasks):
            raise ValidationError("task node_index outside the slice")
        if self.kind is JobKind.SINGLE_NODE and n != 1:
            raise ValidationError("SINGLE_NODE job must request exactly one node")
        if self.kind is JobKind.MULTI_NODE:
            if len(self.tasks) != n or sorted(t.node_index for t in self.tasks) != list(range(n)):
                raise ValidationError("MULTI_NODE job needs exactly one task per node")

    def with_id(self, job_id: str) -> "JobSpec":
        return JobSpec(job_id, self.slice, self.tasks, self.kind)


# --- Timeline ---------------------------------------------------------------

PHASES = (
    "attach_device",
    "launch_machine",
    "prepare_task",
    "launch_task",
    "run_task",
    "detach_device",
    "destroy_machine",
)
CONSTRUCTION_DESTRUCTION = ("attach_device", "launch_machine", "detach_device", "destroy_machine")


@dataclass(frozen=True)
class Timeline:
    """Seven phase intervals in integer milliseconds of simulation time."""

    intervals: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.intervals) != len(PHASES):
            raise TimelineError(f"expected {len(PHASES)} phases, got {len(self.intervals)}")
        prev_end = None
        for name, (start, end) in zip(PHASES, self.intervals):
            if end < start:
                raise TimelineError(f"{name}: end before start")
            if prev_end is not None and start != prev_end:
                raise TimelineError(f"{name}: not contiguous with previous phase")
            prev_end = end

    @classmethod
    def from_durations(cls, durations_s, start_s: float = 0.0) -> "Timeline":
        t = to_ms(start_s)
        ivs = []
        for d in durations_s:
            ivs.append((t, t + to_ms(d)))
            t += to_ms(d)
        return cls(tuple(ivs))

    def __getitem__(self, phase: str) -> tuple[int, int]:
        return self.intervals[PHASES.index(phase)]

    @property
    def start_ms(self) -> int:
        return self.intervals[0][0]

    @property
    def end_ms(self) -> int:
        return self.intervals[-1][1]

    def duration_ms(self, phase: str) -> int:
        s, e = self[phase]
        return e - s

    def to_doc(self) -> dict:
        return {p: {"start_s": s / 1000, "end_s": e / 1000} for p, (s, e) in zip(PHASES, self.intervals)}

    @classmethod
    def from_doc(cls, doc: dict) -> "Timeline":
        try:
            return cls(tuple((to_ms(doc[p]["start_s"]), to_ms(doc[p]["end_s"])) for p in PHASES))
        except (KeyError, TypeError) as e:
            raise ParseError(f"bad timeline document: {e}") from e


@dataclass(frozen=True)
class Breakdown:
    durations_ms: dict[str, int]
    makespan_ms: int
    construction_destruction_ms: int

    @property
    def overhead_fraction(self) -> float:
        return self.construction_destruction_ms / self.makespan_ms

    def duration_s(self, phase: str) -> float:
        return self.durations_ms[phase] / 1000


def breakdown(t: Timeline) -> Breakdown:
    """Phase durations and the construction+destruction share of makespan."""
    # re-validate: Timeline may have been built with object.__new__ tricks
    Timeline(t.intervals)
    durations = {p: t.duration_ms(p) for p in PHASES}
    makespan = t.end_ms - t.start_ms
    if makespan == 0:
        raise TimelineError("zero makespan: overhead fraction undefined")
    cd = sum(durations[p] for p in CONSTRUCTION_DESTRUCTION)
    return Breakdown(durations, makespan, cd)


# --- Feasibility ------------------------------------------------------------

@dataclass(frozen=True)
class Feasibility:
    feasible: bool
    reason: str = ""

    def __bool__(self):
        return self.feasible


def check_feasible(spec: SliceSpec, cluster: ClusterConfig) -> Feasibility:
    if spec.node_count > len(cluster.nodes):
        return Feasibility(False, f"node_count exceeds cluster ({spec.node_count} > {len(cluster.nodes)})")
    inv = cluster.inventory()
    for cls_, need in spec.demand().items():
        have = inv.get(cls_, 0)
        if need > have:
            return Feasibility(False, f"{cls_} demand exceeds pool ({need} > {have})")
    return Feasibility(True)


# --- Documents --------------------------------------------------------------

def _loads(text) -> Any:
    if isinstance(text, (bytes, bytearray)):
        text = text.decode("utf-8")
    try:
        return json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ParseError(str(e)) from e


def _req(doc: dict, key: str, types, where: str):
    if not isinstance(doc, dict):
        raise ParseError(f"{where}: expected an object")
    if key not in doc:
        raise ParseError(f"{where}: missing field {key!r}")
    v = doc[key]
    if types is float:
        types = (int, float)
    if not isinstance(v, types) or isinstance(v, bool) and types is not bool:
        raise ParseError(f"{where}.{key}: wrong type {type(v).__name__}")
    return v


def _opt(doc: dict, key: str, types, where: str, default=None):
    if doc.get(key) is None:
        return default
    return _req(doc, key, types, where)


def _device_kind(doc, where) -> DeviceKind:
    kind = _req(doc, "kind", str, where)
    try:
        k = Kind(kind)
    except ValueError:
        raise ParseError(f"{where}: unknown device kind {kind!r}") from None
    return DeviceKind(k, _req(doc, "model", str, where))


def _device_counts(items, where) -> tuple[tuple[DeviceKind, int], ...]:
    if not isinstance(items, list):
        raise ParseError(f"{where}: expected a list")
    return tuple((_device_kind(d, where), _req(d, "count", int, where)) for d in items)


def _render_counts(group) -> list:
    return [{"kind": c.kind.value, "model": c.model, "count": n} for c, n in group]


def latency_from_doc(doc: dict, base: Optional[LatencyParams] = None) -> LatencyParams:
    base = base or LatencyParams()
    if not isinstance(doc, dict):
        raise ParseError("fabric_params: expected an object")
    known = set(LatencyParams.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ParseError(f"fabric_params: unknown fields {sorted(unknown)}")
    vals = {k: getattr(base, k) for k in known}
    for k in doc:
        vals[k] = _req(doc, k, float, "fabric_params")
    return LatencyParams(**vals)


def latency_to_doc(p: LatencyParams) -> dict:
    return {k: getattr(p, k) for k in LatencyParams.__dataclass_fields__}


def cluster_from_doc(doc: dict) -> ClusterConfig:
    nodes = _req(doc, "nodes", list, "cluster")
    pool = _req(doc, "pool", list, "cluster")
    return ClusterConfig(
        nodes=tuple(
            NodeSpec(_req(n, "id", str, "node"), _opt(n, "cpu_cores", int, "node", 10),
                     _opt(n, "memory_gb", int, "node", 128))
            for n in nodes
        ),
        pool=tuple(
            Device(_req(d, "id", str, "device"), _device_kind(_req(d, "class", dict, "device"), "device.class"))
            for d in pool
        ),
        link_gbps=_opt(doc, "link_gbps", float, "cluster", 1.0),
        image_gb=_opt(doc, "image_gb", float, "cluster", 3.0),
        fabric_params=latency_from_doc(doc.get("fabric_params") or {}),
    )


def cluster_to_doc(c: ClusterConfig) -> dict:
    return {
        "nodes": [{"id": n.id, "cpu_cores": n.cpu_cores, "memory_gb": n.memory_gb} for n in c.nodes],
        "pool": [
            {"id": d.id, "class": {"kind": d.device_class.kind.value, "model": d.device_class.model}}
            for d in c.pool
        ],
        "link_gbps": c.link_gbps,
        "image_gb": c.image_gb,
        "fabric_params": latency_to_doc(c.fabric_params),
    }


def slice_from_doc(doc: dict) -> SliceSpec:
    per_node = doc.get("devices_per_node", []) if isinstance(doc, dict) else None
    if per_node and all(isinstance(x, list) for x in per_node):
        # explicit per-node lists: accepted only when all nodes agree
        groups = [dict(_device_counts(x, "slice.devices_per_node")) for x in per_node]
        if any(g != groups[0] for g in groups):
            raise ValidationError("heterogeneous per-node device requests are not supported")
        if len(groups) != _req(doc, "node_count", int, "slice"):
            raise ValidationError("per-node device list length differs from node_count")
        per_node = [{"kind": c.kind.value, "model": c.model, "count": n} for c, n in groups[0].items()]
    return SliceSpec(
        node_count=_req(doc, "node_count", int, "slice"),
        devices_per_node=_device_counts(per_node, "slice.devices_per_node"),
        slice_devices=_device_counts(doc.get("slice_devices", []), "slice.slice_devices"),
    )


def slice_to_doc(s: SliceSpec) -> dict:
    doc = {"node_count": s.node_count, "devices_per_node": _render_counts(s.devices_per_node)}
    if s.slice_devices:
        doc["slice_devices"] = _render_counts(s.slice_devices)
    return doc


def job_from_doc(doc: dict) -> JobSpec:
    tasks = _req(doc, "tasks", list, "job")
    kind = _opt(doc, "kind", str, "job", "MULTI_NODE")
    try:
        kind = JobKind(kind)
    except ValueError:
        raise ParseError(f"job: unknown kind {kind!r}") from None
    parsed = []
    for i, t in enumerate(tasks):
        parsed.append(TaskSpec(
            name=_req(t, "name", str, "task"),
            duration_s=_opt(t, "duration_s", float, "task"),
            command=_opt(t, "command", str, "task"),
            node_index=_opt(t, "node_index", int, "task", i if kind is JobKind.MULTI_NODE else 0),
            timeout_s=_opt(t, "timeout_s", float, "task"),
            fail=_opt(t, "fail", bool, "task", False),
        ))
    return JobSpec(
        id=_opt(doc, "id", str, "job"),
        slice=slice_from_doc(_req(doc, "slice", dict, "job")),
        tasks=tuple(parsed),
        kind=kind,
    )


def job_to_doc(j: JobSpec) -> dict:
    tasks = []
    for t in j.tasks:
        d: dict[str, Any] = {"name": t.name}
        if t.duration_s is not None:
            d["duration_s"] = t.duration_s
        if t.command is not None:
            d["command"] = t.command
        d["node_index"] = t.node_index
        if t.timeout_s is not None:
            d["timeout_s"] = t.timeout_s
        if t.fail:
            d["fail"] = True
        tasks.append(d)
    doc: dict[str, Any] = {}
    if j.id is not None:
        doc["id"] = j.id
    doc.update(kind=j.kind.value, slice=slice_to_doc(j.slice), tasks=tasks)
    return doc


def parse_cluster_config(text) -> ClusterConfig:
    return cluster_from_doc(_loads(text))


def render_cluster_config(c: ClusterConfig) -> str:
    return json.dumps(cluster_to_doc(c), indent=2)


def parse_job_spec(text) -> JobSpec:
    return job_from_doc(_loads(text))


def render_job_spec(j: JobSpec) -> str:
    return json.dumps(job_to_doc(j), indent=2)


# --- Scenario ---------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    cluster: ClusterConfig
    jobs: tuple[tuple[float, JobSpec], ...] = ()
    seed: int = 0
    strict_fifo: bool = False
    name: str = ""

    def __post_init__(self):
        times = [t for t, _ in self.jobs]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValidationError("submit times must be nondecreasing")
        if any(t < 0 for t in times):
            raise ValidationError("negative submit time")


def parse_scenario(text) -> Scenario:
    doc = _loads(text)
    cluster = cluster_from_doc(_req(doc, "cluster", dict, "scenario"))
    if doc.get("latency"):
        # scenario-level override on top of the cluster's own params
        cluster = ClusterConfig(cluster.nodes, cluster.pool, cluster.link_gbps, cluster.image_gb,
                                latency_from_doc(doc["latency"], cluster.fabric_params))
    jobs = []
    for entry in _opt(doc, "jobs", list, "scenario", []):
        jobs.append((_opt(entry, "submit_time_s", float, "scenario.jobs", 0.0),
                     job_from_doc(_req(entry, "job", dict, "scenario.jobs"))))
    return Scenario(
        cluster=cluster,
        jobs=tuple(jobs),
        seed=_opt(doc, "seed", int, "scenario", 0),
        strict_fifo=_opt(doc, "strict_fifo", bool, "scenario", False),
        name=_opt(doc, "name", str, "scenario", ""),
    )


def render_scenario(s: Scenario) -> str:
    doc = {
        "name": s.name,
        "seed": s.seed,
        "strict_fifo": s.strict_fifo,
        "cluster": cluster_to_doc(s.cluster),
        "jobs": [{"submit_time_s": t, "job": job_to_doc(j)} for t, j in s.jobs],
    }
    return json.dumps(doc, indent=2)
