"""Discrete-event core: FIFO gang scheduler and the slice lifecycle.

One ``Engine`` owns all mutable state and is driven either by stepping the
virtual clock (``advance``/``step``/``run``) or, in wall-clock mode, by
:class:`slicerm.loop.EngineLoop`. The engine itself is single-threaded.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

from .executor import SimulatedExecutor, TaskResult, TaskStatus, gang_barrier
from .fabric import FabricState
from .model import (PHASES, ClusterConfig, DeviceKind, JobSpec, SliceSpec, Timeline,
                    check_feasible, natural_key, to_ms)


class EngineError(RuntimeError):
    pass


class InfeasibleJob(EngineError):
    pass


class UnknownJob(EngineError, KeyError):
    pass


class DuplicateJob(EngineError):
    pass


class SliceActive(EngineError):
    pass


class InvariantViolation(AssertionError):
    pass


class SlicePhase(str, enum.Enum):
    QUEUED = "QUEUED"
    ATTACHING = "ATTACHING"
    LAUNCHING_MACHINES = "LAUNCHING_MACHINES"
    PREPARING = "PREPARING"
    LAUNCHING_TASKS = "LAUNCHING_TASKS"
    RUNNING = "RUNNING"
    DETACHING = "DETACHING"
    DESTROYING = "DESTROYING"
    DONE = "DONE"
    FAILED = "FAILED"

    @property
    def order(self) -> int:
        return _PHASE_ORDER.index(self)


_PHASE_ORDER = list(SlicePhase)
# lifecycle phases in execution order, paired with their timeline name
LIFECYCLE = tuple(zip(_PHASE_ORDER[1:8], PHASES))
_TIMELINE_NAME = dict(LIFECYCLE)
_ACTIVE = frozenset(p for p, _ in LIFECYCLE)


class EventKind(str, enum.Enum):
    SUBMITTED = "SUBMITTED"
    ALLOCATED = "ALLOCATED"
    ATTACH_DEVICE_START = "ATTACH_DEVICE_START"
    ATTACH_DEVICE_END = "ATTACH_DEVICE_END"
    LAUNCH_MACHINE_START = "LAUNCH_MACHINE_START"
    LAUNCH_MACHINE_END = "LAUNCH_MACHINE_END"
    PREPARE_TASK_START = "PREPARE_TASK_START"
    PREPARE_TASK_END = "PREPARE_TASK_END"
    LAUNCH_TASK_START = "LAUNCH_TASK_START"
    LAUNCH_TASK_END = "LAUNCH_TASK_END"
    RUN_TASK_START = "RUN_TASK_START"
    RUN_TASK_END = "RUN_TASK_END"
    DETACH_DEVICE_START = "DETACH_DEVICE_START"
    DETACH_DEVICE_END = "DETACH_DEVICE_END"
    DESTROY_MACHINE_START = "DESTROY_MACHINE_START"
    DESTROY_MACHINE_END = "DESTROY_MACHINE_END"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"


def _start_kind(phase: SlicePhase) -> EventKind:
    return EventKind(_TIMELINE_NAME[phase].upper() + "_START")


def _end_kind(phase: SlicePhase) -> EventKind:
    return EventKind(_TIMELINE_NAME[phase].upper() + "_END")


@dataclass(frozen=True)
class Event:
    seq: int
    time_ms: int
    job_id: str
    kind: EventKind
    detail: str = ""

    @property
    def time_s(self) -> float:
        return self.time_ms / 1000

    def to_doc(self) -> dict:
        return {"time_s": self.time_s, "job_id": self.job_id, "kind": self.kind.value, "detail": self.detail}

    def to_json(self) -> str:
        return json.dumps(self.to_doc())


@dataclass
class SliceRuntime:
    job: JobSpec
    phase: SlicePhase = SlicePhase.QUEUED
    assigned_nodes: list[str] = field(default_factory=list)
    assigned_devices: dict[str, list[str]] = field(default_factory=dict)
    intervals: dict[str, list[int]] = field(default_factory=dict)
    failure_reason: Optional[str] = None
    cancel_requested: bool = False
    submitted_ms: int = 0
    allocated_ms: Optional[int] = None
    # RUNNING bookkeeping
    results: list[TaskResult] = field(default_factory=list)
    pending: int = 0
    run_token: int = 0

    @property
    def job_id(self) -> str:
        return self.job.id

    @property
    def finished(self) -> bool:
        return self.phase in (SlicePhase.DONE, SlicePhase.FAILED)

    def device_ids(self) -> list[str]:
        return [d for n in self.assigned_nodes for d in self.assigned_devices.get(n, [])]


@dataclass(frozen=True)
class PassRecord:
    """What one scheduling pass saw and decided; used by property tests."""

    time_ms: int
    queue: tuple[str, ...]
    free_nodes: int
    free_devices: dict
    allocated: tuple[str, ...]


class SharedLink:
    """Fair-share link: k concurrent transfers each progress at rate/k.

    Remaining volumes are exact fractions of a gigabit; completion instants
    are rounded up to the next millisecond.
    """

    def __init__(self, gbps: float):
        self.rate = Fraction(str(gbps))  # Gbit per second
        self.flows: dict = {}
        self.last_ms = 0
        self.version = 0

    def _progress(self, now_ms: int) -> None:
        if self.flows and now_ms > self.last_ms:
            done = self.rate / len(self.flows) * Fraction(now_ms - self.last_ms, 1000)
            for k in self.flows:
                self.flows[k] -= done
        self.last_ms = now_ms

    def add(self, key, gbit: Fraction, now_ms: int) -> None:
        self._progress(now_ms)
        self.flows[key] = Fraction(gbit)
        self.version += 1

    def pop_done(self, now_ms: int) -> list:
        self._progress(now_ms)
        done = [k for k, v in self.flows.items() if v <= 0]
        for k in done:
            del self.flows[k]
        if done:
            self.version += 1
        return done

    def next_completion_ms(self) -> Optional[int]:
        if not self.flows:
            return None
        least = min(self.flows.values())
        wait = math.ceil(least * len(self.flows) * 1000 / self.rate)
        return self.last_ms + max(wait, 0)


class Engine:
    def __init__(self, cluster: ClusterConfig, executor=None, strict_fifo: bool = False,
                 seed: int = 0, record_passes: bool = False,
                 on_event: Optional[Callable[[Event], None]] = None):
        self.cluster = cluster
        self.params = cluster.fabric_params
        self.executor = executor or SimulatedExecutor()
        self.strict_fifo = strict_fifo
        # nothing in the engine draws random numbers; the seed is recorded so
        # logs from seeded scenario generators stay attributable
        self.seed = seed
        self.fabric = FabricState(cluster)
        self.link = SharedLink(cluster.link_gbps)
        self.image_gbit = Fraction(str(cluster.image_gb)) * 8
        self.clock_ms = 0
        self.queue: list[str] = []
        self.slices: dict[str, SliceRuntime] = {}
        self.events: list[Event] = []
        self.pass_log: Optional[list[PassRecord]] = [] if record_passes else None
        self.on_event = on_event
        self.task_notify: Optional[Callable[[str, TaskResult], None]] = None
        self._heap: list = []
        self._seq = itertools.count()
        self._ids = itertools.count(1)
        self._free_nodes = {n.id for n in cluster.nodes}
        self._free_devices = {d.id for d in cluster.pool}
        self._class_of = {d.id: d.device_class for d in cluster.pool}
        self._ms = {name: to_ms(getattr(self.params, name)) for name in
                    ("machine_boot_s", "prepare_s", "launch_per_device_s", "destroy_s")}

    # --- event plumbing -------------------------------------------------

    def _push(self, at_ms: int, fn, *args) -> None:
        heapq.heappush(self._heap, (at_ms, next(self._seq), fn, args))

    def _emit(self, job_id: str, kind: EventKind, detail: str = "") -> None:
        if self.events and self.events[-1].time_ms > self.clock_ms:
            raise InvariantViolation("event time regressed")
        ev = Event(len(self.events), self.clock_ms, job_id, kind, detail)
        self.events.append(ev)
        if self.on_event:
            self.on_event(ev)

    def next_event_ms(self) -> Optional[int]:
        return self._heap[0][0] if self._heap else None

    def step(self) -> bool:
        """Process the next pending event; False when nothing is pending."""
        if not self._heap:
            return False
        at, _, fn, args = heapq.heappop(self._heap)
        self.clock_ms = at
        fn(*args)
        return True

    def advance(self, until_ms: int) -> None:
        if until_ms < self.clock_ms:
            raise EngineError(f"time regression: {until_ms} < {self.clock_ms}")
        while self._heap and self._heap[0][0] <= until_ms:
            self.step()
        self.clock_ms = until_ms

    def run(self, check: Optional[Callable[["Engine"], None]] = None) -> None:
        """Step until no events remain, optionally checking after each one."""
        while self.step():
            if check:
                check(self)

    @property
    def idle(self) -> bool:
        return not self._heap and not any(s.phase in _ACTIVE for s in self.slices.values())

    # --- commands -------------------------------------------------------

    def submit(self, job: JobSpec) -> str:
        verdict = check_feasible(job.slice, self.cluster)
        if not verdict:
            raise InfeasibleJob(verdict.reason)
        if job.id is None:
            job_id = f"job-{next(self._ids):04d}"
            while job_id in self.slices:
                job_id = f"job-{next(self._ids):04d}"
            job = job.with_id(job_id)
        elif job.id in self.slices:
            raise DuplicateJob(f"job id {job.id!r} already submitted")
        self.slices[job.id] = SliceRuntime(job, submitted_ms=self.clock_ms)
        self.queue.append(job.id)
        self._emit(job.id, EventKind.SUBMITTED, _slice_label(job.slice))
        self.schedule_pass()
        return job.id

    def cancel(self, job_id: str) -> bool:
        """Cancel a job. Queued jobs fail at once; active slices tear down
        after the current phase (RUNNING is cut short). Returns False if the
        job already finished or is already tearing down."""
        rt = self._get(job_id)
        if rt.phase is SlicePhase.QUEUED:
            self.queue.remove(job_id)
            rt.phase = SlicePhase.FAILED
            rt.failure_reason = "cancelled"
            self._emit(job_id, EventKind.FAILED, "cancelled")
            self.schedule_pass()
            return True
        if rt.finished or rt.phase in (SlicePhase.DETACHING, SlicePhase.DESTROYING) or rt.cancel_requested:
            return False
        rt.cancel_requested = True
        rt.failure_reason = rt.failure_reason or "cancelled"
        if rt.phase is SlicePhase.RUNNING:
            rt.run_token += 1
            self.executor.cancel(job_id)
            self._phase_done(rt, SlicePhase.RUNNING)
        return True

    def task_finished(self, job_id: str, result: TaskResult) -> None:
        """Deliver an asynchronous executor result at the current clock."""
        rt = self.slices.get(job_id)
        if rt is None:
            return
        if result.ended_ms != self.clock_ms:
            result = TaskResult(result.task, result.node_id, min(result.started_ms, self.clock_ms),
                                self.clock_ms, result.status, result.exit_detail)
        self._task_done(rt, rt.run_token, result)

    # --- scheduling -----------------------------------------------------

    def schedule_pass(self) -> list[str]:
        """Walk the queue in submission order and start every job whose whole
        gang fits right now. Unsatisfiable jobs are skipped unless
        ``strict_fifo`` is set, in which case the first one blocks the rest."""
        before = tuple(self.queue)
        free_nodes = len(self._free_nodes)
        free_devs = self._free_by_class()
        allocated = []
        for job_id in list(self.queue):
            rt = self.slices[job_id]
            plan = self._plan(rt.job.slice)
            if plan is None:
                if self.strict_fifo:
                    break
                continue
            self.queue.remove(job_id)
            self._allocate(rt, *plan)
            allocated.append(job_id)
        if self.pass_log is not None:
            self.pass_log.append(PassRecord(self.clock_ms, before, free_nodes,
                                            {str(k): v for k, v in free_devs.items()}, tuple(allocated)))
        return allocated

    def _free_by_class(self) -> dict[DeviceKind, int]:
        out: dict[DeviceKind, int] = {}
        for d in self._free_devices:
            out[self._class_of[d]] = out.get(self._class_of[d], 0) + 1
        return out

    def _plan(self, spec: SliceSpec):
        if spec.node_count > len(self._free_nodes):
            return None
        by_class: dict[DeviceKind, list[str]] = {}
        for d in sorted(self._free_devices, key=natural_key):
            by_class.setdefault(self._class_of[d], []).append(d)
        for cls_, need in spec.demand().items():
            if len(by_class.get(cls_, [])) < need:
                return None
        nodes = sorted(self._free_nodes, key=natural_key)[:spec.node_count]
        devices: dict[str, list[str]] = {n: [] for n in nodes}
        for n in nodes:
            for cls_, count in spec.devices_per_node:
                for _ in range(count):
                    devices[n].append(by_class[cls_].pop(0))
        k = 0
        for cls_, count in spec.slice_devices:
            for _ in range(count):
                devices[nodes[k % len(nodes)]].append(by_class[cls_].pop(0))
                k += 1
        return nodes, devices

    def _allocate(self, rt: SliceRuntime, nodes: list[str], devices: dict[str, list[str]]) -> None:
        rt.assigned_nodes = nodes
        rt.assigned_devices = devices
        rt.allocated_ms = self.clock_ms
        self._free_nodes.difference_update(nodes)
        for devs in devices.values():
            self._free_devices.difference_update(devs)
        detail = " ".join(f"{n}[{','.join(devices[n])}]" for n in nodes)
        self._emit(rt.job_id, EventKind.ALLOCATED, detail)
        self._begin(rt, SlicePhase.ATTACHING)
        ends = [self.fabric.attach(d, n, self.clock_ms) for n in nodes for d in devices[n]]
        self._push(max(ends, default=self.clock_ms), self._phase_done, rt, SlicePhase.ATTACHING)

    # --- lifecycle ------------------------------------------------------

    def _begin(self, rt: SliceRuntime, phase: SlicePhase) -> None:
        rt.phase = phase
        rt.intervals[_TIMELINE_NAME[phase]] = [self.clock_ms, self.clock_ms]
        self._emit(rt.job_id, _start_kind(phase))

    def _phase_done(self, rt: SliceRuntime, phase: SlicePhase, detail: str = "") -> None:
        if rt.phase is not phase:
            return
        rt.intervals[_TIMELINE_NAME[phase]][1] = self.clock_ms
        self._emit(rt.job_id, _end_kind(phase), detail)
        nxt = _PHASE_ORDER[phase.order + 1]
        if rt.cancel_requested and nxt.order < SlicePhase.DETACHING.order:
            # skipped phases still get (empty) intervals so the timeline stays contiguous
            while nxt is not SlicePhase.DETACHING:
                self._begin(rt, nxt)
                self._emit(rt.job_id, _end_kind(nxt), "skipped: cancelled")
                nxt = _PHASE_ORDER[nxt.order + 1]
        if nxt is SlicePhase.DONE:
            self._release(rt)
            return
        self._begin(rt, nxt)
        getattr(self, "_start_" + nxt.name.lower())(rt)

    def _start_launching_machines(self, rt: SliceRuntime) -> None:
        # download the image over the shared link, then boot
        rt.pending = len(rt.assigned_nodes)
        for n in rt.assigned_nodes:
            if self.image_gbit == 0:
                self._push(self.clock_ms + self._ms["machine_boot_s"], self._node_ready, rt)
            else:
                self.link.add((rt.job_id, n), self.image_gbit, self.clock_ms)
        self._arm_link()

    def _arm_link(self) -> None:
        at = self.link.next_completion_ms()
        if at is not None:
            self._push(at, self._link_tick, self.link.version)

    def _link_tick(self, version: int) -> None:
        if version != self.link.version:
            return
        for job_id, _node in self.link.pop_done(self.clock_ms):
            self._push(self.clock_ms + self._ms["machine_boot_s"], self._node_ready, self.slices[job_id])
        self._arm_link()

    def _node_ready(self, rt: SliceRuntime) -> None:
        rt.pending -= 1
        if rt.pending == 0:
            self._phase_done(rt, SlicePhase.LAUNCHING_MACHINES)

    def _start_preparing(self, rt: SliceRuntime) -> None:
        self._push(self.clock_ms + self._ms["prepare_s"], self._phase_done, rt, SlicePhase.PREPARING)

    def _start_launching_tasks(self, rt: SliceRuntime) -> None:
        per_node = max(len(rt.assigned_devices[n]) for n in rt.assigned_nodes)
        at = self.clock_ms + self._ms["launch_per_device_s"] * per_node
        self._push(at, self._phase_done, rt, SlicePhase.LAUNCHING_TASKS)

    def _start_running(self, rt: SliceRuntime) -> None:
        rt.results = []
        rt.run_token += 1
        token = rt.run_token
        for task in rt.job.tasks:
            node = rt.assigned_nodes[task.node_index]
            res = self.executor.start(rt.job_id, node, task, self.clock_ms, notify=self.task_notify)
            if self.executor.synchronous:
                self._push(res.ended_ms, self._task_done, rt, token, res)

    def _task_done(self, rt: SliceRuntime, token: int, res: TaskResult) -> None:
        if token != rt.run_token or rt.phase is not SlicePhase.RUNNING:
            return
        rt.results.append(res)
        if len(rt.results) < len(rt.job.tasks):
            return
        _, failed = gang_barrier(rt.results)
        if failed and rt.failure_reason is None:
            bad = [r for r in rt.results if r.status is TaskStatus.FAILED]
            rt.failure_reason = "task failed: " + ", ".join(f"{r.task} ({r.exit_detail})" for r in bad)
        detail = " ".join(f"{r.task}@{r.node_id}:{r.status.value}" for r in rt.results)
        self._phase_done(rt, SlicePhase.RUNNING, detail)

    def _start_detaching(self, rt: SliceRuntime) -> None:
        ends = [self.fabric.detach(d, n, self.clock_ms)
                for n in rt.assigned_nodes for d in rt.assigned_devices[n]]
        self._push(max(ends, default=self.clock_ms), self._phase_done, rt, SlicePhase.DETACHING)

    def _start_destroying(self, rt: SliceRuntime) -> None:
        self._push(self.clock_ms + self._ms["destroy_s"], self._phase_done, rt, SlicePhase.DESTROYING)

    def _release(self, rt: SliceRuntime) -> None:
        self._free_nodes.update(rt.assigned_nodes)
        self._free_devices.update(rt.device_ids())
        if rt.failure_reason:
            rt.phase = SlicePhase.FAILED
            self._emit(rt.job_id, EventKind.FAILED, rt.failure_reason)
        else:
            rt.phase = SlicePhase.DONE
            self._emit(rt.job_id, EventKind.COMPLETED)
        self.schedule_pass()

    # --- queries --------------------------------------------------------

    def _get(self, job_id: str) -> SliceRuntime:
        try:
            return self.slices[job_id]
        except KeyError:
            raise UnknownJob(job_id) from None

    def timeline_of(self, job_id: str) -> Timeline:
        rt = self._get(job_id)
        if not rt.finished:
            raise SliceActive(f"{job_id} is still {rt.phase.value}")
        if rt.allocated_ms is None:
            raise SliceActive(f"{job_id} was never allocated")
        return Timeline(tuple(tuple(rt.intervals[p]) for p in PHASES))

    def status(self, job_id: str) -> dict:
        rt = self._get(job_id)
        return {
            "job_id": job_id,
            "phase": rt.phase.value,
            "queue_position": self.queue.index(job_id) if rt.phase is SlicePhase.QUEUED else None,
            "assigned_nodes": list(rt.assigned_nodes),
            "assigned_devices": {n: list(d) for n, d in rt.assigned_devices.items()},
            "timestamps": {p: {"start_s": s / 1000, "end_s": e / 1000 if (p != _TIMELINE_NAME.get(rt.phase)) else None}
                           for p, (s, e) in rt.intervals.items()},
            "failure_reason": rt.failure_reason,
        }

    def cluster_view(self) -> dict:
        owner_node = {}
        owner_job = {}
        for rt in self.slices.values():
            if rt.phase in _ACTIVE:
                for n in rt.assigned_nodes:
                    owner_node[n] = rt.job_id
                    for d in rt.assigned_devices[n]:
                        owner_job[d] = rt.job_id
        attached = self.fabric.snapshot()
        devices = []
        for d in self.cluster.pool:
            state = "attached" if d.id in attached else ("reserved" if d.id in owner_job else "free")
            devices.append({"id": d.id, "class": str(d.device_class), "state": state,
                            "node": attached.get(d.id), "job_id": owner_job.get(d.id)})
        return {
            "clock_s": self.clock_ms / 1000,
            "nodes": [{"id": n.id, "cpu_cores": n.cpu_cores, "memory_gb": n.memory_gb,
                       "job_id": owner_node.get(n.id)} for n in self.cluster.nodes],
            "devices": devices,
            "attachments": attached,
        }

    def check_invariants(self) -> None:
        """Raise InvariantViolation if exclusivity, conservation or gang
        atomicity does not hold right now."""
        active = [rt for rt in self.slices.values() if rt.phase in _ACTIVE]
        held_nodes: list[str] = []
        held_devs: list[str] = []
        for rt in active:
            spec = rt.job.slice
            if len(rt.assigned_nodes) != spec.node_count:
                raise InvariantViolation(f"{rt.job_id}: partial node allocation")
            counts: dict[DeviceKind, int] = {}
            for d in rt.device_ids():
                counts[self._class_of[d]] = counts.get(self._class_of[d], 0) + 1
            if counts != spec.demand():
                raise InvariantViolation(f"{rt.job_id}: partial device allocation")
            held_nodes += rt.assigned_nodes
            held_devs += rt.device_ids()
        if len(set(held_nodes)) != len(held_nodes) or len(set(held_devs)) != len(held_devs):
            raise InvariantViolation("resource held by two slices")
        if self._free_nodes & set(held_nodes) or self._free_devices & set(held_devs):
            raise InvariantViolation("resource both free and held")
        attached = self.fabric.snapshot()
        for d, n in attached.items():
            owner = next((rt for rt in active if n in rt.assigned_devices and d in rt.assigned_devices[n]), None)
            if owner is None:
                raise InvariantViolation(f"{d} attached to {n} outside any slice")
        reserved = len(held_devs) - len(attached)
        if len(self._free_devices) + reserved + len(attached) != len(self.cluster.pool):
            raise InvariantViolation("device conservation broken")
        if len(self._free_nodes) + len(held_nodes) != len(self.cluster.nodes):
            raise InvariantViolation("node conservation broken")


def _slice_label(spec: SliceSpec) -> str:
    parts = [f"{spec.node_count}node"]
    parts += [f"{n}x{c}" for c, n in spec.devices_per_node]
    parts += [f"+{n}x{c}" for c, n in spec.slice_devices]
    return " ".join(parts)


def run_scenario(scenario, executor=None, record_passes: bool = False,
                 check: Optional[Callable[[Engine], None]] = None) -> Engine:
    """Submit every scenario job at its time and simulate to quiescence."""
    eng = Engine(scenario.cluster, executor=executor, strict_fifo=scenario.strict_fifo,
                 seed=scenario.seed, record_passes=record_passes)
    for at_s, job in scenario.jobs:
        at = to_ms(at_s)
        while eng.next_event_ms() is not None and eng.next_event_ms() <= at:
            eng.step()
            if check:
                check(eng)
        eng.advance(at)
        eng.submit(job)
        if check:
            check(eng)
    eng.run(check)
    return eng
