"""Task execution backends for the RUNNING phase.

The simulated backend turns configured durations into completion times on
the virtual clock and never looks at the wall clock. The subprocess backend
runs real shell commands on this machine; the node a task is "placed" on is
only bookkeeping, exported to the command as ``NODE_ID``.
"""

from __future__ import annotations

import enum
import os
import signal
import subprocess
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from .model import TaskSpec, to_ms


class ExecutorError(RuntimeError):
    pass


class TaskStatus(str, enum.Enum):
    OK = "OK"
    FAILED = "FAILED"


@dataclass(frozen=True)
class TaskResult:
    task: str
    node_id: str
    started_ms: int
    ended_ms: int
    status: TaskStatus
    exit_detail: str = ""

    def __post_init__(self):
        if self.ended_ms < self.started_ms:
            raise ValueError("task ended before it started")

    @property
    def started_s(self) -> float:
        return self.started_ms / 1000

    @property
    def ended_s(self) -> float:
        return self.ended_ms / 1000


def execute_simulated(task: TaskSpec, now_ms: int, node_id: str = "") -> TaskResult:
    if task.duration_s is None:
        raise ExecutorError(f"task {task.name!r} has no duration_s; it needs the subprocess executor")
    dur = to_ms(task.duration_s)
    if task.timeout_s is not None and dur > to_ms(task.timeout_s):
        return TaskResult(task.name, node_id, now_ms, now_ms + to_ms(task.timeout_s),
                          TaskStatus.FAILED, "timeout")
    if task.fail:
        return TaskResult(task.name, node_id, now_ms, now_ms + dur, TaskStatus.FAILED, "injected failure")
    return TaskResult(task.name, node_id, now_ms, now_ms + dur, TaskStatus.OK, "")


def execute_subprocess(task: TaskSpec, env: Optional[dict] = None, started_ms: int = 0,
                       popen_hook: Optional[Callable[[subprocess.Popen], None]] = None) -> TaskResult:
    """Run ``task.command`` through the shell and wait for it.

    ``started_ms`` is the caller's clock reading at spawn; the returned
    interval is that plus the measured wall duration.
    """
    if task.command is None:
        raise ExecutorError(f"task {task.name!r} has no command")
    node_id = (env or {}).get("NODE_ID", "")
    full_env = dict(os.environ)
    full_env.update(env or {})
    t0 = time.monotonic()
    try:
        proc = subprocess.Popen(task.command, shell=True, env=full_env, start_new_session=True,
                                stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)
    except OSError as e:
        raise ExecutorError(f"spawn failed: {e}") from e
    if popen_hook:
        popen_hook(proc)
    try:
        _, err = proc.communicate(timeout=task.timeout_s)
    except subprocess.TimeoutExpired:
        kill_tree(proc)
        proc.communicate()
        elapsed = to_ms(time.monotonic() - t0)
        return TaskResult(task.name, node_id, started_ms, started_ms + elapsed, TaskStatus.FAILED, "timeout")
    elapsed = to_ms(time.monotonic() - t0)
    if proc.returncode == 0:
        return TaskResult(task.name, node_id, started_ms, started_ms + elapsed, TaskStatus.OK, "exit 0")
    detail = f"exit {proc.returncode}"
    tail = err.decode("utf-8", "replace").strip().splitlines()[-1:] if err else []
    if tail:
        detail += f": {tail[0]}"
    return TaskResult(task.name, node_id, started_ms, started_ms + elapsed, TaskStatus.FAILED, detail)


def kill_tree(proc: subprocess.Popen) -> None:
    # the shell's children share its session; take them all down
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except ProcessLookupError:
        pass


def gang_barrier(results: list[TaskResult]) -> tuple[int, bool]:
    """End of the RUNNING phase and whether the gang failed."""
    if not results:
        raise ExecutorError("gang barrier over zero tasks")
    end = max(r.ended_ms for r in results)
    failed = any(r.status is TaskStatus.FAILED for r in results)
    return end, failed


class SimulatedExecutor:
    synchronous = True

    def start(self, job_id: str, node_id: str, task: TaskSpec, now_ms: int, notify=None) -> TaskResult:
        return execute_simulated(task, now_ms, node_id)

    def cancel(self, job_id: str) -> None:
        pass


class SubprocessExecutor:
    """Runs each gang member on its own thread; results go to ``notify``.

    ``notify(job_id, result)`` is called from the worker thread, so the
    caller must hand it to its own ordered command channel.
    """

    synchronous = False

    def __init__(self, clock: Callable[[], int]):
        self._clock = clock
        self._procs: dict[str, list[subprocess.Popen]] = {}
        self._lock = threading.Lock()

    def start(self, job_id: str, node_id: str, task: TaskSpec, now_ms: int, notify=None) -> None:
        env = {"JOB_ID": job_id, "NODE_ID": node_id, "TASK_NAME": task.name}

        def track(proc):
            with self._lock:
                self._procs.setdefault(job_id, []).append(proc)

        def work():
            try:
                res = execute_subprocess(task, env, now_ms, popen_hook=track)
                # re-anchor to the engine clock so timeline arithmetic stays consistent
                res = TaskResult(res.task, node_id, now_ms, max(now_ms, self._clock()), res.status, res.exit_detail)
            except ExecutorError as e:
                res = TaskResult(task.name, node_id, now_ms, max(now_ms, self._clock()), TaskStatus.FAILED, str(e))
            notify(job_id, res)

        threading.Thread(target=work, name=f"task-{job_id}-{task.name}", daemon=True).start()

    def cancel(self, job_id: str) -> None:
        with self._lock:
            procs = self._procs.pop(job_id, [])
        for p in procs:
            if p.poll() is None:
                kill_tree(p)
