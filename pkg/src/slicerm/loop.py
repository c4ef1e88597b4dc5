"""Ordered command channel around an :class:`Engine`.

All engine access goes through :meth:`EngineLoop.call`, which runs the
callable on the loop thread in arrival order and returns its result (or
re-raises its exception). In ``wall`` mode the loop also moves the engine
clock forward with real time and runs tasks through the subprocess executor.
"""

from __future__ import annotations

import queue
import threading
import time
from concurrent.futures import Future
from typing import Callable, TypeVar

from .engine import Engine
from .executor import SubprocessExecutor
from .model import ClusterConfig

T = TypeVar("T")

SIM = "sim"
WALL = "wall"


class EngineLoop:
    def __init__(self, cluster: ClusterConfig, mode: str = SIM, strict_fifo: bool = False, seed: int = 0):
        if mode not in (SIM, WALL):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self._commands: queue.Queue = queue.Queue()
        self._t0 = time.monotonic()
        executor = SubprocessExecutor(self._wall_ms) if mode == WALL else None
        self.engine = Engine(cluster, executor=executor, strict_fifo=strict_fifo, seed=seed)
        self.engine.task_notify = self._on_task_result
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="engine-loop", daemon=True)
        self._thread.start()

    def _wall_ms(self) -> int:
        return int((time.monotonic() - self._t0) * 1000)

    def _on_task_result(self, job_id, result) -> None:
        # worker threads never touch the engine directly
        self._commands.put((lambda eng: eng.task_finished(job_id, result), None))

    def _catch_up(self) -> None:
        if self.mode == WALL:
            now = self._wall_ms()
            if now > self.engine.clock_ms:
                self.engine.advance(now)

    def _run(self) -> None:
        while not self._stop.is_set():
            timeout = None
            if self.mode == WALL:
                nxt = self.engine.next_event_ms()
                timeout = 0.05 if nxt is None else max(0.0, min(0.05, (nxt - self._wall_ms()) / 1000))
            try:
                fn, fut = self._commands.get(timeout=timeout)
            except queue.Empty:
                self._catch_up()
                continue
            if fn is None:
                break
            self._catch_up()
            try:
                result = fn(self.engine)
            except BaseException as e:  # delivered to the caller
                if fut is not None:
                    fut.set_exception(e)
                continue
            if fut is not None:
                fut.set_result(result)

    def call(self, fn: Callable[[Engine], T], timeout: float | None = 30.0) -> T:
        fut: Future = Future()
        self._commands.put((fn, fut))
        return fut.result(timeout=timeout)

    def wait_idle(self, poll_s: float = 0.05, timeout: float | None = None) -> None:
        """Block until the engine has no pending events and no active slice."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self.call(lambda eng: eng.idle):
            if self.mode == SIM:
                self.call(lambda eng: eng.run())
                continue
            if deadline is not None and time.monotonic() > deadline:
                raise TimeoutError("engine did not become idle")
            time.sleep(poll_s)

    def close(self) -> None:
        self._stop.set()
        self._commands.put((None, None))
        self._thread.join(timeout=5)
