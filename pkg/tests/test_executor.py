import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from slicerm.executor import (ExecutorError, SubprocessExecutor, TaskResult, TaskStatus, execute_simulated,
                              execute_subprocess, gang_barrier)
from slicerm.model import TaskSpec


def test_simulated_completion():
    r = execute_simulated(TaskSpec("t", duration_s=104.57), 50_000)
    assert r.ended_ms == 154_570 and r.status is TaskStatus.OK


def test_simulated_zero_duration():
    r = execute_simulated(TaskSpec("t", duration_s=0), 7)
    assert r.started_ms == r.ended_ms == 7


def test_simulated_rejects_command_task():
    with pytest.raises(ExecutorError):
        execute_simulated(TaskSpec("t", command="true"), 0)


def test_simulated_timeout_and_failure():
    r = execute_simulated(TaskSpec("t", duration_s=10, timeout_s=4), 0)
    assert (r.status, r.ended_ms, r.exit_detail) == (TaskStatus.FAILED, 4000, "timeout")
    r = execute_simulated(TaskSpec("t", duration_s=10, fail=True), 0)
    assert (r.status, r.ended_ms) == (TaskStatus.FAILED, 10_000)


def test_subprocess_true():
    r = execute_subprocess(TaskSpec("t", command="true"))
    assert r.status is TaskStatus.OK
    assert r.ended_ms - r.started_ms < 500


def test_subprocess_false():
    r = execute_subprocess(TaskSpec("t", command="false"))
    assert r.status is TaskStatus.FAILED and r.exit_detail.startswith("exit 1")


@pytest.mark.slow
def test_subprocess_sleep_duration():
    r = execute_subprocess(TaskSpec("t", command="sleep 2"))
    assert r.status is TaskStatus.OK
    assert 1500 <= r.ended_ms - r.started_ms <= 2500


def test_subprocess_timeout():
    r = execute_subprocess(TaskSpec("t", command="sleep 5", timeout_s=0.2))
    assert r.status is TaskStatus.FAILED and r.exit_detail == "timeout"
    assert r.ended_ms - r.started_ms < 2000


def test_subprocess_environment():
    cmd = 'test "$JOB_ID/$NODE_ID/$TASK_NAME" = "j1/n3/rank3"'
    r = execute_subprocess(TaskSpec("rank3", command=cmd), {"JOB_ID": "j1", "NODE_ID": "n3", "TASK_NAME": "rank3"})
    assert r.status is TaskStatus.OK and r.node_id == "n3"


def test_subprocess_rejects_duration_task():
    with pytest.raises(ExecutorError):
        execute_subprocess(TaskSpec("t", duration_s=1))


def test_subprocess_executor_notifies():
    got = []
    done = threading.Event()
    ex = SubprocessExecutor(clock=lambda: 42)

    def notify(job_id, res):
        got.append((job_id, res))
        done.set()

    ex.start("j", "n0", TaskSpec("t", command="exit 3"), 0, notify)
    assert done.wait(5)
    (job_id, res), = got
    assert job_id == "j" and res.status is TaskStatus.FAILED and res.ended_ms == 42


def _res(end, status=TaskStatus.OK):
    return TaskResult("t", "n", 0, end, status)


def test_gang_barrier_max():
    assert gang_barrier([_res(100), _res(98), _res(102), _res(97)]) == (102, False)


def test_gang_barrier_single():
    assert gang_barrier([_res(5)]) == (5, False)


def test_gang_barrier_failure():
    rs = [_res(100), _res(98, TaskStatus.FAILED), _res(102), _res(97)]
    assert gang_barrier(rs) == (102, True)


@given(st.lists(st.integers(0, 10**7), min_size=1, max_size=16))
def test_running_duration_is_max_of_gang(ends):
    assert gang_barrier([_res(e) for e in ends])[0] == max(ends)


def test_task_result_invariant():
    with pytest.raises(ValueError):
        TaskResult("t", "n", 5, 4, TaskStatus.OK)
