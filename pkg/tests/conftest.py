import pytest
from hypothesis import strategies as st

from slicerm.model import (ClusterConfig, Device, DeviceKind, JobKind, JobSpec, Kind, LatencyParams,
                           NodeSpec, Scenario, SliceSpec, TaskSpec)
from slicerm.scenarios import reference_cluster

P100 = DeviceKind(Kind.GPU, "P100")
P40 = DeviceKind(Kind.GPU, "P40")
SSD = DeviceKind(Kind.NVME, "SSD750")
CLASSES = (P100, P40, SSD)


@pytest.fixture
def cluster():
    return reference_cluster()


def gang(job_id, n, per_node=(), run=100.0, slice_devices=(), fail=()):
    tasks = tuple(TaskSpec(f"t{i}", duration_s=run, node_index=i, fail=i in fail) for i in range(n))
    return JobSpec(job_id, SliceSpec(n, tuple(per_node), tuple(slice_devices)), tasks,
                   JobKind.SINGLE_NODE if n == 1 else JobKind.MULTI_NODE)


def small_cluster(nodes=1, devices=(), **params):
    pool = tuple(Device(f"d{i}", c) for i, c in enumerate(devices))
    return ClusterConfig(tuple(NodeSpec(f"n{i}") for i in range(nodes)), pool,
                         link_gbps=params.pop("link_gbps", 1.0), image_gb=params.pop("image_gb", 3.0),
                         fabric_params=LatencyParams(**params))


# --- hypothesis strategies shared by property suites ---------------------

latency_params = st.builds(
    LatencyParams,
    attach_s=st.integers(0, 10), detach_s=st.integers(0, 10), machine_boot_s=st.integers(0, 30),
    prepare_s=st.integers(0, 5), launch_per_device_s=st.integers(0, 5), destroy_s=st.integers(0, 10),
)


@st.composite
def clusters(draw):
    n_nodes = draw(st.integers(1, 4))
    devs = draw(st.lists(st.sampled_from(CLASSES), max_size=6))
    return ClusterConfig(
        tuple(NodeSpec(f"n{i}") for i in range(n_nodes)),
        tuple(Device(f"dev{i}", c) for i, c in enumerate(devs)),
        link_gbps=draw(st.sampled_from([0.5, 1.0, 10.0])),
        image_gb=draw(st.sampled_from([0.0, 0.25, 1.0, 3.0])),
        fabric_params=draw(latency_params),
    )


@st.composite
def feasible_job(draw, cluster, job_id):
    inv = cluster.inventory()
    n = draw(st.integers(1, len(cluster.nodes)))
    per_node = []
    for cls_ in sorted(inv):
        k = draw(st.integers(0, inv[cls_] // n))
        if k:
            per_node.append((cls_, k))
    extra = []
    for cls_ in sorted(inv):
        left = inv[cls_] - n * dict(per_node).get(cls_, 0)
        k = draw(st.integers(0, min(left, 2)))
        if k:
            extra.append((cls_, k))
    run = draw(st.integers(0, 50))
    fail = draw(st.sets(st.integers(0, n - 1), max_size=1)) if draw(st.booleans()) and draw(st.booleans()) else set()
    return gang(job_id, n, per_node, run, extra, fail)


@st.composite
def scenarios(draw, max_jobs=6):
    c = draw(clusters())
    k = draw(st.integers(0, max_jobs))
    gaps = draw(st.lists(st.integers(0, 40), min_size=k, max_size=k))
    t, jobs = 0, []
    for i, gap in enumerate(gaps):
        t += gap
        jobs.append((float(t), draw(feasible_job(c, f"j{i}"))))
    return Scenario(c, tuple(jobs), strict_fifo=draw(st.booleans()))


# --- acceptance reporting -------------------------------------------------

ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark and rep.when == "call":
        key = mark.args[0]
        ok = rep.passed and ACCEPTANCE.get(key, (True,))[0]
        ACCEPTANCE[key] = (ok, mark.args[1])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, desc = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}  {desc}")
