import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slicerm.engine import (Engine, EngineError, EventKind, InfeasibleJob, SliceActive, SlicePhase,
                            UnknownJob, run_scenario)
from slicerm.model import PHASES, Scenario, SliceSpec, Timeline, breakdown
from slicerm.report import events_jsonl
from slicerm.scenarios import load_bundled

from conftest import P40, P100, SSD, gang, latency_params, small_cluster

HAND = dict(attach_s=6, machine_boot_s=30, prepare_s=5, launch_per_device_s=4, detach_s=5, destroy_s=10)


def kinds(eng, job_id):
    return [e.kind for e in eng.events if e.job_id == job_id]


def first(eng, job_id, kind):
    return next(e.time_ms for e in eng.events if e.job_id == job_id and e.kind is kind)


def test_single_slice_lifecycle_hand_oracle():
    # 6 attach + (24 download + 30 boot) + 5 + 4 + 100 run + 5 + 10 = 184 s
    eng = Engine(small_cluster(1, [P100], **HAND))
    eng.submit(gang("j", 1, [(P100, 1)], run=100))
    eng.run()
    t = eng.timeline_of("j")
    assert t == Timeline.from_durations([6, 54, 5, 4, 100, 5, 10])
    assert breakdown(t).makespan_ms == 184_000
    assert eng.slices["j"].phase is SlicePhase.DONE


def test_lifecycle_event_order():
    eng = Engine(small_cluster(1, [P100], **HAND))
    eng.submit(gang("j", 1, [(P100, 1)]))
    eng.run()
    expected = [EventKind.SUBMITTED, EventKind.ALLOCATED]
    for p in PHASES:
        expected += [EventKind(p.upper() + "_START"), EventKind(p.upper() + "_END")]
    expected.append(EventKind.COMPLETED)
    assert kinds(eng, "j") == expected


def test_fair_share_download_four_nodes():
    # 4 x 24 Gbit over a shared 1 Gbps link: each finishes at 96 s
    eng = Engine(small_cluster(4, [], machine_boot_s=0))
    eng.submit(gang("j", 4))
    eng.run()
    assert eng.timeline_of("j").duration_ms("launch_machine") == 96_000


def test_solo_download():
    eng = Engine(small_cluster(4, [], machine_boot_s=0))
    eng.submit(gang("j", 1))
    eng.run()
    assert eng.timeline_of("j").duration_ms("launch_machine") == 24_000


def test_staggered_downloads_share_link():
    # A alone for 12 s (12 Gbit left), then both at 0.5 Gbps: A done at 36 s;
    # B has 12 Gbit left at 36 s and finishes alone at 48 s.
    c = small_cluster(2, [], machine_boot_s=0)
    sc = Scenario(c, ((0.0, gang("A", 1)), (12.0, gang("B", 1))))
    eng = run_scenario(sc)
    a, b = eng.timeline_of("A"), eng.timeline_of("B")
    assert a["launch_machine"] == (0, 36_000)
    assert b["launch_machine"] == (12_000, 48_000)


def test_attach_serializes_per_node_parallel_across_nodes():
    eng = Engine(small_cluster(2, [P100] * 4, attach_s=6))
    eng.submit(gang("j", 2, [(P100, 2)]))
    eng.run()
    assert eng.timeline_of("j").duration_ms("attach_device") == 12_000


def test_launch_task_scales_with_devices_per_node():
    eng = Engine(small_cluster(1, [P100] * 3, launch_per_device_s=4))
    eng.submit(gang("j", 1, [(P100, 3)]))
    eng.run()
    assert eng.timeline_of("j").duration_ms("launch_task") == 12_000


def test_failure_path_hand_oracle():
    # rank1 fails at 50 s, rank0 runs to 100 s: RUNNING ends at the barrier (100 s)
    eng = Engine(small_cluster(2, [P100, P100], **HAND))
    eng.submit(gang("j", 2, [(P100, 1)], run=100, fail={1}))
    eng.run()
    rt = eng.slices["j"]
    assert rt.phase is SlicePhase.FAILED
    assert "t1" in rt.failure_reason
    # 6 attach, 2x24 Gbit shared download = 48 s + 30 boot
    assert eng.timeline_of("j") == Timeline.from_durations([6, 78, 5, 4, 100, 5, 10])
    assert eng.fabric.snapshot() == {}
    assert kinds(eng, "j")[-1] is EventKind.FAILED


def test_failed_slice_returns_resources():
    eng = Engine(small_cluster(1, [P100], **HAND))
    eng.submit(gang("a", 1, [(P100, 1)], fail={0}))
    eng.submit(gang("b", 1, [(P100, 1)]))
    eng.run()
    assert eng.slices["a"].phase is SlicePhase.FAILED
    assert eng.slices["b"].phase is SlicePhase.DONE
    assert first(eng, "b", EventKind.ALLOCATED) == eng.timeline_of("a").end_ms


def test_submit_allocates_immediately(cluster):
    eng = Engine(cluster)
    eng.submit(gang("j", 4, [(P100, 1)]))
    assert eng.slices["j"].phase is SlicePhase.ATTACHING
    assert first(eng, "j", EventKind.ALLOCATED) == 0


def test_submit_infeasible(cluster):
    eng = Engine(cluster)
    with pytest.raises(InfeasibleJob, match="node_count exceeds cluster"):
        eng.submit(gang("j", 5))
    assert eng.events == []


def test_second_full_gpu_job_waits(cluster):
    eng = Engine(cluster)
    eng.submit(gang("a", 1, [(P100, 4)]))
    eng.submit(gang("b", 1, [(P100, 4)]))
    assert eng.slices["b"].phase is SlicePhase.QUEUED
    assert eng.status("b")["queue_position"] == 0
    eng.run()
    assert first(eng, "b", EventKind.ALLOCATED) == eng.timeline_of("a").end_ms


def test_sharing_first_pass():
    eng = Engine(load_bundled("sharing-4slices").cluster, record_passes=True)
    for _, job in load_bundled("sharing-4slices").jobs:
        eng.submit(job)
    allocated = [e.job_id for e in eng.events if e.kind is EventKind.ALLOCATED]
    assert allocated == ["Slice1", "Slice3"]
    assert eng.slices["Slice1"].assigned_nodes == ["n0", "n1"]
    assert eng.slices["Slice1"].device_ids() == ["gpu0", "gpu1", "gpu2", "gpu3"]
    assert eng.slices["Slice3"].assigned_devices == {"n2": ["gpu4"]}
    assert eng.queue == ["Slice2", "Slice4"]


def test_strict_fifo_blocks_behind_head():
    sc = load_bundled("sharing-4slices")
    eng = run_scenario(Scenario(sc.cluster, sc.jobs, strict_fifo=True))
    allocated = [e.job_id for e in eng.events if e.kind is EventKind.ALLOCATED]
    assert allocated == ["Slice1", "Slice2", "Slice3", "Slice4"]
    assert first(eng, "Slice3", EventKind.ALLOCATED) > 0


def test_empty_queue_pass_is_noop(cluster):
    eng = Engine(cluster)
    assert eng.schedule_pass() == []
    assert eng.events == []


def test_saturating_job(cluster):
    eng = Engine(cluster)
    eng.submit(gang("all", 4, [(P100, 1)], slice_devices=[(P40, 1), (SSD, 4)]))
    assert eng.slices["all"].phase is SlicePhase.ATTACHING
    assert len(eng.fabric.free_devices()) == 0
    # slice devices spread round-robin from the first node
    assert eng.slices["all"].assigned_devices["n0"] == ["gpu0", "gpu4", "nvme3"]
    assert eng.slices["all"].assigned_devices["n1"] == ["gpu1", "nvme0"]


def test_nvme_pair_spread_over_nodes(cluster):
    eng = Engine(cluster)
    eng.submit(gang("a", 4, [(P100, 1)], slice_devices=[(SSD, 2)]))
    devs = eng.slices["a"].assigned_devices
    assert devs == {"n0": ["gpu0", "nvme0"], "n1": ["gpu1", "nvme1"], "n2": ["gpu2"], "n3": ["gpu3"]}
    eng2 = Engine(cluster)
    eng2.submit(gang("b", 1, [(P100, 1)], slice_devices=[(SSD, 2)]))
    assert eng2.slices["b"].assigned_devices == {"n0": ["gpu0", "nvme0", "nvme1"]}


def test_advance_idle(cluster):
    eng = Engine(cluster)
    eng.advance(100_000)
    assert eng.clock_ms == 100_000 and eng.events == []
    with pytest.raises(EngineError, match="regression"):
        eng.advance(50_000)


def test_advance_past_run_shows_detaching():
    eng = Engine(small_cluster(1, [P100], **HAND))
    eng.submit(gang("j", 1, [(P100, 1)], run=100))
    eng.advance(170_000)  # run ends at 169 s
    assert eng.slices["j"].phase is SlicePhase.DETACHING
    assert EventKind.DETACH_DEVICE_START in kinds(eng, "j")


def test_timeline_errors(cluster):
    eng = Engine(cluster)
    eng.submit(gang("j", 1))
    with pytest.raises(SliceActive):
        eng.timeline_of("j")
    with pytest.raises(UnknownJob):
        eng.timeline_of("zz")


def test_auto_ids(cluster):
    eng = Engine(cluster)
    ids = [eng.submit(gang(None, 1)) for _ in range(2)]
    assert ids == ["job-0001", "job-0002"]


def test_cancel_queued(cluster):
    eng = Engine(cluster)
    eng.submit(gang("a", 1, [(P100, 4)]))
    eng.submit(gang("b", 1, [(P100, 4)]))
    assert eng.cancel("b")
    assert eng.slices["b"].phase is SlicePhase.FAILED
    assert eng.slices["b"].failure_reason == "cancelled"
    assert eng.queue == []
    with pytest.raises(SliceActive, match="never allocated"):
        eng.timeline_of("b")


def test_cancel_running_tears_down():
    eng = Engine(small_cluster(1, [P100], **HAND))
    eng.submit(gang("j", 1, [(P100, 1)], run=100))
    eng.advance(100_000)
    assert eng.slices["j"].phase is SlicePhase.RUNNING
    assert eng.cancel("j")
    eng.run()
    t = eng.timeline_of("j")
    # running 69..100 s, then detach 5 and destroy 10
    assert t["run_task"] == (69_000, 100_000)
    assert t.end_ms == 115_000
    assert eng.slices["j"].phase is SlicePhase.FAILED
    assert eng.fabric.snapshot() == {}


def test_cancel_during_attach_skips_to_teardown():
    eng = Engine(small_cluster(1, [P100], **HAND))
    eng.submit(gang("j", 1, [(P100, 1)], run=100))
    eng.advance(1000)
    eng.cancel("j")
    eng.run()
    t = eng.timeline_of("j")
    assert t == Timeline.from_durations([6, 0, 0, 0, 0, 5, 10])
    assert not eng.cancel("j")


def test_event_times_nondecreasing_and_jsonl():
    eng = run_scenario(load_bundled("sharing-4slices"))
    times = [e.time_ms for e in eng.events]
    assert times == sorted(times)
    lines = events_jsonl(eng.events).splitlines()
    assert len(lines) == len(eng.events)
    assert set(json.loads(lines[0])) == {"time_s", "job_id", "kind", "detail"}


def test_determinism_bundled():
    for name in ("mnist-3configs", "sharing-4slices", "imagenet-2configs"):
        a = events_jsonl(run_scenario(load_bundled(name)).events)
        b = events_jsonl(run_scenario(load_bundled(name)).events)
        assert a == b


def test_invariants_hold_throughout_bundled():
    for name in ("mnist-3configs", "sharing-4slices", "imagenet-2configs"):
        run_scenario(load_bundled(name), check=Engine.check_invariants)


def _solo(params, n, per_node):
    c = small_cluster(4, [P100] * 8, **params.__dict__)
    eng = Engine(c)
    eng.submit(gang("j", n, [(P100, per_node)] if per_node else []))
    eng.run()
    return eng.timeline_of("j")


@settings(max_examples=50, deadline=None)
@given(latency_params)
def test_construction_monotone(params):
    lm = [_solo(params, n, 1).duration_ms("launch_machine") for n in (1, 2, 4)]
    assert lm == sorted(lm)
    at = [_solo(params, 1, g).duration_ms("attach_device") for g in (1, 2, 4, 8)]
    assert at == sorted(at)


def test_run_scenario_submit_times():
    c = small_cluster(1, [], **HAND)
    sc = Scenario(c, ((0.0, gang("a", 1, run=1)), (500.0, gang("b", 1, run=1))))
    eng = run_scenario(sc)
    assert first(eng, "b", EventKind.SUBMITTED) == 500_000
    assert first(eng, "b", EventKind.ALLOCATED) == 500_000


def test_zero_image_boots_directly():
    eng = Engine(small_cluster(2, [], image_gb=0, machine_boot_s=7))
    eng.submit(gang("j", 2))
    eng.run()
    assert eng.timeline_of("j").duration_ms("launch_machine") == 7000


def test_slice_spec_demand():
    s = SliceSpec(2, ((P100, 2),), ((SSD, 2),))
    assert s.demand() == {P100: 4, SSD: 2}
