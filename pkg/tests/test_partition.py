from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from intrec.partition import (
    BACKGROUND,
    DanglingSwitch,
    DuplicateRequest,
    MismatchedEnd,
    NestedBegin,
    ServerModel,
    UnknownRequest,
    partition,
    unit_for,
)
from intrec.sim import ScenarioConfig, simulate
from intrec.trace import DelimiterPayload, Event, EventLog, Marker, SyscallArgs, SyscallPayload, parse_trace

from conftest import cached_run

B, E, SI, SO = Marker.BEGIN, Marker.END, Marker.SWITCH_IN, Marker.SWITCH_OUT


class LogBuilder:
    def __init__(self):
        self.events: list[Event] = []

    def _add(self, tid, payload, pid=None):
        n = len(self.events) + 1
        self.events.append(Event(n, n * 10, "web", tid if pid is None else pid, tid, payload))
        return self

    def d(self, tid, rid, marker, pid=None):
        return self._add(tid, DelimiterPayload(rid, marker), pid)

    def s(self, tid, name="write", pid=None):
        args = SyscallArgs(fd=3, data=b"x") if name == "write" else SyscallArgs()
        return self._add(tid, SyscallPayload(name, args), pid)

    def log(self):
        return EventLog(list(self.events))


def seqs(unit):
    return [e.seq for e in unit.events]


def test_sequential_requests_on_one_thread():
    log = LogBuilder().d(1, "r1", B).s(1).s(1).d(1, "r1", E).s(1).d(1, "r2", B).s(1).d(1, "r2", E).log()
    res = partition(log, ServerModel.THREAD_PER_REQUEST)
    assert res.request_ids() == ["r1", "r2"]
    assert seqs(res["r1"]) == [2, 3]
    assert seqs(res["r2"]) == [7]
    assert seqs(res.background) == [5]
    assert res["r1"].owner_threads == [("web", 1, 1)]
    assert res["r1"].begin_ts == 10 and res["r1"].end_ts == 40
    assert not res.unclosed and not res.diagnostics


def test_coroutine_interleaving():
    b = LogBuilder()
    b.d(1, "a", B).s(1).d(1, "a", SO)
    b.d(1, "b", B).s(1).d(1, "b", SO)
    b.d(2, "a", SI).s(2).d(2, "a", E)
    b.d(1, "b", SI).s(1).d(1, "b", E)
    res = partition(b.log(), ServerModel.COROUTINE)
    assert seqs(res["a"]) == [2, 8]
    assert seqs(res["b"]) == [5, 11]
    assert res["a"].owner_threads == [("web", 1, 1), ("web", 2, 2)]
    assert len(res["a"].segments) == 2
    assert all(seg.contains(ev) for ev in res["a"].events for seg in [next(s for s in res["a"].segments if s.tid == ev.tid)])


def test_thread_model_begin_implicitly_closes_previous():
    log = LogBuilder().d(1, "r1", B).s(1).d(1, "r2", B).s(1).d(1, "r2", E).log()
    res = partition(log, "thread_per_request")
    assert seqs(res["r1"]) == [2]
    assert seqs(res["r2"]) == [4]
    assert not res["r1"].unclosed


def test_coroutine_nested_begin_is_an_error():
    log = LogBuilder().d(1, "r1", B).s(1).d(1, "r2", B).log()
    with pytest.raises(NestedBegin) as exc:
        partition(log, ServerModel.COROUTINE)
    assert exc.value.request_id == "r2"


@pytest.mark.parametrize(
    "build, error",
    [
        (lambda b: b.d(1, "x", SI), DanglingSwitch),
        (lambda b: b.d(1, "x", B).d(1, "x", SO).d(1, "x", SO), DanglingSwitch),
        (lambda b: b.d(1, "x", B).d(1, "x", SO).d(2, "x", SI).d(3, "x", SI), DanglingSwitch),
        (lambda b: b.d(1, "x", B).d(1, "x", E).d(1, "x", SI), DanglingSwitch),
        (lambda b: b.d(1, "x", B).d(1, "y", E), MismatchedEnd),
        (lambda b: b.d(1, "x", B).d(2, "x", E), MismatchedEnd),
        (lambda b: b.d(1, "x", B).d(1, "x", E).d(1, "x", B), DuplicateRequest),
    ],
)
def test_malformed_delimiter_sequences(build, error):
    with pytest.raises(error):
        partition(build(LogBuilder()).log(), ServerModel.COROUTINE)


def test_unclosed_request_is_flagged_not_raised():
    log = LogBuilder().d(1, "r1", B).s(1).s(1).log()
    res = partition(log)
    assert res.unclosed == ["r1"]
    assert res["r1"].end_ts == log.end_ts
    assert any("r1" in d for d in res.diagnostics)


def test_truncated_simulator_trace_flags_unclosed():
    result = simulate(ScenarioConfig(seed=5, concurrency=5, request_count=20))
    log = parse_trace(result.web_trace, "web")
    cut = EventLog(list(log)[: len(log) // 2])
    res = partition(cut)
    assert res.unclosed
    for rid in res.unclosed:
        assert res[rid].end_ts == cut.end_ts


def test_unit_for():
    res = partition(LogBuilder().d(1, "r1", B).d(1, "r1", E).log())
    assert unit_for(res, "r1").request_id == "r1"
    assert unit_for(res, BACKGROUND).events == []
    with pytest.raises(UnknownRequest):
        unit_for(res, "nope")


def test_empty_log():
    res = partition(EventLog())
    assert res.request_ids() == [] and res.background.events == []


def _check_against_ground_truth(result, res):
    gt = result.ground_truth
    spawned_pids = {}
    for pid, _tid, _ts, rid in gt.spawned:
        spawned_pids.setdefault(pid, set()).add(rid)
    for rid in res.request_ids():
        for ev in res[rid].events:
            if ev.is_syscall:
                assert gt.syscall_labels[ev.seq] == rid
    for ev in res.background.events:
        label = gt.syscall_labels[ev.seq]
        assert label == BACKGROUND or label in spawned_pids.get(ev.pid, ())
    assert set(res.request_ids()) == set(gt.requests)


@pytest.mark.parametrize("concurrency", [1, 150])
@pytest.mark.parametrize("model", ["thread_per_request", "coroutine"])
def test_partition_matches_simulator_labels(model, concurrency):
    result, scn, analysis = cached_run(
        seed=21, concurrency=concurrency, request_count=150, server_model=model, snapshot_every=0, backup_every=0
    )
    _check_against_ground_truth(result, analysis.partition)
    assert not analysis.partition.unclosed


def test_background_unit_collects_unowned_activity(attack_run):
    result, _, analysis = attack_run
    bg = analysis.partition.background
    assert bg.request_id == BACKGROUND and bg.events
    _check_against_ground_truth(result, analysis.partition)
    # cron and startup activity is never assigned to a request
    unowned = {seq for seq, rid in result.ground_truth.syscall_labels.items() if rid == BACKGROUND}
    assert unowned and unowned <= {e.seq for e in bg.events}


@st.composite
def coroutine_schedules(draw):
    """Random valid interleaving of N requests over T loop threads.

    Returns the log plus the expected owner of every syscall.
    """
    n = draw(st.integers(1, 6))
    threads = draw(st.integers(1, 3))
    b = LogBuilder()
    state = {f"r{i}": "new" for i in range(n)}  # new | parked | running | done
    busy: dict[int, str] = {}
    expected = {}
    for _ in range(draw(st.integers(0, 80))):
        tid = draw(st.integers(1, threads))
        action = draw(st.integers(0, 3))
        if tid in busy:
            rid = busy[tid]
            if action < 2:
                b.s(tid)
                expected[b.events[-1].key] = rid
            else:
                b.d(tid, rid, E if action == 3 else SO)
                state[rid] = "done" if action == 3 else "parked"
                del busy[tid]
        else:
            ready = [r for r, st_ in state.items() if st_ in ("new", "parked")]
            if action == 0 or not ready:
                b.s(tid)
                expected[b.events[-1].key] = BACKGROUND
                continue
            rid = draw(st.sampled_from(ready))
            b.d(tid, rid, B if state[rid] == "new" else SI)
            state[rid] = "running"
            busy[tid] = rid
    return b.log(), expected


@given(coroutine_schedules())
def test_coroutine_partition_properties(schedule):
    log, expected = schedule
    res = partition(log, ServerModel.COROUTINE)
    assert res.labels() == expected
    keys = [ev.key for ev in log if ev.is_syscall]
    owned = [k for rid in res for k in res[rid].keys()]
    # disjoint and complete
    assert len(owned) == len(set(owned))
    assert set(owned) == set(keys)
    # per-unit order follows the log order
    for rid in res:
        ts = [(e.ts, e.seq) for e in res[rid].events]
        assert ts == sorted(ts)
    # no delimiter leaks into a unit
    assert all(ev.is_syscall for rid in res for ev in res[rid].events)
