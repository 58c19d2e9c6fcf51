from __future__ import annotations

import json

from hypothesis import given
from hypothesis import strategies as st

from intrec.partition import partition
from intrec.provenance import (
    EdgeKind,
    build_graph,
    check_graph,
    collect_file_ops,
    detect_external,
    graph_to_jsonl,
    process_chain,
)
from intrec.trace import DelimiterPayload, Event, EventLog, Marker, SyscallArgs, SyscallPayload, resolve_fd_tuples

DB = {("10.0.0.2", 3306)}
NET = dict(src_ip="10.0.0.1", src_port=40000)


class Script:
    def __init__(self):
        self.events: list[Event] = []

    def add(self, pid, tid, payload):
        n = len(self.events) + 1
        self.events.append(Event(n, 100 + n, "web", pid, tid, payload))
        return self

    def d(self, rid, marker, pid=10, tid=10):
        return self.add(pid, tid, DelimiterPayload(rid, marker))

    def sc(self, name, pid=10, tid=10, **args):
        return self.add(pid, tid, SyscallPayload(name, SyscallArgs(**args)))

    def graph(self, rid="r1", extra=()):
        log = resolve_fd_tuples(EventLog(sorted(self.events + list(extra), key=lambda e: (e.ts, e.seq))))
        return build_graph(partition(log)[rid], log)


def wrap(body):
    s = Script().d("r1", Marker.BEGIN)
    body(s)
    return s.d("r1", Marker.END)


def test_single_write():
    s = wrap(lambda s: s.sc("openat", fd=3, path="/srv/data/a", flags="O_WRONLY").sc("write", fd=3, data=b"hello", offset=2))
    g = s.graph()
    ops = collect_file_ops(g)
    assert [(o.path, o.kind, o.offset, o.data) for o in ops] == [("/srv/data/a", "write", 2, b"hello")]
    writes = g.edges_of(EdgeKind.WRITE)
    assert len(writes) == 1 and writes[0].nbytes == 5
    assert check_graph(g) == []


def test_create_then_rename():
    def body(s):
        s.sc("openat", fd=3, path="/tmp/up", flags="O_WRONLY|O_CREAT|O_TRUNC")
        s.sc("write", fd=3, data=b"x", offset=0)
        s.sc("close", fd=3)
        s.sc("rename", old_path="/tmp/up", new_path="/srv/data/up")

    ops = collect_file_ops(wrap(body).graph())
    assert [o.kind for o in ops] == ["create", "write", "rename"]
    assert ops[0].truncate and ops[2].rename_to == "/srv/data/up"
    assert [o.seq for o in ops] == sorted(o.seq for o in ops)


def test_child_process_is_followed_until_exit():
    def body(s):
        s.sc("clone", child_pid=50, child_tid=50)
        s.sc("execve", pid=50, tid=50, path="/bin/sh")
        s.sc("openat", pid=50, tid=50, fd=3, path="/tmp/x", flags="O_WRONLY|O_CREAT")
        s.sc("exit", pid=50, tid=50)

    s = wrap(body)
    # pid 50 is recycled by an unrelated process after the child exits
    s.sc("openat", pid=50, tid=50, fd=3, path="/tmp/other", flags="O_WRONLY|O_CREAT")
    g = s.graph()
    assert {o.path for o in collect_file_ops(g)} == {"/tmp/x"}
    assert [g.exe.get(n.id) for n in process_chain(g, "/tmp/x")] == [None, "/bin/sh"]
    assert check_graph(g) == []


def test_thread_clone_shares_request():
    def body(s):
        s.sc("clone", child_pid=10, child_tid=11)
        s.sc("openat", pid=10, tid=11, fd=4, path="/srv/data/t", flags="O_WRONLY|O_CREAT")

    g = wrap(body).graph()
    assert [o.actor for o in collect_file_ops(g)] == [(10, 11)]


def test_external_detection_excludes_db_and_aggregates():
    def body(s):
        s.sc("connect", fd=5, **NET, dst_ip="10.0.0.2", dst_port=3306)
        s.sc("write", fd=5, data=b"SEL")
        s.sc("connect", fd=6, src_ip="10.0.0.1", src_port=40001, dst_ip="198.51.100.7", dst_port=443)
        s.sc("write", fd=6, data=b"abc")
        s.sc("write", fd=6, data=b"defg")
        s.sc("read", fd=6)
        s.sc("sendto", fd=7, src_ip="10.0.0.1", src_port=40002, dst_ip="198.51.100.8", dst_port=53, data=b"q")

    xs = detect_external(wrap(body).graph(), DB)
    assert [(x.tuple.dst_ip, x.byte_count) for x in xs] == [("198.51.100.7", 7), ("198.51.100.8", 1)]
    assert xs[0].first_ts < xs[0].last_ts


def test_inbound_traffic_is_not_external():
    s = wrap(lambda s: s.sc("accept", fd=4, src_ip="203.0.113.9", src_port=5555, dst_ip="10.0.0.1", dst_port=80).sc("write", fd=4, data=b"resp"))
    assert detect_external(s.graph(), DB) == []


@st.composite
def decoys(draw):
    """Unrelated activity on threads the request never touches."""
    out = []
    for i in range(draw(st.integers(0, 20))):
        pid = draw(st.integers(200, 205))
        name = draw(st.sampled_from(["openat", "write", "unlink", "clone", "exit"]))
        args = {
            "openat": dict(fd=3, path="/srv/data/decoy", flags="O_WRONLY|O_CREAT"),
            "write": dict(fd=3, data=b"zz", path="/srv/data/decoy", offset=0),
            "unlink": dict(path="/srv/data/a"),
            "clone": dict(child_pid=pid + 10, child_tid=pid + 10),
            "exit": {},
        }[name]
        ts = draw(st.integers(100, 120))
        out.append(Event(1000 + i, ts, "web", pid, pid, SyscallPayload(name, SyscallArgs(**args))))
    return out


def _request_script():
    def body(s):
        s.sc("openat", fd=3, path="/srv/data/a", flags="O_WRONLY")
        s.sc("write", fd=3, data=b"1", offset=0)
        s.sc("clone", child_pid=60, child_tid=60)
        s.sc("unlink", pid=60, tid=60, path="/srv/data/b")
        s.sc("exit", pid=60, tid=60)

    return wrap(body)


@given(decoys())
def test_unrelated_activity_does_not_change_the_graph(extra):
    base = graph_to_jsonl(_request_script().graph())
    assert graph_to_jsonl(_request_script().graph(extra=extra)) == base


def test_graph_export_is_stable_jsonl():
    text = graph_to_jsonl(_request_script().graph())
    recs = [json.loads(line) for line in text.splitlines()]
    assert recs[0]["type"] == "graph"
    assert {r["type"] for r in recs[1:]} == {"node", "edge"}
    assert graph_to_jsonl(_request_script().graph()) == text


def test_simulated_file_ops_match_labels(attack_run, coroutine_run):
    for result, _, analysis in (attack_run, coroutine_run):
        labels = result.ground_truth.file_op_labels
        for rid, ra in analysis.requests.items():
            got = {o.seq for o in ra.file_ops}
            assert got == {seq for seq, r in labels.items() if r == rid}, rid
            assert check_graph(ra.graph) == [], rid


def test_webshell_drop_is_attributed(attack_run):
    result, _, analysis = attack_run
    gt = result.ground_truth
    rce = next(rid for rid, k in gt.kinds.items() if k == "rce_webshell")
    ra = analysis.requests[rce]
    shells = [o.path for o in ra.file_ops if o.path.startswith("/var/www/app/shell_")]
    assert shells
    chain = process_chain(ra.graph, shells[0])
    assert [ra.graph.exe.get(n.id) for n in chain][-2:] == ["/bin/sh", "/usr/bin/curl"]
    assert [x.tuple.dst_ip for x in ra.external] == ["203.0.113.5"]
    assert {str(x.tuple) for x in ra.external} == {t for t, _ in gt.external[rce]}


def test_case_study_attack_chain(case_study):
    result, _, analysis = case_study
    stage2 = result.ground_truth.malicious[1]
    ra = analysis.requests[stage2]
    assert {o.path for o in ra.file_ops} == {"/tmp/Webshell"}
    chain = process_chain(ra.graph, "/tmp/Webshell")
    assert [ra.graph.exe.get(n.id) for n in chain] == ["/usr/sbin/php-fpm", "/bin/sh", "/usr/bin/curl"]


def test_external_notifications_match_ground_truth(attack_run):
    result, _, analysis = attack_run
    truth = {rid for rid, xs in result.ground_truth.external.items() if xs}
    assert set(analysis.notifications()) == truth
