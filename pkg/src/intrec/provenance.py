"""Per-request provenance graphs built by forward analysis over the global log."""

from __future__ import annotations

import json
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Union

from .partition import RequestUnit
from .trace import Event, EventLog, NetworkTuple


class EdgeKind(str, Enum):
    CREATE_PROCESS = "CREATE_PROCESS"
    EXEC = "EXEC"
    OPEN = "OPEN"
    WRITE = "WRITE"
    READ = "READ"
    DELETE = "DELETE"
    RENAME = "RENAME"
    SEND = "SEND"


@dataclass(frozen=True, slots=True)
class ProcessNode:
    host: str
    pid: int
    tid: int
    start_ts: int

    @property
    def id(self) -> str:
        return f"proc:{self.host}:{self.pid}:{self.tid}:{self.start_ts}"


@dataclass(frozen=True, slots=True)
class FileNode:
    path: str

    @property
    def id(self) -> str:
        return f"file:{self.path}"


@dataclass(frozen=True, slots=True)
class SocketNode:
    tuple: NetworkTuple

    @property
    def id(self) -> str:
        return f"sock:{self.tuple}"


Node = Union[ProcessNode, FileNode, SocketNode]


@dataclass(frozen=True, slots=True)
class Edge:
    kind: EdgeKind
    src: Node
    dst: Node
    ts: int
    seq: int
    host: str
    offset: int | None = None
    data: bytes | None = None
    flags: str | None = None
    rename_to: str | None = None
    outbound: bool | None = None

    @property
    def nbytes(self) -> int:
        return len(self.data) if self.data is not None else 0


@dataclass
class ProvenanceGraph:
    request_id: str
    roots: list[ProcessNode]
    nodes: dict[str, Node] = field(default_factory=dict)
    edges: list[Edge] = field(default_factory=list)
    exe: dict[str, str] = field(default_factory=dict)  # process node id -> image path
    begin_ts: int = 0
    event_keys: set[tuple[str, int]] = field(default_factory=set)

    def add_node(self, node: Node) -> Node:
        return self.nodes.setdefault(node.id, node)

    def processes(self) -> list[ProcessNode]:
        return [n for n in self.nodes.values() if isinstance(n, ProcessNode)]

    def children(self, node: Node) -> list[Node]:
        return [e.dst for e in self.edges if e.src == node]

    def edges_of(self, kind: EdgeKind) -> list[Edge]:
        return [e for e in self.edges if e.kind is kind]


@dataclass(frozen=True, slots=True)
class FileOperation:
    path: str
    kind: str  # create | write | delete | rename
    ts: int
    actor: tuple[int, int]
    seq: int
    host: str = "web"
    offset: int | None = None
    data: bytes | None = None
    rename_to: str | None = None
    truncate: bool = False

    def __post_init__(self):
        if self.kind == "rename" and self.rename_to is None:
            raise ValueError("rename requires rename_to")
        if self.kind == "write" and (self.offset is None or self.data is None):
            raise ValueError("write requires offset and data")

    @property
    def key(self) -> tuple[str, int]:
        return (self.host, self.seq)

    @property
    def length(self) -> int:
        return len(self.data) if self.data is not None else 0

    def paths(self) -> tuple[str, ...]:
        return (self.path, self.rename_to) if self.rename_to else (self.path,)


@dataclass(frozen=True, slots=True)
class ExternalInteraction:
    tuple: NetworkTuple
    first_ts: int
    last_ts: int
    byte_count: int
    direction: str = "outbound"


def _initial_exe(global_log: EventLog, host: str, pid: int, tid: int, before: int) -> str | None:
    exe = None
    for key in ((host, pid, pid), (host, pid, tid)):
        for ev in global_log.thread_events(*key):
            if ev.ts >= before:
                break
            if ev.name == "execve":
                exe = ev.args.path
    return exe


def _descendant_events(global_log: EventLog, host: str, pid: int, tid: int, after: Event) -> list[Event]:
    out = []
    for ev in global_log.thread_events(host, pid, tid):
        if (ev.ts, ev.seq) <= (after.ts, after.seq):
            continue
        out.append(ev)
        if ev.name == "exit":
            break
    return out


def build_graph(unit: RequestUnit, global_log: EventLog) -> ProvenanceGraph:
    """Forward analysis rooted at the unit's owner threads.

    The unit's own events seed the graph; every process or thread created
    by a node already in the graph is followed through ``global_log`` from
    its creation until its exit, recursively.
    """
    roots: list[ProcessNode] = []
    queue: deque[tuple[ProcessNode, list[Event]]] = deque()
    graph = ProvenanceGraph(unit.request_id, roots, begin_ts=unit.begin_ts)
    per_thread: dict[tuple[str, int, int], list[Event]] = defaultdict(list)
    for ev in unit.events:
        per_thread[(ev.host, ev.pid, ev.tid)].append(ev)
    for thread in unit.owner_threads or list(per_thread):
        starts = [s.start_ts for s in unit.segments if (s.host, s.pid, s.tid) == thread]
        node = ProcessNode(*thread, min(starts) if starts else unit.begin_ts)
        graph.add_node(node)
        roots.append(node)
        exe = _initial_exe(global_log, *thread, before=unit.begin_ts)
        if exe:
            graph.exe[node.id] = exe
        queue.append((node, per_thread.get(thread, [])))

    while queue:
        proc, events = queue.popleft()
        for ev in events:
            graph.event_keys.add(ev.key)
            child = _apply_event(graph, proc, ev)
            if child is not None:
                queue.append((child, _descendant_events(global_log, ev.host, child.pid, child.tid, ev)))

    graph.edges.sort(key=lambda e: (e.ts, e.seq, e.host))
    return graph


def _apply_event(graph: ProvenanceGraph, proc: ProcessNode, ev: Event) -> ProcessNode | None:
    name = ev.name
    if name is None:
        return None
    args = ev.args
    common = dict(ts=ev.ts, seq=ev.seq, host=ev.host)
    if name in ("fork", "clone"):
        child = ProcessNode(ev.host, args.child_pid, args.child_tid, ev.ts)
        if child.id in graph.nodes:
            return None
        graph.add_node(child)
        if proc.id in graph.exe:
            graph.exe[child.id] = graph.exe[proc.id]
        graph.edges.append(Edge(EdgeKind.CREATE_PROCESS, proc, child, **common))
        return child
    if name == "execve":
        graph.exe[proc.id] = args.path
        dst = graph.add_node(FileNode(args.path))
        graph.edges.append(Edge(EdgeKind.EXEC, proc, dst, **common))
    elif name == "openat":
        dst = graph.add_node(FileNode(args.path))
        graph.edges.append(Edge(EdgeKind.OPEN, proc, dst, flags=args.flags, **common))
    elif name == "unlink":
        dst = graph.add_node(FileNode(args.path))
        graph.edges.append(Edge(EdgeKind.DELETE, proc, dst, **common))
    elif name == "rename":
        dst = graph.add_node(FileNode(args.old_path))
        graph.add_node(FileNode(args.new_path))
        graph.edges.append(Edge(EdgeKind.RENAME, proc, dst, rename_to=args.new_path, **common))
    elif name in ("write", "sendto", "read", "recvfrom"):
        info = ev.fd_info
        tup = ev.tuple
        if info is not None and info.kind == "socket" or (name in ("sendto", "recvfrom") and tup):
            if tup is None:
                return None
            dst = graph.add_node(SocketNode(tup))
            kind = EdgeKind.SEND if name in ("write", "sendto") else EdgeKind.READ
            outbound = info.outbound if info is not None else True
            graph.edges.append(Edge(kind, proc, dst, data=args.data, outbound=outbound, **common))
        else:
            path = ev.file_path
            if path is None:
                return None
            dst = graph.add_node(FileNode(path))
            if name == "write":
                offset = args.offset if args.offset is not None else 0
                graph.edges.append(Edge(EdgeKind.WRITE, proc, dst, offset=offset, data=args.data, **common))
            else:
                graph.edges.append(Edge(EdgeKind.READ, proc, dst, **common))
    return None


def collect_file_ops(graph: ProvenanceGraph) -> list[FileOperation]:
    """State-mutating file operations of the graph, in (ts, seq) order."""
    ops = []
    for e in graph.edges:
        actor = (e.src.pid, e.src.tid)
        base = dict(ts=e.ts, actor=actor, seq=e.seq, host=e.host)
        if e.kind is EdgeKind.OPEN:
            flags = set(e.flags.split("|")) if e.flags else set()
            if "O_CREAT" in flags or "O_TRUNC" in flags:
                ops.append(FileOperation(e.dst.path, "create", truncate="O_TRUNC" in flags, **base))
        elif e.kind is EdgeKind.WRITE:
            ops.append(FileOperation(e.dst.path, "write", offset=e.offset, data=e.data or b"", **base))
        elif e.kind is EdgeKind.DELETE:
            ops.append(FileOperation(e.dst.path, "delete", **base))
        elif e.kind is EdgeKind.RENAME:
            ops.append(FileOperation(e.dst.path, "rename", rename_to=e.rename_to, **base))
    return ops


def detect_external(graph: ProvenanceGraph, db_endpoints: Iterable[tuple[str, int]]) -> list[ExternalInteraction]:
    endpoints = set(db_endpoints)
    acc: dict[NetworkTuple, list[int]] = {}
    for e in graph.edges:
        if e.kind is not EdgeKind.SEND or e.outbound is False:
            continue
        tup = e.dst.tuple
        if tup.server in endpoints:
            continue
        first, last, nbytes = acc.get(tup, (e.ts, e.ts, 0))
        acc[tup] = [min(first, e.ts), max(last, e.ts), nbytes + e.nbytes]
    return [ExternalInteraction(t, *vals) for t, vals in sorted(acc.items(), key=lambda kv: kv[1][0])]


# --------------------------------------------------------------------------
# structural checks and export


def check_graph(graph: ProvenanceGraph) -> list[str]:
    """Returns invariant violations (empty when the graph is well formed)."""
    problems = []
    adj: dict[str, list[str]] = defaultdict(list)
    for e in graph.edges:
        adj[e.src.id].append(e.dst.id)
        if e.ts < graph.begin_ts:
            problems.append(f"edge before request begin: {e}")
    # CREATE_PROCESS acyclicity
    parent: dict[str, str] = {}
    for e in graph.edges_of(EdgeKind.CREATE_PROCESS):
        if e.dst.id in parent:
            problems.append(f"process {e.dst.id} created twice")
        parent[e.dst.id] = e.src.id
    for node_id in parent:
        seen = {node_id}
        cur = node_id
        while cur in parent:
            cur = parent[cur]
            if cur in seen:
                problems.append(f"CREATE_PROCESS cycle through {node_id}")
                break
            seen.add(cur)
    reach = {r.id for r in graph.roots}
    todo = list(reach)
    while todo:
        cur = todo.pop()
        for nxt in adj.get(cur, ()):
            if nxt not in reach:
                reach.add(nxt)
                todo.append(nxt)
    # rename targets are materialized without an incoming edge of their own
    targets = {FileNode(e.rename_to).id for e in graph.edges_of(EdgeKind.RENAME)}
    for node_id in graph.nodes:
        if node_id not in reach and node_id not in targets:
            problems.append(f"unreachable node {node_id}")
    return problems


def process_chain(graph: ProvenanceGraph, path: str) -> list[ProcessNode]:
    """Process ancestry (root first) of whoever wrote or created ``path``."""
    parent = {e.dst.id: e.src for e in graph.edges_of(EdgeKind.CREATE_PROCESS)}
    for e in graph.edges:
        if e.kind in (EdgeKind.WRITE, EdgeKind.OPEN) and isinstance(e.dst, FileNode) and e.dst.path == path:
            chain = [e.src]
            while chain[-1].id in parent:
                chain.append(parent[chain[-1].id])
            return chain[::-1]
    return []


def _node_record(graph: ProvenanceGraph, node: Node) -> dict:
    if isinstance(node, ProcessNode):
        return {
            "type": "node", "id": node.id, "kind": "process", "host": node.host,
            "pid": node.pid, "tid": node.tid, "start_ts": node.start_ts,
            "exe": graph.exe.get(node.id),
        }
    if isinstance(node, FileNode):
        return {"type": "node", "id": node.id, "kind": "file", "path": node.path}
    return {"type": "node", "id": node.id, "kind": "socket", "tuple": str(node.tuple)}


def graph_to_jsonl(graph: ProvenanceGraph) -> str:
    lines = [
        json.dumps(
            {"type": "graph", "request_id": graph.request_id, "roots": [r.id for r in graph.roots]},
            separators=(",", ":"),
        )
    ]
    for node_id in sorted(graph.nodes):
        lines.append(json.dumps(_node_record(graph, graph.nodes[node_id]), separators=(",", ":")))
    for e in graph.edges:
        rec = {"type": "edge", "kind": e.kind.value, "src": e.src.id, "dst": e.dst.id, "ts": e.ts, "seq": e.seq}
        if e.offset is not None:
            rec["offset"] = e.offset
        if e.data is not None:
            rec["bytes"] = len(e.data)
        if e.flags:
            rec["flags"] = e.flags
        if e.rename_to:
            rec["rename_to"] = e.rename_to
        lines.append(json.dumps(rec, separators=(",", ":")))
    return "\n".join(lines) + "\n"
