"""Spatiotemporal anchors and database-operation extraction.

A request's anchor is the connection tuple it used towards a database
endpoint together with the half-open window ``[first use, last use + 1)``
on the web host. Because a pooled connection is held by one request at a
time and the database serves each connection from a single worker thread,
every statement that worker logged inside the window belongs to the
request.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Iterable

from .partition import RequestUnit
from .trace import Event, EventLog, NetworkTuple

DEFAULT_STATEMENT_LOG = "/var/log/db/statements.log"

Worker = tuple[int, int]


class NoWorkerFound(LookupError):
    def __init__(self, tup: NetworkTuple):
        super().__init__(f"no database worker accepted or served {tup}")
        self.tuple = tup


@dataclass(frozen=True, slots=True)
class Anchor:
    tuple: NetworkTuple
    t_start: int
    t_end: int  # exclusive

    def __post_init__(self):
        if self.t_start >= self.t_end:
            raise ValueError(f"empty anchor window [{self.t_start}, {self.t_end})")

    @property
    def window(self) -> tuple[int, int]:
        return (self.t_start, self.t_end)

    def covers(self, ts: int) -> bool:
        return self.t_start <= ts < self.t_end


@dataclass(frozen=True, slots=True)
class DBOperation:
    ts: int
    statement: str
    worker: Worker | str | None = None
    source_anchor: Anchor | None = field(default=None, compare=False)
    completed_late: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not self.statement or "\n" in self.statement:
            raise ValueError(f"bad statement text {self.statement!r}")

    @property
    def key(self) -> tuple[int, str]:
        return (self.ts, self.statement)


@dataclass(frozen=True, slots=True)
class AppLogRecord:
    ts: int
    client: str | None
    statement: str


def same_operation(a: DBOperation, b: DBOperation) -> bool:
    """Malicious-op matching on (ts, statement, worker).

    The worker component is only compared when both sides carry the same
    kind of label: a DB-host (pid, tid) from the syscall path and an
    ``ip:port`` client from the application log are not comparable.
    """
    if a.key != b.key:
        return False
    if a.worker is None or b.worker is None or type(a.worker) is not type(b.worker):
        return True
    return a.worker == b.worker


# --------------------------------------------------------------------------
# anchors


def extract_anchors(
    unit: RequestUnit, db_endpoints: Iterable[tuple[str, int]], max_skew_ns: int = 0
) -> list[Anchor]:
    endpoints = set(db_endpoints)
    spans: dict[NetworkTuple, list[int]] = {}
    for ev in unit.events:
        tup = ev.tuple
        if tup is None or tup.server not in endpoints:
            continue
        span = spans.get(tup)
        if span is None:
            spans[tup] = [ev.ts, ev.ts]
        else:
            span[1] = ev.ts
    anchors = [
        Anchor(tup, max(0, first - max_skew_ns), last + 1 + max_skew_ns)
        for tup, (first, last) in spans.items()
    ]
    anchors.sort(key=lambda a: (a.t_start, a.tuple))
    return anchors


# --------------------------------------------------------------------------
# tuple -> worker


def build_worker_index(db_log: EventLog) -> dict[NetworkTuple, Worker]:
    """Accepting thread per tuple; the first thread to serve it otherwise."""
    accepted: dict[NetworkTuple, Worker] = {}
    served: dict[NetworkTuple, Worker] = {}
    for ev in db_log.events:
        if not ev.is_syscall:
            continue
        if ev.name == "accept":
            accepted.setdefault(ev.args.tuple, ev.thread)
        elif ev.name in ("read", "recvfrom", "write", "sendto"):
            tup = ev.tuple
            if tup is not None:
                served.setdefault(tup, ev.thread)
    return {**served, **accepted}


def map_worker(db_log: EventLog, tup: NetworkTuple, index: dict | None = None) -> Worker:
    if index is None:
        index = build_worker_index(db_log)
    try:
        return index[tup]
    except KeyError:
        raise NoWorkerFound(tup) from None


# --------------------------------------------------------------------------
# statement extraction via the worker's statement-log writes


@dataclass(frozen=True, slots=True)
class _Line:
    start_ts: int
    end_ts: int | None  # ts of the write holding the newline; None if never completed
    text: str


class StatementIndex:
    """Per-worker reassembled statement-log lines, built once per DB log."""

    def __init__(self, db_log: EventLog, statement_log_path: str = DEFAULT_STATEMENT_LOG):
        self.path = statement_log_path
        self._lines: dict[Worker, list[_Line]] = {}
        self._starts: dict[Worker, list[int]] = {}
        writes: dict[Worker, list[Event]] = {}
        for ev in db_log.events:
            if ev.name == "write" and ev.file_path == statement_log_path:
                writes.setdefault(ev.thread, []).append(ev)
        for worker, evs in writes.items():
            lines = _reassemble(evs)
            self._lines[worker] = lines
            self._starts[worker] = [ln.start_ts for ln in lines]

    def operations(self, worker: Worker, window: tuple[int, int], anchor: Anchor | None = None) -> list[DBOperation]:
        lines = self._lines.get(worker, [])
        starts = self._starts.get(worker, [])
        lo = bisect.bisect_left(starts, window[0])
        hi = bisect.bisect_left(starts, window[1])
        ops = []
        for ln in lines[lo:hi]:
            if not ln.text:
                continue
            late = ln.end_ts is None or ln.end_ts >= window[1]
            ops.append(DBOperation(ln.start_ts, ln.text, worker, anchor, late))
        return ops

    def all_operations(self) -> list[DBOperation]:
        ops = [
            DBOperation(ln.start_ts, ln.text, worker)
            for worker, lines in self._lines.items()
            for ln in lines
            if ln.text
        ]
        ops.sort(key=lambda o: o.key)
        return ops


def _reassemble(writes: list[Event]) -> list[_Line]:
    lines: list[_Line] = []
    buf = ""
    start = None
    for ev in writes:
        text = (ev.args.data or b"").decode("utf-8", errors="replace")
        while text:
            if start is None:
                start = ev.ts
            nl = text.find("\n")
            if nl < 0:
                buf += text
                break
            buf += text[:nl]
            lines.append(_Line(start, ev.ts, buf))
            buf, start = "", None
            text = text[nl + 1 :]
    if start is not None:
        lines.append(_Line(start, None, buf))
    return lines


def extract_ops_syscall(
    db_log: EventLog,
    worker: Worker,
    window: tuple[int, int],
    statement_log_path: str = DEFAULT_STATEMENT_LOG,
    index: StatementIndex | None = None,
) -> list[DBOperation]:
    """Statements the worker logged with their first byte inside ``window``.

    A statement whose newline only arrives in a later write is still
    returned (completed from that write) with ``completed_late`` set.
    """
    if index is None or index.path != statement_log_path:
        index = StatementIndex(db_log, statement_log_path)
    return index.operations(worker, window)


# --------------------------------------------------------------------------
# application-log path


def parse_app_log(text: str) -> list[AppLogRecord]:
    records = []
    for line_no, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t", 2)
        if len(parts) != 3:
            raise ValueError(f"app log line {line_no}: expected 3 tab-separated fields")
        ts, client, stmt = parts
        records.append(AppLogRecord(int(ts), None if client == "-" else client, stmt))
    return records


def format_app_log(records: Iterable[AppLogRecord]) -> str:
    return "".join(f"{r.ts}\t{r.client or '-'}\t{r.statement}\n" for r in records)


def extract_ops_applog(app_log: Iterable[AppLogRecord], anchor: Anchor) -> list[DBOperation]:
    client = anchor.tuple.client
    return [
        DBOperation(r.ts, r.statement, r.client, anchor)
        for r in app_log
        if r.client == client and anchor.covers(r.ts)
    ]


def app_log_operations(app_log: Iterable[AppLogRecord]) -> list[DBOperation]:
    """Every logged statement, as the full replay source."""
    return [DBOperation(r.ts, r.statement, r.client) for r in app_log]


# --------------------------------------------------------------------------


@dataclass
class Attribution:
    anchors: list[Anchor]
    operations: list[DBOperation]
    missing_workers: list[NetworkTuple] = field(default_factory=list)


def attribute_request(
    unit: RequestUnit,
    db_endpoints: Iterable[tuple[str, int]],
    db_log: EventLog | None = None,
    app_log: list[AppLogRecord] | None = None,
    *,
    worker_index: dict | None = None,
    statement_index: StatementIndex | None = None,
    prefer: str = "syscall",
    max_skew_ns: int = 0,
) -> Attribution:
    """Anchors for the unit and the statements they pin down.

    The syscall path is used when a DB trace is available; an anchor whose
    tuple has no known worker falls back to the application log when that
    log records client endpoints.
    """
    anchors = extract_anchors(unit, db_endpoints, max_skew_ns)
    has_clients = bool(app_log) and any(r.client for r in app_log)
    use_syscall = db_log is not None and prefer == "syscall"
    if use_syscall:
        worker_index = worker_index if worker_index is not None else build_worker_index(db_log)
        statement_index = statement_index or StatementIndex(db_log)
    ops: list[DBOperation] = []
    missing = []
    for anchor in anchors:
        if use_syscall:
            try:
                worker = map_worker(db_log, anchor.tuple, worker_index)
            except NoWorkerFound:
                missing.append(anchor.tuple)
            else:
                ops.extend(statement_index.operations(worker, anchor.window, anchor))
                continue
        if has_clients:
            ops.extend(extract_ops_applog(app_log, anchor))
    ops.sort(key=lambda o: o.key)
    return Attribution(anchors, ops, missing)
