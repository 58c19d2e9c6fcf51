"""Event model, canonical trace format, log merging and fd resolution.

A trace file is line-delimited JSON. Every line carries ``seq``, ``ts``,
``pid``, ``tid`` and ``kind``; syscall lines add ``name`` and ``args``,
delimiter lines add ``request_id`` and ``marker``. Keys are emitted in a
fixed order so that ``serialize_trace(parse_trace(b))`` reproduces ``b``.
"""

from __future__ import annotations

import base64
import heapq
import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import IO, Iterable, Iterator, Union

SYSCALL_NAMES = frozenset(
    {
        "fork", "clone", "execve", "exit", "socket", "connect", "accept", "dup",
        "close", "openat", "read", "write", "unlink", "rename", "sendto", "recvfrom",
    }
)

# canonical key order inside ``args``
ARG_KEYS = (
    "fd", "new_fd", "path", "flags", "old_path", "new_path", "offset", "data_b64",
    "child_pid", "child_tid", "src_ip", "src_port", "dst_ip", "dst_port",
)
_INT_ARGS = {"fd", "new_fd", "offset", "child_pid", "child_tid", "src_port", "dst_port"}
_STR_ARGS = {"path", "flags", "old_path", "new_path", "src_ip", "dst_ip"}
_TUPLE_KEYS = ("src_ip", "src_port", "dst_ip", "dst_port")

_REQUIRED = {
    "fork": ("child_pid", "child_tid"),
    "clone": ("child_pid", "child_tid"),
    "execve": ("path",),
    "exit": (),
    "socket": ("fd",),
    "connect": ("fd",) + _TUPLE_KEYS,
    "accept": ("fd",) + _TUPLE_KEYS,
    "dup": ("fd", "new_fd"),
    "close": ("fd",),
    "openat": ("path", "fd"),
    "read": ("fd",),
    "write": ("fd", "data_b64"),
    "unlink": ("path",),
    "rename": ("old_path", "new_path"),
    "sendto": ("fd", "data_b64"),
    "recvfrom": ("fd",),
}

MAX_PAYLOAD = 1 << 20


class TraceError(Exception):
    pass


class MalformedRecord(TraceError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class OrderViolation(TraceError):
    def __init__(self, line_no: int, prev_seq: int, seq: int):
        super().__init__(f"line {line_no}: seq {seq} does not follow {prev_seq}")
        self.line_no = line_no


class Marker(str, Enum):
    BEGIN = "begin"
    END = "end"
    SWITCH_IN = "switch_in"
    SWITCH_OUT = "switch_out"


@dataclass(frozen=True, slots=True, order=True)
class NetworkTuple:
    """Connection 4-tuple, always oriented client -> server."""

    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int

    def __post_init__(self):
        for port in (self.src_port, self.dst_port):
            if not 1 <= port <= 65535:
                raise ValueError(f"port out of range: {port}")

    @property
    def client(self) -> str:
        return f"{self.src_ip}:{self.src_port}"

    @property
    def server(self) -> tuple[str, int]:
        return (self.dst_ip, self.dst_port)

    def __str__(self) -> str:
        return f"{self.src_ip}:{self.src_port}->{self.dst_ip}:{self.dst_port}"

    @classmethod
    def parse(cls, text: str) -> "NetworkTuple":
        src, dst = text.split("->")
        sip, sport = src.rsplit(":", 1)
        dip, dport = dst.rsplit(":", 1)
        return cls(sip, int(sport), dip, int(dport))


@dataclass(frozen=True, slots=True)
class SyscallArgs:
    fd: int | None = None
    new_fd: int | None = None
    path: str | None = None
    flags: str | None = None
    old_path: str | None = None
    new_path: str | None = None
    offset: int | None = None
    data: bytes | None = None
    child_pid: int | None = None
    child_tid: int | None = None
    src_ip: str | None = None
    src_port: int | None = None
    dst_ip: str | None = None
    dst_port: int | None = None

    @property
    def tuple(self) -> NetworkTuple | None:
        if self.src_ip is None or self.dst_ip is None:
            return None
        return NetworkTuple(self.src_ip, self.src_port, self.dst_ip, self.dst_port)

    def flag_set(self) -> frozenset[str]:
        return frozenset(self.flags.split("|")) if self.flags else frozenset()


@dataclass(frozen=True, slots=True)
class SyscallPayload:
    name: str
    args: SyscallArgs = SyscallArgs()


@dataclass(frozen=True, slots=True)
class DelimiterPayload:
    request_id: str
    marker: Marker


Payload = Union[SyscallPayload, DelimiterPayload]


@dataclass(frozen=True, slots=True)
class FdInfo:
    """What an fd referred to when an event used it."""

    kind: str  # "socket" | "file"
    tuple: NetworkTuple | None = None
    outbound: bool | None = None
    path: str | None = None


@dataclass(frozen=True, slots=True)
class Event:
    seq: int
    ts: int
    host: str
    pid: int
    tid: int
    payload: Payload
    fd_info: FdInfo | None = None

    @property
    def is_syscall(self) -> bool:
        return isinstance(self.payload, SyscallPayload)

    @property
    def is_delimiter(self) -> bool:
        return isinstance(self.payload, DelimiterPayload)

    @property
    def name(self) -> str | None:
        return self.payload.name if isinstance(self.payload, SyscallPayload) else None

    @property
    def args(self) -> SyscallArgs:
        return self.payload.args  # type: ignore[union-attr]

    @property
    def thread(self) -> tuple[int, int]:
        return (self.pid, self.tid)

    @property
    def key(self) -> tuple[str, int]:
        """Identity of an event across the whole analysis: (host, seq)."""
        return (self.host, self.seq)

    @property
    def tuple(self) -> NetworkTuple | None:
        if self.fd_info is not None and self.fd_info.tuple is not None:
            return self.fd_info.tuple
        if self.is_syscall:
            return self.args.tuple
        return None

    @property
    def file_path(self) -> str | None:
        if not self.is_syscall:
            return None
        if self.args.path is not None:
            return self.args.path
        if self.fd_info is not None and self.fd_info.kind == "file":
            return self.fd_info.path
        return None


def order_key(ev: Event) -> tuple[int, int, str]:
    return (ev.ts, ev.seq, ev.host)


@dataclass(frozen=True, slots=True)
class Diagnostic:
    kind: str
    host: str
    seq: int
    detail: str = ""


class EventLog:
    """Immutable ordered sequence of events with lazily built indexes."""

    __slots__ = ("events", "diagnostics", "_by_thread")

    def __init__(self, events: Iterable[Event] = (), diagnostics: Iterable[Diagnostic] = ()):
        self.events: tuple[Event, ...] = tuple(events)
        self.diagnostics: tuple[Diagnostic, ...] = tuple(diagnostics)
        self._by_thread: dict[tuple[str, int, int], list[Event]] | None = None

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)

    def __getitem__(self, i):
        return self.events[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, EventLog) and self.events == other.events

    def __repr__(self) -> str:
        return f"EventLog({len(self.events)} events)"

    def by_thread(self) -> dict[tuple[str, int, int], list[Event]]:
        if self._by_thread is None:
            idx: dict[tuple[str, int, int], list[Event]] = defaultdict(list)
            for ev in self.events:
                idx[(ev.host, ev.pid, ev.tid)].append(ev)
            self._by_thread = dict(idx)
        return self._by_thread

    def thread_events(self, host: str, pid: int, tid: int) -> list[Event]:
        return self.by_thread().get((host, pid, tid), [])

    def delimiters(self, request_id: str | None = None) -> list[Event]:
        return [
            ev
            for ev in self.events
            if ev.is_delimiter and (request_id is None or ev.payload.request_id == request_id)
        ]

    def hosts(self) -> set[str]:
        return {ev.host for ev in self.events}

    def for_host(self, host: str) -> "EventLog":
        return EventLog((ev for ev in self.events if ev.host == host), self.diagnostics)

    @property
    def end_ts(self) -> int:
        return self.events[-1].ts if self.events else 0


# --------------------------------------------------------------------------
# parsing / serialization


def _decode_args(name: str, raw: dict, line_no: int) -> SyscallArgs:
    if not isinstance(raw, dict):
        raise MalformedRecord(line_no, "args must be an object")
    unknown = set(raw) - set(ARG_KEYS)
    if unknown:
        raise MalformedRecord(line_no, f"unknown args {sorted(unknown)}")
    missing = [k for k in _REQUIRED[name] if k not in raw]
    if missing:
        raise MalformedRecord(line_no, f"{name} missing args {missing}")
    values = {}
    for key, val in raw.items():
        if key in _INT_ARGS:
            if type(val) is not int:
                raise MalformedRecord(line_no, f"arg {key} must be an integer")
            if key in ("src_port", "dst_port") and not 1 <= val <= 65535:
                raise MalformedRecord(line_no, f"{key} out of range: {val}")
            values[key] = val
        elif key in _STR_ARGS:
            if not isinstance(val, str):
                raise MalformedRecord(line_no, f"arg {key} must be a string")
            values[key] = val
        else:  # data_b64
            try:
                values["data"] = base64.b64decode(val, validate=True)
            except (ValueError, TypeError) as exc:
                raise MalformedRecord(line_no, f"bad data_b64: {exc}") from None
    try:
        return SyscallArgs(**values)
    except ValueError as exc:
        raise MalformedRecord(line_no, str(exc)) from None


def decode_record(obj: dict, host: str, line_no: int = 0) -> Event:
    if not isinstance(obj, dict):
        raise MalformedRecord(line_no, "record is not an object")
    base = ("seq", "ts", "pid", "tid", "kind")
    for key in base:
        if key not in obj:
            raise MalformedRecord(line_no, f"missing field {key}")
    for key in base[:4]:
        if type(obj[key]) is not int:
            raise MalformedRecord(line_no, f"{key} must be an integer")
    if obj["ts"] < 0:
        raise MalformedRecord(line_no, "negative ts")
    kind = obj["kind"]
    if kind == "syscall":
        allowed = set(base) | {"name", "args"}
        if set(obj) - allowed:
            raise MalformedRecord(line_no, f"unknown fields {sorted(set(obj) - allowed)}")
        name = obj.get("name")
        if name not in SYSCALL_NAMES:
            raise MalformedRecord(line_no, f"unknown syscall {name!r}")
        payload: Payload = SyscallPayload(name, _decode_args(name, obj.get("args", {}), line_no))
    elif kind == "delimiter":
        allowed = set(base) | {"request_id", "marker"}
        if set(obj) - allowed:
            raise MalformedRecord(line_no, f"unknown fields {sorted(set(obj) - allowed)}")
        rid = obj.get("request_id")
        if not isinstance(rid, str) or not rid:
            raise MalformedRecord(line_no, "request_id must be a non-empty string")
        try:
            marker = Marker(obj.get("marker"))
        except ValueError:
            raise MalformedRecord(line_no, f"bad marker {obj.get('marker')!r}") from None
        payload = DelimiterPayload(rid, marker)
    else:
        raise MalformedRecord(line_no, f"unknown kind {kind!r}")
    return Event(obj["seq"], obj["ts"], host, obj["pid"], obj["tid"], payload)


def encode_record(ev: Event) -> dict:
    rec: dict = {"seq": ev.seq, "ts": ev.ts, "pid": ev.pid, "tid": ev.tid}
    if isinstance(ev.payload, DelimiterPayload):
        rec["kind"] = "delimiter"
        rec["request_id"] = ev.payload.request_id
        rec["marker"] = ev.payload.marker.value
        return rec
    rec["kind"] = "syscall"
    rec["name"] = ev.payload.name
    args = ev.payload.args
    out = {}
    for key in ARG_KEYS:
        if key == "data_b64":
            if args.data is not None:
                out[key] = base64.b64encode(args.data).decode("ascii")
            continue
        val = getattr(args, key)
        if val is not None:
            out[key] = val
    rec["args"] = out
    return rec


def dump_line(ev: Event) -> str:
    return json.dumps(encode_record(ev), separators=(",", ":"))


def parse_trace(stream: IO[bytes] | bytes | str, host_label: str) -> EventLog:
    """Parse a canonical trace into an EventLog ordered by (ts, seq)."""
    if isinstance(stream, (bytes, str)):
        data = stream.encode() if isinstance(stream, str) else stream
        lines = data.splitlines()
    else:
        lines = stream
    events: list[Event] = []
    prev_seq = None
    for line_no, raw in enumerate(lines, 1):
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8", errors="strict")
        raw = raw.strip()
        if not raw:
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(line_no, f"invalid JSON: {exc.msg}") from None
        ev = decode_record(obj, host_label, line_no)
        if prev_seq is not None and ev.seq <= prev_seq:
            raise OrderViolation(line_no, prev_seq, ev.seq)
        prev_seq = ev.seq
        events.append(ev)
    events.sort(key=lambda e: (e.ts, e.seq))
    return EventLog(events)


def serialize_trace(log: EventLog | Iterable[Event]) -> bytes:
    return b"".join((dump_line(ev) + "\n").encode() for ev in log)


def read_trace(path, host_label: str) -> EventLog:
    with open(path, "rb") as fh:
        return parse_trace(fh, host_label)


def write_trace(path, log: EventLog | Iterable[Event]) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_trace(log))


def split_write(data: bytes, limit: int = MAX_PAYLOAD) -> list[bytes]:
    """Chunks a large write into records of at most ``limit`` bytes."""
    if len(data) <= limit:
        return [data]
    return [data[i : i + limit] for i in range(0, len(data), limit)]


# --------------------------------------------------------------------------
# merging


def merge_logs(logs: Iterable[EventLog]) -> EventLog:
    """K-way merge into one log ordered by (ts, seq, host)."""
    logs = list(logs)
    merged = heapq.merge(*(log.events for log in logs), key=order_key)
    diags = [d for log in logs for d in log.diagnostics]
    return EventLog(merged, diags)


# --------------------------------------------------------------------------
# fd resolution

_IO_CALLS = {"read", "write", "sendto", "recvfrom"}


def resolve_fd_tuples(log: EventLog) -> EventLog:
    """Annotate I/O events with what their fd referred to at that instant.

    fd tables are tracked per (host, pid); threads share their process's
    table and a child process starts from a copy of its parent's. An I/O
    event on an fd with no known origin stays unannotated and produces an
    ``unknown_fd`` diagnostic.
    """
    tables: dict[tuple[str, int], dict[int, FdInfo]] = defaultdict(dict)
    out: list[Event] = []
    diags: list[Diagnostic] = list(log.diagnostics)
    for ev in log.events:
        if not ev.is_syscall:
            out.append(ev)
            continue
        name = ev.payload.name
        args = ev.payload.args
        table = tables[(ev.host, ev.pid)]
        info: FdInfo | None = None
        if name == "socket":
            info = FdInfo("socket")
            table[args.fd] = info
        elif name in ("connect", "accept"):
            info = FdInfo("socket", args.tuple, name == "connect")
            table[args.fd] = info
        elif name == "openat":
            info = FdInfo("file", path=args.path)
            table[args.fd] = info
        elif name == "dup":
            src = table.get(args.fd)
            if src is None:
                table.pop(args.new_fd, None)
                diags.append(Diagnostic("unknown_fd", ev.host, ev.seq, f"dup of fd {args.fd}"))
            else:
                table[args.new_fd] = src
                info = src
        elif name == "close":
            info = table.pop(args.fd, None)
        elif name in ("fork", "clone"):
            if args.child_pid != ev.pid:
                tables[(ev.host, args.child_pid)] = dict(table)
        elif name == "exit":
            if ev.tid == ev.pid:
                tables.pop((ev.host, ev.pid), None)
        elif name == "rename":
            for (host, _), tbl in tables.items():
                if host != ev.host:
                    continue
                for fd, fi in tbl.items():
                    if fi.kind == "file" and fi.path == args.old_path:
                        tbl[fd] = FdInfo("file", path=args.new_path)
        elif name in _IO_CALLS:
            info = table.get(args.fd)
            if name == "sendto" and args.tuple is not None:
                info = FdInfo("socket", args.tuple, True)
            elif info is None and args.path is not None:
                info = FdInfo("file", path=args.path)
            if info is None:
                diags.append(Diagnostic("unknown_fd", ev.host, ev.seq, f"{name} on fd {args.fd}"))
        out.append(replace(ev, fd_info=info) if info is not None else ev)
    return EventLog(out, diags)
