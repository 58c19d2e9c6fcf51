"""The recoverable world: DB model, file tree, snapshots, backups, write-log.

Statements use a small deterministic grammar::

    INS <table> <key> <json-object>
    UPD <table> <key> <json-object>
    DEL <table> <key>

``INS`` replaces any existing row, ``UPD`` merges fields into an existing
row, ``DEL`` removes it. ``UPD``/``DEL`` of a missing key is a logged no-op.
"""

from __future__ import annotations

import base64
import copy
import hashlib
import json
import logging
import os
import posixpath
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

log = logging.getLogger(__name__)

SYSTEM_APP = "system_app"
DATA = "data"


class StatementParseError(ValueError):
    pass


class CorruptSnapshot(Exception):
    pass


class MissingFile(FileNotFoundError):
    pass


class NonMonotoneTs(ValueError):
    pass


class NoBackupBefore(LookupError):
    def __init__(self, ts: int):
        super().__init__(f"no backup at or before ts={ts}")
        self.ts = ts


class NotSystemPath(ValueError):
    pass


class ClassificationGap(LookupError):
    def __init__(self, path: str):
        super().__init__(f"path {path!r} is not covered by any directory class")
        self.path = path


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# --------------------------------------------------------------------------
# database model


@dataclass(frozen=True, slots=True)
class Statement:
    verb: str
    table: str
    key: str
    fields: dict | None = None


def parse_statement(text: str) -> Statement:
    parts = text.split(" ", 3)
    if len(parts) < 3 or parts[0] not in ("INS", "UPD", "DEL"):
        raise StatementParseError(f"cannot parse statement {text!r}")
    verb, table, key = parts[:3]
    if not table or not key:
        raise StatementParseError(f"empty table or key in {text!r}")
    if verb == "DEL":
        if len(parts) != 3:
            raise StatementParseError(f"DEL takes no payload: {text!r}")
        return Statement(verb, table, key)
    if len(parts) != 4:
        raise StatementParseError(f"{verb} needs a JSON object: {text!r}")
    try:
        fields = json.loads(parts[3])
    except json.JSONDecodeError as exc:
        raise StatementParseError(f"bad JSON in {text!r}: {exc.msg}") from None
    if not isinstance(fields, dict):
        raise StatementParseError(f"payload must be an object: {text!r}")
    return Statement(verb, table, key, fields)


def render_statement(verb: str, table: str, key: str, fields: dict | None = None) -> str:
    if verb == "DEL":
        return f"DEL {table} {key}"
    return f"{verb} {table} {key} {json.dumps(fields, sort_keys=True, separators=(',', ':'))}"


class DBState:
    """table -> primary key -> row. Equality is structural; empty tables are ignored."""

    __slots__ = ("tables",)

    def __init__(self, tables: dict | None = None):
        self.tables: dict[str, dict[str, dict]] = tables if tables is not None else {}

    def __eq__(self, other) -> bool:
        return isinstance(other, DBState) and self.to_json() == other.to_json()

    def __repr__(self) -> str:
        rows = sum(len(t) for t in self.tables.values())
        return f"DBState({len(self.tables)} tables, {rows} rows)"

    def copy(self) -> "DBState":
        return DBState({name: {k: dict(row) for k, row in t.items()} for name, t in self.tables.items()})

    def apply(self, statement: str | Statement) -> str | None:
        """Applies in place; returns a diagnostic for no-op updates/deletes."""
        st = parse_statement(statement) if isinstance(statement, str) else statement
        table = self.tables.setdefault(st.table, {})
        if st.verb == "INS":
            table[st.key] = copy.deepcopy(st.fields)
            return None
        if st.key not in table:
            return f"{st.verb} of missing key {st.table}/{st.key}"
        if st.verb == "UPD":
            table[st.key].update(copy.deepcopy(st.fields))
        else:
            del table[st.key]
        return None

    def to_json(self):
        return {name: rows for name, rows in self.tables.items() if rows}

    def canonical_bytes(self) -> bytes:
        return canonical_json(self.to_json())

    def digest(self) -> str:
        return sha256_hex(self.canonical_bytes())

    @classmethod
    def from_json(cls, obj) -> "DBState":
        return cls({name: {k: dict(r) for k, r in rows.items()} for name, rows in obj.items()})


def apply_db_op(state: DBState, op) -> DBState:
    """Pure variant: returns a new state with ``op`` (a statement or DBOperation) applied."""
    text = op if isinstance(op, str) else op.statement
    new = state.copy()
    diag = new.apply(text)
    if diag:
        log.info("no-op: %s", diag)
    return new


@dataclass(frozen=True, slots=True)
class DBSnapshot:
    ts: int
    data: bytes
    id: str

    def to_json(self) -> dict:
        return {"ts": self.ts, "id": self.id, "state": json.loads(self.data)}

    @classmethod
    def from_json(cls, obj: dict) -> "DBSnapshot":
        data = canonical_json(obj["state"])
        return cls(obj["ts"], data, obj["id"])


def snapshot_db(state: DBState, ts: int) -> DBSnapshot:
    data = state.canonical_bytes()
    return DBSnapshot(ts, data, sha256_hex(data))


def restore_db(snap: DBSnapshot) -> DBState:
    if sha256_hex(snap.data) != snap.id:
        raise CorruptSnapshot(f"snapshot at ts={snap.ts} fails its content hash")
    return DBState.from_json(json.loads(snap.data))


@dataclass
class DBStore:
    """Live database plus its periodic snapshots."""

    state: DBState
    snapshots: list[DBSnapshot] = field(default_factory=list)


# --------------------------------------------------------------------------
# file tree


def normalize_path(path: str) -> str:
    if not path.startswith("/"):
        raise ValueError(f"path must be absolute: {path!r}")
    return posixpath.normpath(path).replace("//", "/")


def _under(path: str, prefix: str) -> bool:
    return prefix == "/" or path == prefix or path.startswith(prefix.rstrip("/") + "/")


def check_classification(classification: dict[str, str]) -> dict[str, str]:
    norm = {normalize_path(p): c for p, c in classification.items()}
    for c in norm.values():
        if c not in (SYSTEM_APP, DATA):
            raise ValueError(f"unknown directory class {c!r}")
    prefixes = sorted(norm)
    for i, p in enumerate(prefixes):
        for q in prefixes[i + 1 :]:
            if _under(q, p):
                raise ValueError(f"overlapping classification prefixes {p!r} and {q!r}")
    return norm


class FileTree:
    """In-memory file tree: absolute path -> bytes, plus directory classes."""

    def __init__(self, entries: dict[str, bytes] | None = None, classification: dict[str, str] | None = None):
        self.entries: dict[str, bytes] = {normalize_path(p): bytes(v) for p, v in (entries or {}).items()}
        self.classification = check_classification(classification or {})

    def __eq__(self, other) -> bool:
        return isinstance(other, FileTree) and self.entries == other.entries

    def __repr__(self) -> str:
        return f"FileTree({len(self.entries)} files)"

    def __contains__(self, path: str) -> bool:
        return path in self.entries

    def get(self, path: str) -> bytes | None:
        return self.entries.get(path)

    def copy(self) -> "FileTree":
        new = FileTree.__new__(FileTree)
        new.entries = dict(self.entries)
        new.classification = dict(self.classification)
        return new

    def classify(self, path: str) -> str:
        for prefix, cls in self.classification.items():
            if _under(path, prefix):
                return cls
        raise ClassificationGap(path)

    def paths_in(self, cls: str) -> list[str]:
        out = []
        for p in sorted(self.entries):
            try:
                if self.classify(p) == cls:
                    out.append(p)
            except ClassificationGap:
                pass
        return out

    def apply(self, op) -> str | None:
        """Applies a FileOperation-like op in place; returns a diagnostic on no-op."""
        path = op.path
        kind = op.kind
        if kind == "create":
            if path not in self.entries or getattr(op, "truncate", False):
                self.entries[path] = b""
        elif kind == "write":
            if path not in self.entries:
                raise MissingFile(path)
            self.entries[path] = write_at(self.entries[path], op.offset, op.data)
        elif kind == "delete":
            if path not in self.entries:
                return f"delete of missing {path}"
            del self.entries[path]
        elif kind == "rename":
            if path not in self.entries:
                raise MissingFile(path)
            self.entries[op.rename_to] = self.entries.pop(path)
        else:
            raise ValueError(f"unknown file op kind {kind!r}")
        return None

    def digest(self) -> str:
        return sha256_hex(canonical_json({p: sha256_hex(v) for p, v in self.entries.items()}))

    def to_json(self) -> dict:
        return {
            "classification": self.classification,
            "entries": {p: base64.b64encode(v).decode("ascii") for p, v in sorted(self.entries.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FileTree":
        entries = {p: base64.b64decode(v) for p, v in obj["entries"].items()}
        return cls(entries, obj.get("classification", {}))


def write_at(content: bytes, offset: int, data: bytes) -> bytes:
    if offset > len(content):
        content = content + b"\0" * (offset - len(content))
    return content[:offset] + data + content[offset + len(data) :]


def apply_file_op(tree: FileTree, op, payload: bytes | None = None) -> FileTree:
    """Pure variant of ``FileTree.apply``; ``payload`` overrides ``op.data``."""
    if payload is not None:
        op = _WithData(op, payload)
    new = tree.copy()
    diag = new.apply(op)
    if diag:
        log.info("no-op: %s", diag)
    return new


class _WithData:
    def __init__(self, op, data: bytes):
        self._op = op
        self.data = data

    def __getattr__(self, name):
        return getattr(self._op, name)


# --------------------------------------------------------------------------
# incremental backup chain


@dataclass(frozen=True, slots=True)
class Manifest:
    ts: int
    entries: dict[str, str]  # path -> content hash


@dataclass
class BackupChain:
    manifests: list[Manifest] = field(default_factory=list)
    store: dict[str, bytes] = field(default_factory=dict)

    @property
    def store_bytes(self) -> int:
        return sum(len(v) for v in self.store.values())

    def backup(self, tree: FileTree, ts: int, cls: str | None = DATA) -> Manifest:
        """Appends a manifest of ``tree`` (restricted to ``cls`` if classified)."""
        if self.manifests and ts <= self.manifests[-1].ts:
            raise NonMonotoneTs(f"backup ts {ts} not after {self.manifests[-1].ts}")
        prev = self.manifests[-1].entries if self.manifests else {}
        paths = tree.paths_in(cls) if (cls and tree.classification) else sorted(tree.entries)
        entries = {}
        for p in paths:
            content = tree.entries[p]
            digest = sha256_hex(content)
            # unchanged files reference the previous manifest's object
            if prev.get(p) != digest and digest not in self.store:
                self.store[digest] = content
            entries[p] = digest
        manifest = Manifest(ts, entries)
        self.manifests.append(manifest)
        return manifest

    def version_at(self, ts: int) -> Manifest:
        chosen = None
        for m in self.manifests:
            if m.ts <= ts:
                chosen = m
            else:
                break
        if chosen is None:
            raise NoBackupBefore(ts)
        return chosen

    def save(self, directory) -> None:
        directory = Path(directory)
        (directory / "objects").mkdir(parents=True, exist_ok=True)
        (directory / "manifests").mkdir(parents=True, exist_ok=True)
        for digest, content in self.store.items():
            obj = directory / "objects" / digest
            if not obj.exists():
                obj.write_bytes(content)
        for m in self.manifests:
            (directory / "manifests" / f"{m.ts}.json").write_bytes(canonical_json(m.entries))

    @classmethod
    def load(cls, directory) -> "BackupChain":
        directory = Path(directory)
        chain = cls()
        mdir = directory / "manifests"
        if mdir.exists():
            for f in sorted(mdir.glob("*.json"), key=lambda f: int(f.stem)):
                chain.manifests.append(Manifest(int(f.stem), json.loads(f.read_bytes())))
        odir = directory / "objects"
        if odir.exists():
            for f in odir.iterdir():
                chain.store[f.name] = f.read_bytes()
        for m in chain.manifests:
            for p, digest in m.entries.items():
                if digest not in chain.store:
                    raise CorruptSnapshot(f"manifest {m.ts} references missing object {digest} for {p}")
        return chain


def incremental_backup(chain: BackupChain, tree: FileTree, ts: int, cls: str | None = DATA) -> BackupChain:
    new = BackupChain(list(chain.manifests), dict(chain.store))
    new.backup(tree, ts, cls)
    return new


def restore_file_version(chain: BackupChain, path: str, ts: int) -> bytes | None:
    manifest = chain.version_at(ts)
    digest = manifest.entries.get(path)
    return None if digest is None else chain.store[digest]


def baseline_restore(tree: FileTree, path: str, baseline: dict[str, bytes]) -> FileTree:
    if tree.classify(path) != SYSTEM_APP:
        raise NotSystemPath(path)
    new = tree.copy()
    if path in baseline:
        new.entries[path] = baseline[path]
    else:
        new.entries.pop(path, None)
    return new


def capture_baseline(tree: FileTree) -> dict[str, bytes]:
    return {p: tree.entries[p] for p in tree.paths_in(SYSTEM_APP)}


# --------------------------------------------------------------------------
# write-log


@dataclass(frozen=True, slots=True)
class WriteLogRecord:
    """One captured data-directory mutation.

    Besides plain writes the capture also records creates, deletes and
    renames under data directories so that replay can reproduce them.
    """

    seq: int
    ts: int
    pid: int
    tid: int
    path: str
    offset: int = 0
    data: bytes = b""
    kind: str = "write"
    rename_to: str | None = None
    truncate: bool = False

    @property
    def key(self) -> tuple[int, int]:
        return (self.seq, self.ts)

    def paths(self) -> tuple[str, ...]:
        return (self.path, self.rename_to) if self.rename_to else (self.path,)

    def to_json(self) -> dict:
        rec = {
            "seq": self.seq, "ts": self.ts, "pid": self.pid, "tid": self.tid,
            "path": self.path, "offset": self.offset,
            "data_b64": base64.b64encode(self.data).decode("ascii"),
        }
        if self.kind != "write":
            rec["kind"] = self.kind
        if self.rename_to is not None:
            rec["rename_to"] = self.rename_to
        if self.truncate:
            rec["truncate"] = True
        return rec

    @classmethod
    def from_json(cls, obj: dict) -> "WriteLogRecord":
        return cls(
            obj["seq"], obj["ts"], obj["pid"], obj["tid"], obj["path"], obj.get("offset", 0),
            base64.b64decode(obj.get("data_b64", "")), obj.get("kind", "write"),
            obj.get("rename_to"), obj.get("truncate", False),
        )


def dump_write_log(records: Iterable[WriteLogRecord]) -> bytes:
    return b"".join(json.dumps(r.to_json(), separators=(",", ":")).encode() + b"\n" for r in records)


def load_write_log(data: bytes | str) -> list[WriteLogRecord]:
    if isinstance(data, bytes):
        data = data.decode()
    return [WriteLogRecord.from_json(json.loads(line)) for line in data.splitlines() if line.strip()]


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
