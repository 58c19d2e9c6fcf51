"""Rollback-filter-replay planning and execution for the DB and file tree."""

from __future__ import annotations

import base64
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Union

from .dbattr import DBOperation, same_operation
from .provenance import FileOperation
from .statestore import (
    DATA,
    SYSTEM_APP,
    BackupChain,
    DBSnapshot,
    DBState,
    DBStore,
    FileTree,
    MissingFile,
    NoBackupBefore,
    WriteLogRecord,
    canonical_json,
    parse_statement,
    restore_db,
    restore_file_version,
    write_at,
)

log = logging.getLogger(__name__)

STRUCTURED_SUFFIXES = (".db", ".sqlite", ".bin", ".zip", ".gz", ".tar", ".png", ".pdf")

FULL_ROLLBACK = "full_rollback"
SELECTIVE_REPLAY = "selective_replay"
SKIP = "skip"
CHOICES = (FULL_ROLLBACK, SELECTIVE_REPLAY, SKIP)


class NoCleanSnapshot(Exception):
    pass


class ProviderAbort(Exception):
    pass


class UniverseMismatch(ValueError):
    pass


def default_structured(path: str) -> bool:
    return path.lower().endswith(STRUCTURED_SUFFIXES)


# --------------------------------------------------------------------------
# database


@dataclass
class DBPlan:
    baseline: DBSnapshot
    replay: list[DBOperation]
    malicious: list[DBOperation]
    unmatched_malicious: list[DBOperation] = field(default_factory=list)
    dependency_warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "baseline": {"ts": self.baseline.ts, "id": self.baseline.id},
            "replay": [_op_json(o) for o in self.replay],
            "malicious": [_op_json(o) for o in self.malicious],
            "unmatched_malicious": [_op_json(o) for o in self.unmatched_malicious],
            "dependency_warnings": self.dependency_warnings,
        }


def _op_json(op: DBOperation) -> dict:
    worker = list(op.worker) if isinstance(op.worker, tuple) else op.worker
    return {"ts": op.ts, "statement": op.statement, "worker": worker}


def op_from_json(obj: dict) -> DBOperation:
    worker = obj.get("worker")
    if isinstance(worker, list):
        worker = tuple(worker)
    return DBOperation(obj["ts"], obj["statement"], worker)


def _row_key(op: DBOperation):
    try:
        st = parse_statement(op.statement)
    except ValueError:
        return None
    return (st.table, st.key)


def plan_db_recovery(
    malicious: Iterable[DBOperation], snapshots: Iterable[DBSnapshot], full_log: Iterable[DBOperation]
) -> DBPlan:
    malicious = sorted(malicious, key=lambda o: o.key)
    snapshots = sorted(snapshots, key=lambda s: s.ts)
    full_log = list(full_log)
    if not snapshots:
        raise NoCleanSnapshot("no database snapshots available")
    if malicious:
        first = malicious[0].ts
        clean = [s for s in snapshots if s.ts < first]
        if not clean:
            raise NoCleanSnapshot(f"every snapshot is at or after the first malicious op (ts={first})")
        baseline = clean[-1]
    else:
        baseline = snapshots[-1]

    by_key: dict[tuple[int, str], list[DBOperation]] = defaultdict(list)
    for m in malicious:
        by_key[m.key].append(m)
    matched: set[int] = set()
    replay = []
    for op in full_log:
        if op.ts <= baseline.ts:
            continue
        hits = [i for i, m in enumerate(by_key.get(op.key, ())) if same_operation(m, op)]
        if hits:
            matched.add(id(by_key[op.key][hits[0]]))
            continue
        replay.append(op)
    unmatched = [m for m in malicious if id(m) not in matched]

    warnings = []
    tainted = {}
    for m in malicious:
        rk = _row_key(m)
        if rk is not None:
            tainted.setdefault(rk, m.ts)
    for op in replay:
        rk = _row_key(op)
        if rk in tainted and op.ts > tainted[rk]:
            warnings.append(f"replayed {op.statement!r} at ts={op.ts} touches row {rk[0]}/{rk[1]} written by a filtered op")
    return DBPlan(baseline, replay, malicious, unmatched, warnings)


def replay_db(plan: DBPlan) -> tuple[DBState, list[str]]:
    state = restore_db(plan.baseline)
    notes = []
    for op in plan.replay:
        diag = state.apply(op.statement)
        if diag:
            notes.append(diag)
    return state, notes


def execute_db_recovery(plan: DBPlan, store: DBStore) -> DBState:
    """Rebuilds from the baseline aside and swaps it in only on success."""
    state, notes = replay_db(plan)
    for note in notes:
        log.info("replay no-op: %s", note)
    store.state = state
    return state


# --------------------------------------------------------------------------
# file system


@dataclass(frozen=True)
class BaselineRestore:
    path: str
    content: bytes | None  # None: the path must not exist afterwards


@dataclass(frozen=True)
class IncrementalReplay:
    path: str
    base_version_ts: int
    base: bytes | None
    replay: tuple[WriteLogRecord, ...]


@dataclass(frozen=True)
class Interactive:
    path: str
    base_version_ts: int | None
    base: bytes | None
    history: tuple[tuple[WriteLogRecord, bool], ...]  # (record, is_malicious)
    reason: str = ""


Action = Union[BaselineRestore, IncrementalReplay, Interactive]


@dataclass
class FSPlan:
    actions: list[Action] = field(default_factory=list)

    def paths(self) -> set[str]:
        return {a.path for a in self.actions}

    def action_for(self, path: str) -> Action | None:
        for a in self.actions:
            if a.path == path:
                return a
        return None

    def to_json(self) -> dict:
        return {"actions": [action_to_json(a) for a in self.actions]}


def _b64(data: bytes | None):
    return None if data is None else base64.b64encode(data).decode("ascii")


def _unb64(text):
    return None if text is None else base64.b64decode(text)


def action_to_json(a: Action) -> dict:
    if isinstance(a, BaselineRestore):
        return {"action": "baseline_restore", "path": a.path, "content_b64": _b64(a.content)}
    if isinstance(a, IncrementalReplay):
        return {
            "action": "incremental_replay", "path": a.path, "base_version_ts": a.base_version_ts,
            "base_b64": _b64(a.base), "replay": [r.to_json() for r in a.replay],
        }
    return {
        "action": "interactive", "path": a.path, "base_version_ts": a.base_version_ts,
        "base_b64": _b64(a.base), "reason": a.reason,
        "history": [dict(r.to_json(), malicious=m) for r, m in a.history],
    }


def action_from_json(obj: dict) -> Action:
    kind = obj["action"]
    if kind == "baseline_restore":
        return BaselineRestore(obj["path"], _unb64(obj["content_b64"]))
    if kind == "incremental_replay":
        return IncrementalReplay(
            obj["path"], obj["base_version_ts"], _unb64(obj["base_b64"]),
            tuple(WriteLogRecord.from_json(r) for r in obj["replay"]),
        )
    return Interactive(
        obj["path"], obj["base_version_ts"], _unb64(obj["base_b64"]),
        tuple((WriteLogRecord.from_json(r), r["malicious"]) for r in obj["history"]),
        obj.get("reason", ""),
    )


def plan_fs_recovery(
    malicious: Iterable[FileOperation],
    tree: FileTree,
    chain: BackupChain,
    write_log: Iterable[WriteLogRecord],
    baseline: Mapping[str, bytes],
    classification: Mapping[str, str] | None = None,
    structured: Callable[[str], bool] = default_structured,
) -> FSPlan:
    if classification is not None:
        tree = FileTree(tree.entries, dict(classification))
    malicious = list(malicious)
    mal_keys = {(op.seq, op.ts) for op in malicious}
    first_bad: dict[str, int] = {}
    for op in malicious:
        for p in op.paths():
            first_bad[p] = min(first_bad.get(p, op.ts), op.ts)
    records_by_path: dict[str, list[WriteLogRecord]] = defaultdict(list)
    for rec in sorted(write_log, key=lambda r: (r.ts, r.seq)):
        for p in rec.paths():
            records_by_path[p].append(rec)

    # classify up front so a gap aborts before any action is produced
    classes = {p: tree.classify(p) for p in first_bad}
    actions: list[Action] = []
    for path in sorted(first_bad):
        cls = classes[path]
        if cls == SYSTEM_APP:
            actions.append(BaselineRestore(path, baseline.get(path)))
            continue
        try:
            manifest = chain.version_at(first_bad[path] - 1)
        except NoBackupBefore:
            history = tuple((r, r.key in mal_keys) for r in records_by_path[path])
            actions.append(Interactive(path, None, None, history, "no backup before the attack"))
            continue
        base = restore_file_version(chain, path, manifest.ts)
        later = [r for r in records_by_path[path] if r.ts > manifest.ts]
        benign = [r for r in later if r.key not in mal_keys]
        if base is None and not benign:
            # created only by the attack: nothing legitimate to keep
            actions.append(BaselineRestore(path, None))
        elif structured(path):
            history = tuple((r, r.key in mal_keys) for r in later)
            actions.append(Interactive(path, manifest.ts, base, history, "structured file"))
        elif any(r.kind == "rename" for r in later):
            history = tuple((r, r.key in mal_keys) for r in later)
            actions.append(Interactive(path, manifest.ts, base, history, "rename in replay window"))
        else:
            actions.append(IncrementalReplay(path, manifest.ts, base, tuple(benign)))
    return FSPlan(actions)


def _replay_content(path: str, base: bytes | None, records: Iterable[WriteLogRecord]) -> bytes | None:
    content = base
    for r in records:
        if r.kind == "create":
            if content is None or r.truncate:
                content = b""
        elif r.kind == "write":
            if content is None:
                log.info("replayed write to missing %s skipped", path)
                continue
            content = write_at(content, r.offset, r.data)
        elif r.kind == "delete":
            content = None
        else:
            raise MissingFile(f"rename cannot be replayed per-file: {path}")
    return content


def _set(tree: FileTree, path: str, content: bytes | None) -> None:
    if content is None:
        tree.entries.pop(path, None)
    else:
        tree.entries[path] = content


DecisionProvider = Callable[[Interactive], str]


def execute_fs_recovery(plan: FSPlan, tree: FileTree, decision_provider: DecisionProvider | None = None) -> tuple[FileTree, dict[str, str]]:
    """Returns the recovered tree (a new object) and the interactive choices."""
    new = tree.copy()
    choices: dict[str, str] = {}
    for action in plan.actions:
        if isinstance(action, BaselineRestore):
            _set(new, action.path, action.content)
        elif isinstance(action, IncrementalReplay):
            _set(new, action.path, _replay_content(action.path, action.base, action.replay))
        else:
            if decision_provider is None:
                raise ProviderAbort(f"no decision provider for interactive file {action.path}")
            choice = decision_provider(action)
            if choice not in CHOICES:
                raise ProviderAbort(f"invalid choice {choice!r} for {action.path}")
            choices[action.path] = choice
            if choice == FULL_ROLLBACK:
                _set(new, action.path, action.base)
            elif choice == SELECTIVE_REPLAY:
                benign = [r for r, bad in action.history if not bad and r.kind != "rename"]
                _set(new, action.path, _replay_content(action.path, action.base, benign))
    return new, choices


class ScriptedDecisions:
    """Decision provider backed by a {path: choice} mapping."""

    def __init__(self, decisions: Mapping[str, str]):
        self.decisions = dict(decisions)
        self.asked: list[str] = []

    def __call__(self, action: Interactive) -> str:
        self.asked.append(action.path)
        try:
            return self.decisions[action.path]
        except KeyError:
            raise ProviderAbort(f"no scripted decision for {action.path}") from None

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "ScriptedDecisions":
        return cls({r["path"]: r["choice"] for r in records})


# --------------------------------------------------------------------------
# restored operation sets and strict accuracy


OpId = tuple


def db_op_id(op: DBOperation) -> OpId:
    return ("db", op.ts, op.statement)


def file_op_id(op: FileOperation) -> OpId:
    return ("file", op.host, op.seq)


def restored_db_ids(plan: DBPlan, full_log: Iterable[DBOperation]) -> set[OpId]:
    kept = {db_op_id(o) for o in plan.replay}
    return {db_op_id(o) for o in full_log if o.ts <= plan.baseline.ts or db_op_id(o) in kept}


def file_op_restored(op: FileOperation, plan: FSPlan, choices: Mapping[str, str] | None = None) -> bool:
    choices = choices or {}
    restored = True
    for path in op.paths():
        action = plan.action_for(path)
        if action is None:
            continue
        if isinstance(action, BaselineRestore):
            restored = False
        elif isinstance(action, IncrementalReplay):
            kept = {r.key for r in action.replay}
            restored &= op.ts <= action.base_version_ts or (op.seq, op.ts) in kept
        else:
            choice = choices.get(path, SKIP)
            base_ts = action.base_version_ts if action.base_version_ts is not None else -1
            if choice == FULL_ROLLBACK:
                restored &= op.ts <= base_ts
            elif choice == SELECTIVE_REPLAY:
                kept = {r.key for r, bad in action.history if not bad}
                restored &= op.ts <= base_ts or (op.seq, op.ts) in kept
    return restored


def restored_sets(
    attributed: Mapping[str, Mapping[str, Iterable]],
    db_plan: DBPlan | None,
    full_log: Iterable[DBOperation],
    fs_plan: FSPlan | None,
    choices: Mapping[str, str] | None = None,
) -> dict[str, frozenset]:
    """P: for each request, which of its attributed operations survive recovery.

    ``attributed`` maps request id -> {"db": [DBOperation], "file": [FileOperation]}.
    """
    full_log = list(full_log)
    restored_db = restored_db_ids(db_plan, full_log) if db_plan else {db_op_id(o) for o in full_log}
    fs_plan = fs_plan or FSPlan()
    out = {}
    for rid, ops in attributed.items():
        kept = {db_op_id(o) for o in ops.get("db", ()) if db_op_id(o) in restored_db}
        kept |= {file_op_id(o) for o in ops.get("file", ()) if file_op_restored(o, fs_plan, choices)}
        out[rid] = frozenset(kept)
    return out


def compute_recovery_accuracy(P: Mapping[str, Iterable], Q: Mapping[str, Iterable]) -> float:
    if set(P) != set(Q):
        missing = sorted(set(Q) ^ set(P))[:5]
        raise UniverseMismatch(f"request universes differ, e.g. {missing}")
    if not P:
        return 1.0
    exact = sum(1 for rid in P if set(P[rid]) == set(Q[rid]))
    return exact / len(P)


def plan_to_json(db_plan: DBPlan | None, fs_plan: FSPlan | None) -> bytes:
    obj = {
        "db": db_plan.to_json() if db_plan else None,
        "fs": fs_plan.to_json() if fs_plan else None,
    }
    return canonical_json(obj)
