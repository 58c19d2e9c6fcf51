"""End-to-end analysis: traces in, per-request attribution and recovery out."""

from __future__ import annotations

import base64
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .dbattr import (
    Anchor,
    AppLogRecord,
    DBOperation,
    StatementIndex,
    app_log_operations,
    attribute_request,
    build_worker_index,
    parse_app_log,
)
from .partition import BACKGROUND, PartitionResult, ServerModel, partition
from .provenance import (
    ExternalInteraction,
    FileOperation,
    ProvenanceGraph,
    build_graph,
    collect_file_ops,
    detect_external,
)
from .recovery import (
    DBPlan,
    FSPlan,
    compute_recovery_accuracy,
    db_op_id,
    execute_db_recovery,
    execute_fs_recovery,
    file_op_id,
    plan_db_recovery,
    plan_fs_recovery,
    restored_sets,
)
from .sim import GroundTruth, SimulationResult
from .statestore import (
    BackupChain,
    DBSnapshot,
    DBState,
    DBStore,
    FileTree,
    WriteLogRecord,
    load_write_log,
)
from .trace import EventLog, NetworkTuple, merge_logs, parse_trace, resolve_fd_tuples


def parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad endpoint {text!r}, expected ip:port")
    return host, int(port)


@dataclass
class Scenario:
    """Everything the pipeline consumes, plus optional ground truth and store."""

    web_log: EventLog
    db_log: EventLog | None
    app_log: list[AppLogRecord]
    write_log: list[WriteLogRecord]
    server_model: ServerModel
    db_endpoints: set[tuple[str, int]]
    statement_log_path: str
    ground_truth: GroundTruth | None = None
    db_store: DBStore | None = None
    tree: FileTree | None = None
    chain: BackupChain | None = None
    baseline: dict[str, bytes] | None = None

    @property
    def global_log(self) -> EventLog:
        return merge_logs([self.web_log] + ([self.db_log] if self.db_log is not None else []))


def scenario_from_result(result: SimulationResult) -> Scenario:
    meta = result.meta()
    return Scenario(
        web_log=resolve_fd_tuples(parse_trace(result.web_trace, "web")),
        db_log=resolve_fd_tuples(parse_trace(result.db_trace, "db")),
        app_log=parse_app_log(result.db_app_log),
        write_log=list(result.write_log),
        server_model=ServerModel(meta["server_model"]),
        db_endpoints={parse_endpoint(e) for e in meta["db_endpoints"]},
        statement_log_path=meta["statement_log_path"],
        ground_truth=result.ground_truth,
        db_store=DBStore(result.db_store.state.copy(), list(result.db_store.snapshots)),
        tree=result.tree.copy(),
        chain=result.chain,
        baseline=dict(result.baseline),
    )


def load_scenario(directory) -> Scenario:
    d = Path(directory)
    info = json.loads((d / "scenario.json").read_text())
    meta = info["meta"]
    db_trace = d / "db.trace.jsonl"
    store = d / "store"
    db_store = tree = chain = baseline = None
    if store.exists():
        snaps = [
            DBSnapshot.from_json(json.loads(f.read_text()))
            for f in sorted((store / "db_snapshots").glob("*.json"), key=lambda f: int(f.stem))
        ]
        db_store = DBStore(DBState.from_json(json.loads((store / "db_state.json").read_text())), snaps)
        tree = FileTree.from_json(json.loads((store / "tree.json").read_text()))
        chain = BackupChain.load(store / "backups")
        baseline = {p: base64.b64decode(v) for p, v in json.loads((store / "baseline.json").read_text()).items()}
    gt_path = d / "ground_truth.json"
    wl_path = d / "write_log.jsonl"
    app_path = d / "db_app.log"
    return Scenario(
        web_log=resolve_fd_tuples(parse_trace((d / "web.trace.jsonl").read_bytes(), meta.get("web_host", "web"))),
        db_log=resolve_fd_tuples(parse_trace(db_trace.read_bytes(), meta.get("db_host", "db"))) if db_trace.exists() else None,
        app_log=parse_app_log(app_path.read_text()) if app_path.exists() else [],
        write_log=load_write_log(wl_path.read_bytes()) if wl_path.exists() else [],
        server_model=ServerModel(meta["server_model"]),
        db_endpoints={parse_endpoint(e) for e in meta["db_endpoints"]},
        statement_log_path=meta["statement_log_path"],
        ground_truth=GroundTruth.from_json(json.loads(gt_path.read_text())) if gt_path.exists() else None,
        db_store=db_store,
        tree=tree,
        chain=chain,
        baseline=baseline,
    )


# --------------------------------------------------------------------------


@dataclass
class RequestAnalysis:
    request_id: str
    graph: ProvenanceGraph
    file_ops: list[FileOperation]
    anchors: list[Anchor]
    db_ops: list[DBOperation]
    external: list[ExternalInteraction]
    missing_workers: list[NetworkTuple] = field(default_factory=list)

    def op_ids(self) -> set[tuple]:
        return {db_op_id(o) for o in self.db_ops} | {file_op_id(o) for o in self.file_ops}


@dataclass
class Analysis:
    partition: PartitionResult
    requests: dict[str, RequestAnalysis]
    full_db_log: list[DBOperation]
    runtimes: dict[str, float] = field(default_factory=dict)

    def attributed(self, request_ids: Iterable[str] | None = None) -> dict[str, dict]:
        ids = self.requests if request_ids is None else request_ids
        return {rid: {"db": self.requests[rid].db_ops, "file": self.requests[rid].file_ops} for rid in ids}

    def notifications(self) -> dict[str, list[ExternalInteraction]]:
        return {rid: ra.external for rid, ra in sorted(self.requests.items()) if ra.external}


class _Timer:
    def __init__(self):
        self.runtimes: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.runtimes[name] = self.runtimes.get(name, 0.0) + time.perf_counter() - t0


def analyze(
    scn: Scenario,
    request_ids: Iterable[str] | None = None,
    *,
    prefer: str = "syscall",
    max_skew_ns: int = 0,
) -> Analysis:
    timer = _Timer()
    with timer.stage("partition"):
        parts = partition(scn.web_log, scn.server_model)
    with timer.stage("merge"):
        global_log = scn.global_log
    ids = parts.request_ids() if request_ids is None else list(request_ids)
    worker_index = stmt_index = None
    with timer.stage("db_index"):
        if scn.db_log is not None:
            worker_index = build_worker_index(scn.db_log)
            stmt_index = StatementIndex(scn.db_log, scn.statement_log_path)
            full_db = stmt_index.all_operations()
        else:
            full_db = app_log_operations(scn.app_log)
        if prefer == "applog":
            full_db = app_log_operations(scn.app_log)
    requests = {}
    for rid in ids:
        unit = parts[rid]
        with timer.stage("provenance"):
            graph = build_graph(unit, global_log)
            file_ops = collect_file_ops(graph)
            external = detect_external(graph, scn.db_endpoints)
        with timer.stage("db_attribution"):
            attr = attribute_request(
                unit,
                scn.db_endpoints,
                scn.db_log,
                scn.app_log,
                worker_index=worker_index,
                statement_index=stmt_index,
                prefer=prefer,
                max_skew_ns=max_skew_ns,
            )
        requests[rid] = RequestAnalysis(rid, graph, file_ops, attr.anchors, attr.operations, external, attr.missing_workers)
    return Analysis(parts, requests, full_db, timer.runtimes)


# --------------------------------------------------------------------------
# metrics against ground truth


@dataclass
class AttributionMetrics:
    precision: float
    recall: float
    f1: float
    true_pairs: int
    predicted_pairs: int
    correct_pairs: int

    def to_json(self) -> dict:
        return dict(self.__dict__)


def _prf(truth: set, pred: set) -> AttributionMetrics:
    tp = len(truth & pred)
    p = tp / len(pred) if pred else 1.0
    r = tp / len(truth) if truth else 1.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return AttributionMetrics(p, r, f1, len(truth), len(pred), tp)


def op_metrics(predicted: Mapping[str, Iterable[tuple]], gt: GroundTruth, kinds: tuple[str, ...] = ("db", "file")) -> AttributionMetrics:
    """Precision/recall over (operation, request) pairs for the requests in ``predicted``."""
    truth = {(op, rid) for rid, ops in gt.op_sets().items() if rid in predicted for op in ops if op[0] in kinds}
    pred = {(op, rid) for rid, ops in predicted.items() for op in ops if op[0] in kinds}
    return _prf(truth, pred)


def attribution_metrics(analysis: Analysis, gt: GroundTruth, kinds: tuple[str, ...] = ("db", "file")) -> AttributionMetrics:
    return op_metrics({rid: ra.op_ids() for rid, ra in analysis.requests.items()}, gt, kinds)


def syscall_attribution(analysis: Analysis, gt: GroundTruth) -> tuple[int, int]:
    """(correctly placed, total) labelled web syscalls.

    A syscall is placed with a request when it sits on the request's own
    thread segments or belongs to one of its descendant processes;
    anything else counts as background.
    """
    placed: dict[int, str] = {}
    for host, seq in analysis.partition.background.keys():
        if host == "web":
            placed[seq] = BACKGROUND
    for rid, ra in analysis.requests.items():
        for host, seq in analysis.partition[rid].keys() | ra.graph.event_keys:
            if host == "web":
                placed[seq] = rid
    total = correct = 0
    for seq, rid in gt.syscall_labels.items():
        if seq not in placed:
            continue
        total += 1
        correct += placed[seq] == rid
    return correct, total


@dataclass
class NotificationReport:
    flagged: list[str]
    true_positives: list[str]
    false_positives: list[str]
    missed: list[str]

    def to_json(self) -> dict:
        return dict(self.__dict__)


def notification_report(analysis: Analysis, gt: GroundTruth) -> NotificationReport:
    flagged = sorted(analysis.notifications())
    truth = {rid for rid, v in gt.external.items() if v and rid in analysis.requests}
    return NotificationReport(
        flagged,
        sorted(set(flagged) & truth),
        sorted(set(flagged) - truth),
        sorted(truth - set(flagged)),
    )


# --------------------------------------------------------------------------
# recovery orchestration


@dataclass
class RecoveryOutcome:
    db_plan: DBPlan
    fs_plan: FSPlan
    db_state: DBState
    tree: FileTree
    choices: dict[str, str]
    P: dict[str, frozenset]
    runtimes: dict[str, float] = field(default_factory=dict)

    def accuracy(self, Q: Mapping[str, Iterable]) -> float:
        return compute_recovery_accuracy(self.P, Q)


def plan_recovery(scn: Scenario, analysis: Analysis, malicious: Iterable[str]) -> tuple[DBPlan, FSPlan]:
    malicious = list(malicious)
    bad_db = [op for rid in malicious for op in analysis.requests[rid].db_ops]
    bad_files = [op for rid in malicious for op in analysis.requests[rid].file_ops]
    db_plan = plan_db_recovery(bad_db, scn.db_store.snapshots, analysis.full_db_log)
    fs_plan = plan_fs_recovery(bad_files, scn.tree, scn.chain, scn.write_log, scn.baseline or {})
    return db_plan, fs_plan


def recover(scn: Scenario, analysis: Analysis, malicious: Iterable[str], decisions=None) -> RecoveryOutcome:
    timer = _Timer()
    with timer.stage("plan"):
        db_plan, fs_plan = plan_recovery(scn, analysis, malicious)
    with timer.stage("db_replay"):
        store = DBStore(scn.db_store.state.copy(), list(scn.db_store.snapshots))
        state = execute_db_recovery(db_plan, store)
    with timer.stage("fs_replay"):
        tree, choices = execute_fs_recovery(fs_plan, scn.tree, decisions)
    P = restored_sets(analysis.attributed(), db_plan, analysis.full_db_log, fs_plan, choices)
    return RecoveryOutcome(db_plan, fs_plan, state, tree, choices, P, timer.runtimes)


def is_background(rid: str) -> bool:
    return rid == BACKGROUND
