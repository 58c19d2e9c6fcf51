"""On-disk analysis bundle shared by the analyze, plan, recover and report commands.

The bundle is canonical JSON so that two analyses of the same inputs are
byte-identical. Stage timings live in a separate ``timings.json``.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dbattr import Anchor, DBOperation
from .pipeline import Analysis
from .provenance import ExternalInteraction, FileOperation, graph_to_jsonl
from .recovery import db_op_id, file_op_id, op_from_json
from .statestore import atomic_write, canonical_json
from .trace import NetworkTuple

BUNDLE_FILE = "bundle.json"
TIMINGS_FILE = "timings.json"
RECOVERY_FILE = "recovery.json"
PLAN_FILE = "plan.json"


def _b64(data):
    return None if data is None else base64.b64encode(data).decode("ascii")


def db_op_to_json(op: DBOperation) -> dict:
    worker = list(op.worker) if isinstance(op.worker, tuple) else op.worker
    return {"ts": op.ts, "statement": op.statement, "worker": worker, "completed_late": op.completed_late}


def file_op_to_json(op: FileOperation) -> dict:
    return {
        "path": op.path, "kind": op.kind, "ts": op.ts, "actor": list(op.actor), "seq": op.seq,
        "host": op.host, "offset": op.offset, "data_b64": _b64(op.data),
        "rename_to": op.rename_to, "truncate": op.truncate,
    }


def file_op_from_json(obj: dict) -> FileOperation:
    data = obj.get("data_b64")
    return FileOperation(
        obj["path"], obj["kind"], obj["ts"], tuple(obj["actor"]), obj["seq"], obj.get("host", "web"),
        obj.get("offset"), None if data is None else base64.b64decode(data),
        obj.get("rename_to"), obj.get("truncate", False),
    )


def anchor_to_json(a: Anchor) -> dict:
    return {"tuple": str(a.tuple), "t_start": a.t_start, "t_end": a.t_end}


def interaction_to_json(x: ExternalInteraction) -> dict:
    return {"tuple": str(x.tuple), "first_ts": x.first_ts, "last_ts": x.last_ts, "bytes": x.byte_count, "direction": x.direction}


def advisory(rid: str, xs: list[ExternalInteraction]) -> str:
    peers = sorted({f"{x.tuple.dst_ip}:{x.tuple.dst_port}" for x in xs})
    return (
        f"Request {rid} was rolled back. It contacted {', '.join(peers)}; "
        "any state those services derived from it may need manual review."
    )


def build_bundle(analysis: Analysis, malicious: list[str], traces: str, meta: dict) -> dict:
    unknown = sorted(set(malicious) - set(analysis.requests))
    if unknown:
        raise KeyError(f"unknown malicious request ids: {', '.join(unknown)}")
    requests = {}
    for rid, ra in sorted(analysis.requests.items()):
        unit = analysis.partition[rid]
        requests[rid] = {
            "threads": [list(t) for t in unit.owner_threads],
            "events": len(unit.events),
            "unclosed": unit.unclosed,
            "anchors": [anchor_to_json(a) for a in ra.anchors],
            "db_ops": [db_op_to_json(o) for o in ra.db_ops],
            "file_ops": [file_op_to_json(o) for o in ra.file_ops],
            "missing_workers": [str(t) for t in ra.missing_workers],
        }
    notes = [
        {"request_id": rid, "interactions": [interaction_to_json(x) for x in xs], "advisory": advisory(rid, xs)}
        for rid, xs in analysis.notifications().items()
    ]
    return {
        "traces": traces,
        "meta": meta,
        "malicious": sorted(malicious),
        "requests": requests,
        "background_events": len(analysis.partition.background.events),
        "diagnostics": list(analysis.partition.diagnostics),
        "malicious_ops": {
            "db": [db_op_to_json(o) for rid in sorted(malicious) for o in analysis.requests[rid].db_ops],
            "file": [file_op_to_json(o) for rid in sorted(malicious) for o in analysis.requests[rid].file_ops],
        },
        "notifications": notes,
        "full_db_log": [db_op_to_json(o) for o in analysis.full_db_log],
    }


def write_bundle(out_dir, bundle: dict, analysis: Analysis | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / BUNDLE_FILE, canonical_json(bundle))
    if analysis is not None:
        atomic_write(out / TIMINGS_FILE, canonical_json(analysis.runtimes))
        gdir = out / "graphs"
        gdir.mkdir(exist_ok=True)
        for rid in bundle["malicious"]:
            atomic_write(gdir / f"{rid}.jsonl", graph_to_jsonl(analysis.requests[rid].graph).encode())
    return out


@dataclass
class LoadedBundle:
    raw: dict
    malicious: list[str]
    attributed: dict[str, dict] = field(default_factory=dict)
    malicious_db: list[DBOperation] = field(default_factory=list)
    malicious_files: list[FileOperation] = field(default_factory=list)
    full_db_log: list[DBOperation] = field(default_factory=list)

    def op_ids(self, rid: str) -> set[tuple]:
        ops = self.attributed[rid]
        return {db_op_id(o) for o in ops["db"]} | {file_op_id(o) for o in ops["file"]}


def load_bundle(path) -> LoadedBundle:
    p = Path(path)
    if p.is_dir():
        p = p / BUNDLE_FILE
    raw = json.loads(p.read_text())
    for key in ("requests", "malicious", "malicious_ops", "full_db_log"):
        if key not in raw:
            raise ValueError(f"bundle is missing {key!r}")
    attributed = {
        rid: {"db": [op_from_json(o) for o in r["db_ops"]], "file": [file_op_from_json(o) for o in r["file_ops"]]}
        for rid, r in raw["requests"].items()
    }
    return LoadedBundle(
        raw,
        list(raw["malicious"]),
        attributed,
        [op_from_json(o) for o in raw["malicious_ops"]["db"]],
        [file_op_from_json(o) for o in raw["malicious_ops"]["file"]],
        [op_from_json(o) for o in raw["full_db_log"]],
    )


def tuple_from_text(text: str) -> NetworkTuple:
    return NetworkTuple.parse(text)
