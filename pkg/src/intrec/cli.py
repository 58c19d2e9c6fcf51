"""Command-line interface.

Exit codes: 0 ok, 2 usage or parse error, 3 recovery precondition failure,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bundle as bnd
from .dbattr import NoWorkerFound
from .partition import BACKGROUND, PartitionError, UnknownRequest
from .pipeline import (
    Scenario,
    analyze,
    load_scenario,
    op_metrics,
    parse_endpoint,
)
from .provenance import build_graph, graph_to_jsonl
from .recovery import (
    CHOICES,
    FULL_ROLLBACK,
    SELECTIVE_REPLAY,
    SKIP,
    Interactive,
    NoCleanSnapshot,
    ProviderAbort,
    ScriptedDecisions,
    UniverseMismatch,
    compute_recovery_accuracy,
    execute_db_recovery,
    execute_fs_recovery,
    plan_db_recovery,
    plan_fs_recovery,
    plan_to_json,
    restored_sets,
)
from .sim import GroundTruth, InvalidConfig, ScenarioConfig, simulate, write_outputs
from .statestore import (
    ClassificationGap,
    CorruptSnapshot,
    DBState,
    DBStore,
    FileTree,
    StatementParseError,
    atomic_write,
    canonical_json,
    check_classification,
)
from .trace import TraceError

log = logging.getLogger("intrec")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PRECONDITION = 3
EXIT_INVARIANT = 4


class CommandError(Exception):
    def __init__(self, code: int, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.code = code


def _fail(code: int, stage: str, exc: BaseException | str):
    raise CommandError(code, stage, str(exc))


def _csv(text: str | None) -> list[str]:
    return [t for t in (text or "").split(",") if t]


def _load(args) -> Scenario:
    if not args.traces:
        _fail(EXIT_USAGE, "load", "--traces is required")
    try:
        scn = load_scenario(args.traces)
    except (TraceError, ValueError, KeyError) as exc:
        _fail(EXIT_USAGE, "load", exc)
    except FileNotFoundError as exc:
        _fail(EXIT_USAGE, "load", f"missing input: {exc.filename}")
    if getattr(args, "db_endpoints", None):
        try:
            scn.db_endpoints = {parse_endpoint(e) for e in _csv(args.db_endpoints)}
        except ValueError as exc:
            _fail(EXIT_USAGE, "load", exc)
    return scn


def _emit(args, obj, table_rows=None, header=None) -> None:
    if getattr(args, "format", "json") == "table" and table_rows is not None:
        widths = [max(len(str(r[i])) for r in [header] + table_rows) for i in range(len(header))]
        for row in [header] + table_rows:
            print("  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip())
    else:
        sys.stdout.write(canonical_json(obj).decode() + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text()) if args.config else {}
        if args.seed is not None:
            raw["seed"] = args.seed
        config = ScenarioConfig.from_json(raw)
    except FileNotFoundError:
        _fail(EXIT_USAGE, "simulate", f"config file not found: {args.config}")
    except (json.JSONDecodeError, InvalidConfig, TypeError) as exc:
        _fail(EXIT_USAGE, "simulate", exc)
    result = simulate(config)
    out = write_outputs(result, args.out)
    print(f"wrote scenario to {out} ({len(result.ground_truth.requests)} requests)")
    return EXIT_OK


def cmd_partition(args) -> int:
    scn = _load(args)
    from .partition import partition

    try:
        parts = partition(scn.web_log, scn.server_model)
    except PartitionError as exc:
        _fail(EXIT_INVARIANT, "partition", exc)
    ids = _csv(args.request) or parts.request_ids()
    rows, obj = [], {}
    for rid in ids:
        try:
            unit = parts[rid]
        except (KeyError, UnknownRequest):
            _fail(EXIT_USAGE, "partition", f"unknown request id {rid}")
        threads = ";".join(f"{h}/{p}/{t}" for h, p, t in unit.owner_threads)
        obj[rid] = {"events": len(unit.events), "threads": [list(t) for t in unit.owner_threads],
                    "begin_ts": unit.begin_ts, "end_ts": unit.end_ts, "unclosed": unit.unclosed}
        rows.append([rid, len(unit.events), threads, "yes" if unit.unclosed else ""])
    obj[BACKGROUND] = {"events": len(parts.background.events)}
    rows.append([BACKGROUND, len(parts.background.events), "", ""])
    _emit(args, {"units": obj, "diagnostics": list(parts.diagnostics)}, rows, ["request", "events", "threads", "unclosed"])
    return EXIT_OK


def cmd_trace(args) -> int:
    scn = _load(args)
    from .partition import partition, unit_for

    try:
        unit = unit_for(partition(scn.web_log, scn.server_model), args.request)
    except (KeyError, UnknownRequest):
        _fail(EXIT_USAGE, "trace", f"unknown request id {args.request}")
    except PartitionError as exc:
        _fail(EXIT_INVARIANT, "partition", exc)
    text = graph_to_jsonl(build_graph(unit, scn.global_log))
    if args.out:
        atomic_write(args.out, text.encode())
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _analyze(args, scn: Scenario, ids=None):
    try:
        return analyze(scn, ids, prefer=args.prefer, max_skew_ns=args.max_skew_ns)
    except PartitionError as exc:
        _fail(EXIT_INVARIANT, "partition", exc)
    except (KeyError, UnknownRequest) as exc:
        _fail(EXIT_USAGE, "analyze", f"unknown request id {exc}")
    except NoWorkerFound as exc:
        _fail(EXIT_INVARIANT, "db_attribution", exc)


def cmd_attribute(args) -> int:
    scn = _load(args)
    analysis = _analyze(args, scn, _csv(args.request) or None)
    obj, rows = {}, []
    for rid, ra in sorted(analysis.requests.items()):
        obj[rid] = {"anchors": [bnd.anchor_to_json(a) for a in ra.anchors], "db_ops": [bnd.db_op_to_json(o) for o in ra.db_ops]}
        for a in ra.anchors:
            n = sum(1 for o in ra.db_ops if o.source_anchor == a or o.source_anchor is None and a.covers(o.ts))
            rows.append([rid, str(a.tuple), a.t_start, a.t_end, n])
    _emit(args, obj, rows, ["request", "tuple", "t_start", "t_end", "ops"])
    return EXIT_OK


def _meta(scn: Scenario) -> dict:
    return {
        "server_model": scn.server_model.value,
        "db_endpoints": [f"{ip}:{port}" for ip, port in sorted(scn.db_endpoints)],
        "statement_log_path": scn.statement_log_path,
    }


def cmd_analyze(args) -> int:
    scn = _load(args)
    malicious = _csv(args.malicious)
    analysis = _analyze(args, scn)
    try:
        data = bnd.build_bundle(analysis, malicious, str(Path(args.traces).resolve()), _meta(scn))
    except KeyError as exc:
        _fail(EXIT_USAGE, "analyze", exc.args[0])
    bnd.write_bundle(args.out, data, analysis)
    mo = data["malicious_ops"]
    files = sorted({f["path"] for f in mo["file"]})
    print(f"analysed {len(data['requests'])} requests; flagged {len(mo['db'])} DB ops, "
          f"{len(mo['file'])} file ops on {len(files)} files")
    for note in data["notifications"]:
        print(f"notify: {note['advisory']}")
    return EXIT_OK


def _store_dir(args, loaded: bnd.LoadedBundle) -> Path:
    return Path(args.store) if args.store else Path(loaded.raw["traces"]) / "store"


def _plans(args, loaded: bnd.LoadedBundle):
    store = _store_dir(args, loaded)
    try:
        scn = load_scenario(loaded.raw["traces"])
        if args.store:
            scn.db_store, scn.tree, scn.chain, scn.baseline = _load_store(store)
    except FileNotFoundError as exc:
        _fail(EXIT_USAGE, "load", f"missing input: {exc.filename}")
    except CorruptSnapshot as exc:
        _fail(EXIT_PRECONDITION, "load", exc)
    if scn.db_store is None:
        _fail(EXIT_USAGE, "load", f"no store under {store}")
    classification = None
    if args.classify:
        try:
            classification = check_classification(json.loads(Path(args.classify).read_text()))
        except (OSError, ValueError) as exc:
            _fail(EXIT_USAGE, "plan", exc)
    try:
        db_plan = plan_db_recovery(loaded.malicious_db, scn.db_store.snapshots, loaded.full_db_log)
        fs_plan = plan_fs_recovery(loaded.malicious_files, scn.tree, scn.chain, scn.write_log, scn.baseline or {}, classification)
    except NoCleanSnapshot as exc:
        _fail(EXIT_PRECONDITION, "plan", f"{exc}; take or restore an earlier snapshot before recovering")
    except ClassificationGap as exc:
        _fail(EXIT_PRECONDITION, "plan", f"{exc}; extend the directory classification (--classify)")
    return scn, store, db_plan, fs_plan


def _load_store(store: Path):
    import base64

    from .statestore import BackupChain, DBSnapshot

    snaps = [
        DBSnapshot.from_json(json.loads(f.read_text()))
        for f in sorted((store / "db_snapshots").glob("*.json"), key=lambda f: int(f.stem))
    ]
    db_store = DBStore(DBState.from_json(json.loads((store / "db_state.json").read_text())), snaps)
    tree = FileTree.from_json(json.loads((store / "tree.json").read_text()))
    chain = BackupChain.load(store / "backups")
    baseline = {p: base64.b64decode(v) for p, v in json.loads((store / "baseline.json").read_text()).items()}
    return db_store, tree, chain, baseline


def _load_bundle(args) -> bnd.LoadedBundle:
    try:
        return bnd.load_bundle(args.bundle)
    except FileNotFoundError:
        _fail(EXIT_USAGE, "load", f"bundle not found: {args.bundle}")
    except (ValueError, KeyError, StatementParseError) as exc:
        _fail(EXIT_USAGE, "load", f"bad bundle: {exc}")


def cmd_plan(args) -> int:
    loaded = _load_bundle(args)
    _, _, db_plan, fs_plan = _plans(args, loaded)
    atomic_write(Path(args.bundle) / bnd.PLAN_FILE, plan_to_json(db_plan, fs_plan))
    rows = [["db", "baseline", db_plan.baseline.ts, f"replay {len(db_plan.replay)}, drop {len(db_plan.malicious)}"]]
    rows += [["fs", type(a).__name__, a.path, getattr(a, "reason", "")] for a in fs_plan.actions]
    for w in db_plan.dependency_warnings:
        log.warning(w)
    _emit(args, json.loads(plan_to_json(db_plan, fs_plan)), rows, ["side", "action", "target", "detail"])
    return EXIT_OK


class PromptDecisions:
    """Asks on a line-oriented stream once per interactive file."""

    KEYS = {"f": FULL_ROLLBACK, "s": SELECTIVE_REPLAY, "k": SKIP}

    def __init__(self, stdin=None, stdout=None):
        self.stdin = stdin or sys.stdin
        self.stdout = stdout or sys.stdout
        self.prompts = 0

    def __call__(self, action: Interactive) -> str:
        self.prompts += 1
        bad = sum(1 for _, m in action.history if m)
        self.stdout.write(
            f"{action.path}: {action.reason}; {len(action.history)} writes since backup, {bad} malicious\n"
            "  [f]ull rollback / [s]elective replay / [k] skip? "
        )
        self.stdout.flush()
        line = self.stdin.readline()
        if not line:
            raise ProviderAbort(f"no answer for {action.path}")
        answer = line.strip().lower()
        choice = self.KEYS.get(answer[:1], answer)
        if choice not in CHOICES:
            raise ProviderAbort(f"invalid answer {answer!r} for {action.path}")
        return choice


def cmd_recover(args) -> int:
    loaded = _load_bundle(args)
    scn, store, db_plan, fs_plan = _plans(args, loaded)
    if args.decisions:
        try:
            raw = json.loads(Path(args.decisions).read_text())
        except (OSError, ValueError) as exc:
            _fail(EXIT_USAGE, "recover", f"bad decisions file: {exc}")
        provider = ScriptedDecisions.from_records(raw) if isinstance(raw, list) else ScriptedDecisions(raw)
    elif args.interactive:
        provider = PromptDecisions()
    else:
        provider = None
    before = {"db": scn.db_store.state.digest(), "tree": scn.tree.digest()}
    try:
        new_tree, choices = execute_fs_recovery(fs_plan, scn.tree, provider)
        working = DBStore(scn.db_store.state.copy(), scn.db_store.snapshots)
        new_state = execute_db_recovery(db_plan, working)
    except ProviderAbort as exc:
        _fail(EXIT_PRECONDITION, "recover", f"{exc}; pass --interactive or --decisions FILE")
    except CorruptSnapshot as exc:
        _fail(EXIT_PRECONDITION, "recover", exc)
    # swap: both new states are complete before either file is replaced
    atomic_write(store / "db_state.json", new_state.canonical_bytes())
    atomic_write(store / "tree.json", canonical_json(new_tree.to_json()))
    P = restored_sets(loaded.attributed, db_plan, loaded.full_db_log, fs_plan, choices)
    report = {
        "before": before,
        "after": {"db": new_state.digest(), "tree": new_tree.digest()},
        "choices": choices,
        "plan": json.loads(plan_to_json(db_plan, fs_plan)),
        "P": {rid: sorted(list(op) for op in ops) for rid, ops in sorted(P.items())},
    }
    atomic_write(Path(args.bundle) / bnd.RECOVERY_FILE, canonical_json(report))
    print(f"recovered: replayed {len(db_plan.replay)} DB ops, {len(fs_plan.actions)} file actions, "
          f"{len(choices)} interactive choices")
    return EXIT_OK


def cmd_report(args) -> int:
    loaded = _load_bundle(args)
    gt_path = Path(args.ground_truth) if args.ground_truth else Path(loaded.raw["traces"]) / "ground_truth.json"
    try:
        gt = GroundTruth.from_json(json.loads(gt_path.read_text()))
    except FileNotFoundError:
        _fail(EXIT_USAGE, "report", f"ground truth not found: {gt_path}")
    except (ValueError, KeyError) as exc:
        _fail(EXIT_USAGE, "report", f"bad ground truth: {exc}")
    if set(loaded.attributed) != set(gt.requests):
        _fail(EXIT_INVARIANT, "report", UniverseMismatch("bundle and ground truth cover different requests"))

    predicted = {rid: loaded.op_ids(rid) for rid in loaded.attributed}
    metrics = {k: op_metrics(predicted, gt, (k,)).to_json() for k in ("db", "file")}
    metrics["all"] = op_metrics(predicted, gt).to_json()
    flagged = sorted(n["request_id"] for n in loaded.raw["notifications"])
    truth = sorted(rid for rid, v in gt.external.items() if v)
    report = {
        "meta": loaded.raw.get("meta", {}),
        "counts": {
            "requests": len(gt.requests),
            "malicious": len(gt.malicious),
            "db_ops": len(gt.statement_labels),
            "file_ops": sum(1 for r in gt.file_op_labels.values() if r != BACKGROUND),
        },
        "attribution": metrics,
        "notifications": {"flagged": flagged, "expected": truth},
        "recovery_accuracy": None,
    }
    rec_path = Path(args.bundle) / bnd.RECOVERY_FILE
    if rec_path.exists():
        rec = json.loads(rec_path.read_text())
        P = {rid: {tuple(op) for op in ops} for rid, ops in rec["P"].items()}
        try:
            report["recovery_accuracy"] = compute_recovery_accuracy(P, gt.Q())
        except UniverseMismatch as exc:
            _fail(EXIT_INVARIANT, "report", exc)
    timings = Path(args.bundle) / bnd.TIMINGS_FILE
    if args.timings and timings.exists():
        report["runtimes"] = json.loads(timings.read_text())
    rows = [[k, f"{m['precision']:.4f}", f"{m['recall']:.4f}", f"{m['f1']:.4f}", m["true_pairs"]] for k, m in metrics.items()]
    acc = report["recovery_accuracy"]
    rows.append(["recovery", "", "", "", "n/a" if acc is None else f"accuracy {acc:.4f}"])
    _emit(args, report, rows, ["ops", "precision", "recall", "f1", "n"])
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intrec", description="Request-level intrusion attribution and recovery.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, traces=True):
        if traces:
            p.add_argument("--traces", metavar="DIR", help="scenario directory with traces and logs")
            p.add_argument("--db-endpoints", metavar="IP:PORT[,...]")
        p.add_argument("--format", choices=("json", "table"), default="json")

    p = sub.add_parser("simulate", help="generate a labelled scenario")
    p.add_argument("--config", metavar="FILE")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("partition", help="split the web trace into request units")
    common(p)
    p.add_argument("--request", metavar="ID[,ID...]")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("trace", help="provenance graph of one request as JSONL")
    common(p)
    p.add_argument("--request", required=True)
    p.add_argument("--out", metavar="FILE")
    p.set_defaults(func=cmd_trace)

    for name, func, helptext in (
        ("attribute", cmd_attribute, "anchors and database operations per request"),
        ("analyze", cmd_analyze, "full analysis into a bundle"),
    ):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--prefer", choices=("syscall", "applog"), default="syscall")
        p.add_argument("--max-skew-ns", type=int, default=0)
        if name == "attribute":
            p.add_argument("--request", metavar="ID[,ID...]")
        else:
            p.add_argument("--malicious", metavar="ID[,ID...]", default="")
            p.add_argument("--out", required=True, metavar="DIR")
        p.set_defaults(func=func)

    for name, func in (("plan", cmd_plan), ("recover", cmd_recover)):
        p = sub.add_parser(name, help=f"{name} recovery from a bundle")
        common(p, traces=False)
        p.add_argument("--bundle", required=True, metavar="DIR")
        p.add_argument("--store", metavar="DIR", help="defaults to <traces>/store")
        p.add_argument("--classify", metavar="FILE", help="directory classification JSON")
        if name == "recover":
            g = p.add_mutually_exclusive_group()
            g.add_argument("--interactive", action="store_true")
            g.add_argument("--decisions", metavar="FILE")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="metrics against ground truth")
    common(p, traces=False)
    p.add_argument("--bundle", required=True, metavar="DIR")
    p.add_argument("--ground-truth", metavar="FILE")
    p.add_argument("--timings", action="store_true", help="include stage runtimes")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except AssertionError as exc:
        print(f"error: [invariant] {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
