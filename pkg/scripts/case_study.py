"""Two-stage intrusion: SQL injection plants a payload, a later request fetches a webshell."""

from __future__ import annotations

from intrec.pipeline import analyze, notification_report, recover, scenario_from_result
from intrec.provenance import process_chain
from intrec.sim import case_study_config, simulate
from intrec.statestore import DBState


def main() -> None:
    result = simulate(case_study_config())
    scn = scenario_from_result(result)
    gt = result.ground_truth
    analysis = analyze(scn)
    print(f"requests: {len(gt.requests)}, malicious: {gt.malicious}")
    for rid in gt.malicious:
        ra = analysis.requests[rid]
        print(f"\n{rid} ({gt.kinds[rid]})")
        for op in ra.db_ops:
            print(f"  db   {op.ts} {op.statement}")
        for op in ra.file_ops:
            print(f"  file {op.ts} {op.kind} {op.path}")
        for path in sorted({op.path for op in ra.file_ops}):
            chain = [ra.graph.exe.get(n.id) for n in process_chain(ra.graph, path)]
            print(f"  chain to {path}: {' -> '.join(map(str, chain))}")
    rep = notification_report(analysis, gt)
    print(f"\nnotifications flagged {rep.flagged}, missed {rep.missed}, false positives {rep.false_positives}")
    out = recover(scn, analysis, gt.malicious)
    print(f"recovery accuracy: {out.accuracy(gt.Q()):.4f}")
    print(f"database equals benign run: {out.db_state == DBState.from_json(gt.benign_db)}")
    print(f"file tree equals benign run: {out.tree.entries == gt.benign_tree}")
    for a in out.fs_plan.actions:
        print(f"  {type(a).__name__:<18} {a.path}")


if __name__ == "__main__":
    main()
