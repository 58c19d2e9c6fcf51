"""Acceptance criteria 1-6, each printed as a single PASS/FAIL line.

Run with ``pytest -v tests/test_acceptance.py`` or directly with
``python3 tests/test_acceptance.py``.
"""

from __future__ import annotations

import hashlib
import random
import statistics
import subprocess
import sys
import time
from pathlib import Path

from intrec.bench import db_workload, fs_workload, linear_fit, sweep_times, time_db_recovery, time_fs_recovery
from intrec.partition import BACKGROUND
from intrec.pipeline import analyze, attribution_metrics, recover, scenario_from_result
from intrec.provenance import process_chain
from intrec.sim import ATTACK_KINDS, AttackSpec, ScenarioConfig, case_study_config, simulate, write_outputs
from intrec.statestore import DBState

HERE = Path(__file__).resolve().parent


def report(n: int, ok: bool, detail: str, capsys=None) -> None:
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}"
    if capsys is None:
        print(line, flush=True)
        return
    with capsys.disabled():
        print("\n" + line, flush=True)


# --------------------------------------------------------------------------
# 1. exact attribution across server models, pools and load


GRID = [
    (model, conc, pool)
    for model in ("thread_per_request", "coroutine")
    for conc, pool in ((1, 4), (50, 8), (150, 16), (150, 4))
]


def _attack_mix(rng: random.Random, n_requests: int, k: int) -> list[AttackSpec]:
    idx = rng.sample(range(5, n_requests - 30), k * 2)
    attacks = []
    for i in range(k):
        kind = rng.choice(ATTACK_KINDS)
        a, b = sorted(idx[2 * i : 2 * i + 2])
        attacks.append(AttackSpec(kind, a, b if kind == "multi_stage" else None))
    # two multi_stage attacks could still collide on a stage-2 slot
    used, out = set(), []
    for att in attacks:
        slots = {att.at_request_index, att.stage2_index} - {None}
        if slots & used:
            att = AttackSpec("sqli_write", att.at_request_index)
            slots = {att.at_request_index}
        if not slots & used:
            used |= slots
            out.append(att)
    return out


def criterion_1():
    rows, ok = [], True
    for i, (model, conc, pool) in enumerate(GRID):
        rng = random.Random(100 + i)
        cfg = ScenarioConfig(seed=100 + i, concurrency=conc, request_count=300, server_model=model,
                             pool_size=pool, loop_threads=4, snapshot_every=0, backup_every=0,
                             attacks=_attack_mix(rng, 300, 3))
        t0 = time.perf_counter()
        result = simulate(cfg)
        analysis = analyze(scenario_from_result(result))
        elapsed = time.perf_counter() - t0
        gt = result.ground_truth
        db = attribution_metrics(analysis, gt, ("db",))
        fs = attribution_metrics(analysis, gt, ("file",))
        good = all(m.precision == m.recall == m.f1 == 1.0 for m in (db, fs)) and elapsed < 30
        ok &= good
        rows.append(f"{model[:6]}/c{conc}/p{pool}: db {db.correct_pairs}/{db.true_pairs} "
                    f"file {fs.correct_pairs}/{fs.true_pairs} {elapsed:.1f}s")
    return ok, f"{len(GRID)} scenarios P=R=F1=1.0 under 30 s" if ok else "; ".join(rows)


# --------------------------------------------------------------------------
# 2. event loss


def criterion_2():
    f1s, partition_exact = [], True
    for seed in range(10):
        result = simulate(ScenarioConfig(seed=200 + seed, concurrency=150, request_count=300, event_loss_prob=0.001,
                                         snapshot_every=0, backup_every=0,
                                         attacks=[AttackSpec("rce_webshell", 50), AttackSpec("sqli_write", 150)]))
        analysis = analyze(scenario_from_result(result))
        gt = result.ground_truth
        f1s.append(attribution_metrics(analysis, gt).f1)
        spawned = {}
        for pid, _, _, rid in gt.spawned:
            spawned.setdefault(pid, set()).add(rid)
        parts = analysis.partition
        for rid in parts.request_ids():
            partition_exact &= all(gt.syscall_labels[e.seq] == rid for e in parts[rid].events)
        partition_exact &= all(
            gt.syscall_labels[e.seq] == BACKGROUND or gt.syscall_labels[e.seq] in spawned.get(e.pid, ())
            for e in parts.background.events
        )
        partition_exact &= not parts.unclosed and set(parts.request_ids()) == set(gt.requests)
    mean = statistics.fmean(f1s)
    ok = mean >= 0.98 and partition_exact
    return ok, f"mean F1 {mean:.4f} (min {min(f1s):.4f}) over 10 seeds, partition exact={partition_exact}"


# --------------------------------------------------------------------------
# 3. strict recovery accuracy


def criterion_3():
    details, ok = [], True
    for k in range(1, 6):
        rng = random.Random(300 + k)
        cfg = ScenarioConfig(seed=300 + k, concurrency=50, request_count=200, snapshot_every=20, backup_every=20,
                             attacks=_attack_mix(rng, 200, k))
        result = simulate(cfg)
        scn = scenario_from_result(result)
        analysis = analyze(scn)
        gt = result.ground_truth
        out = recover(scn, analysis, gt.malicious)
        acc = out.accuracy(gt.Q())
        db_equal = out.db_state.canonical_bytes() == DBState.from_json(gt.benign_db).canonical_bytes()
        fs_equal = out.tree.entries == gt.benign_tree
        good = acc == 1.0 and db_equal and fs_equal and len(gt.malicious) >= k
        ok &= good
        details.append(f"k={k}: {len(gt.malicious)} malicious, acc {acc:.3f}, db {db_equal}, fs {fs_equal}")
    return ok, "; ".join(details)


# --------------------------------------------------------------------------
# 4. case study


def criterion_4():
    result = simulate(case_study_config())
    scn = scenario_from_result(result)
    gt = result.ground_truth
    analysis = analyze(scn)
    bad = gt.malicious
    db_ops = [o for rid in bad for o in analysis.requests[rid].db_ops]
    files = {o.path for rid in bad for o in analysis.requests[rid].file_ops}
    stage2 = analysis.requests[bad[1]]
    chain = [stage2.graph.exe.get(n.id) for n in process_chain(stage2.graph, "/tmp/Webshell")]
    chain_ok = chain == ["/usr/sbin/php-fpm", "/bin/sh", "/usr/bin/curl"]
    out = recover(scn, analysis, bad)
    final = scn.tree
    deleted = "/tmp/Webshell" in final and "/tmp/Webshell" not in out.tree
    collateral_files = [p for p in set(final.entries) | set(out.tree.entries)
                        if p != "/tmp/Webshell" and out.tree.get(p) != final.get(p)]
    reverted = {(t, k) for t, rows in scn.db_store.state.tables.items() for k in rows
                if out.db_state.tables.get(t, {}).get(k) != rows[k]}
    expected_rows = {("templates", "home")}
    db_equal = out.db_state == DBState.from_json(gt.benign_db)
    n_writes = len(gt.statement_labels)
    n_files = sum(1 for r in gt.file_op_labels.values() if r != BACKGROUND)
    ok = (len(db_ops) == 2 and files == {"/tmp/Webshell"} and chain_ok and deleted
          and not collateral_files and reverted == expected_rows and db_equal
          and out.accuracy(gt.Q()) == 1.0)
    return ok, (f"{len(gt.requests)} requests, {n_writes} DB writes, {n_files} file ops; flagged {len(db_ops)} DB ops "
                f"and {len(files)} file; chain {' -> '.join(map(str, chain))}; webshell deleted={deleted}; "
                f"collateral files={len(collateral_files)}, rows changed={sorted(reverted)}")


# --------------------------------------------------------------------------
# 5. scaling


def criterion_5():
    ops = [200, 400, 600, 800, 1000]
    files = [20, 40, 60, 80, 100]
    t_ops = sweep_times(time_db_recovery, [db_workload(n) for n in ops], repeats=11)
    t_files = sweep_times(time_fs_recovery, [fs_workload(n, writes_per_file=40, size=16384) for n in files], repeats=15)
    _, _, r2_ops = linear_fit(ops, t_ops)
    _, _, r2_files = linear_fit(files, t_files)
    budget = t_ops[-1]
    ok = r2_ops >= 0.95 and r2_files >= 0.95 and budget < 10
    return ok, (f"ops R²={r2_ops:.4f}, files R²={r2_files:.4f}, 1000-op recovery {budget * 1e3:.1f} ms "
                f"({1000 / budget:.0f} ops/s, {100 / t_files[-1]:.0f} files/s)")


# --------------------------------------------------------------------------
# 6. property suites


PROPERTY_TESTS = [
    "tests/test_partition.py::test_coroutine_partition_properties",
    "tests/test_partition.py::test_partition_matches_simulator_labels",
    "tests/test_provenance.py::test_unrelated_activity_does_not_change_the_graph",
    "tests/test_provenance.py::test_simulated_file_ops_match_labels",
    "tests/test_dbattr.py::test_app_log_boundaries",
    "tests/test_dbattr.py::test_app_log_path_matches_syscall_path",
    "tests/test_statestore.py::test_snapshot_round_trip_and_corruption",
    "tests/test_statestore.py::test_version_at_matches_full_copies",
    "tests/test_statestore.py::test_file_ops_match_naive_model",
    "tests/test_recovery.py::test_recovery_is_idempotent",
    "tests/test_recovery.py::test_restored_sets_shrink_as_the_malicious_set_grows",
    "tests/test_trace.py::test_merge_matches_sort_and_is_grouping_insensitive",
]


def _output_hashes(seed: int, out: Path) -> dict[str, str]:
    cfg = ScenarioConfig(seed=seed, concurrency=20, request_count=80, attacks=[AttackSpec("rce_webshell", 30)])
    write_outputs(simulate(cfg), out)
    return {p.relative_to(out).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(out.rglob("*")) if p.is_file()}


def criterion_6(tmp: Path):
    root = HERE.parent
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *PROPERTY_TESTS],
        cwd=root, capture_output=True, text=True,
    )
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    same = _output_hashes(41, tmp / "a") == _output_hashes(41, tmp / "b")
    ok = proc.returncode == 0 and same
    return ok, f"{len(PROPERTY_TESTS)} property suites: {summary}; same seed -> identical output hashes={same}"


# --------------------------------------------------------------------------


def test_criterion_1_attribution_accuracy(capsys):
    ok, detail = criterion_1()
    report(1, ok, detail, capsys)
    assert ok, detail


def test_criterion_2_event_loss(capsys):
    ok, detail = criterion_2()
    report(2, ok, detail, capsys)
    assert ok, detail


def test_criterion_3_strict_recovery(capsys):
    ok, detail = criterion_3()
    report(3, ok, detail, capsys)
    assert ok, detail


def test_criterion_4_case_study(capsys):
    ok, detail = criterion_4()
    report(4, ok, detail, capsys)
    assert ok, detail


def test_criterion_5_scaling(capsys):
    ok, detail = criterion_5()
    report(5, ok, detail, capsys)
    assert ok, detail


def test_criterion_6_property_suites(tmp_path, capsys):
    ok, detail = criterion_6(tmp_path)
    report(6, ok, detail, capsys)
    assert ok, detail


if __name__ == "__main__":
    import tempfile

    results = []
    for n, fn in enumerate((criterion_1, criterion_2, criterion_3, criterion_4, criterion_5), 1):
        ok, detail = fn()
        report(n, ok, detail)
        results.append(ok)
    with tempfile.TemporaryDirectory() as d:
        ok, detail = criterion_6(Path(d))
    report(6, ok, detail)
    results.append(ok)
    sys.exit(0 if all(results) else 1)
