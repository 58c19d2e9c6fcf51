"""Synthetic recovery workloads for timing how recovery scales."""

from __future__ import annotations

import gc
import random
import statistics
import time
from dataclasses import dataclass

from .dbattr import DBOperation
from .provenance import FileOperation
from .recovery import execute_fs_recovery, plan_db_recovery, plan_fs_recovery, replay_db
from .statestore import DATA, BackupChain, DBState, FileTree, WriteLogRecord, render_statement, snapshot_db

ROWS = 200
T0 = 1_000_000


@dataclass
class DBWorkload:
    snapshot: object
    log: list[DBOperation]
    malicious: list[DBOperation]


@dataclass
class FSWorkload:
    tree: FileTree
    chain: BackupChain
    write_log: list[WriteLogRecord]
    malicious: list[FileOperation]


def db_workload(replayed: int, seed: int = 0) -> DBWorkload:
    """``replayed`` benign statements after one malicious one."""
    rng = random.Random(seed)
    state = DBState({"posts": {f"p{i}": {"body": "x" * 32, "n": 0} for i in range(ROWS)}})
    snap = snapshot_db(state, T0)
    evil = DBOperation(T0 + 1, render_statement("UPD", "posts", "p0", {"body": "pwned"}), (1, 1))
    log = [evil]
    for i in range(replayed):
        key = f"p{rng.randrange(ROWS)}"
        verb = rng.choice(("UPD", "UPD", "INS"))
        log.append(DBOperation(T0 + 2 + i, render_statement(verb, "posts", key, {"body": "y" * 32, "n": i}), (1, 2)))
    return DBWorkload(snap, log, [evil])


def fs_workload(files: int, writes_per_file: int = 10, size: int = 4096, seed: int = 0) -> FSWorkload:
    """``files`` data files, each hit by one malicious write among benign ones."""
    rng = random.Random(seed)
    entries = {f"/srv/data/f{i:04d}": bytes(rng.randrange(256) for _ in range(64)) * (size // 64) for i in range(files)}
    tree = FileTree(entries, {"/srv/data": DATA})
    chain = BackupChain()
    chain.backup(tree, T0)
    write_log, malicious = [], []
    seq = 0
    for w in range(writes_per_file):
        for i in range(files):
            seq += 1
            path = f"/srv/data/f{i:04d}"
            data = bytes([rng.randrange(256)]) * 64
            offset = rng.randrange(0, size - 64)
            rec = WriteLogRecord(seq, T0 + seq, 1, 1, path, offset, data)
            write_log.append(rec)
            tree.entries[path] = tree.entries[path][:offset] + data + tree.entries[path][offset + 64 :]
            if w == 0:
                malicious.append(FileOperation(path, "write", rec.ts, (1, 1), seq, offset=offset, data=data))
    return FSWorkload(tree, chain, write_log, malicious)


def time_db_recovery(w: DBWorkload) -> float:
    t0 = time.perf_counter()
    plan = plan_db_recovery(w.malicious, [w.snapshot], w.log)
    replay_db(plan)
    return time.perf_counter() - t0


def time_fs_recovery(w: FSWorkload) -> float:
    t0 = time.perf_counter()
    plan = plan_fs_recovery(w.malicious, w.tree, w.chain, w.write_log, {})
    execute_fs_recovery(plan, w.tree)
    return time.perf_counter() - t0


def median_time(fn, workload, repeats: int = 9) -> float:
    """Median wall time with the garbage collector paused."""
    enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        fn(workload)  # warm-up
        return statistics.median(fn(workload) for _ in range(repeats))
    finally:
        if enabled:
            gc.enable()


def sweep_times(fn, workloads: list, repeats: int = 9) -> list[float]:
    """Median wall time per workload, with repeats interleaved across workloads.

    Interleaving spreads any burst of background load over every size
    instead of concentrating it on one.
    """
    enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        for w in workloads:
            fn(w)  # warm-up
        samples: list[list[float]] = [[] for _ in workloads]
        for _ in range(repeats):
            for i, w in enumerate(workloads):
                samples[i].append(fn(w))
        return [statistics.median(s) for s in samples]
    finally:
        if enabled:
            gc.enable()


def linear_fit(xs, ys) -> tuple[float, float, float]:
    """(slope, intercept, R²) of an ordinary least-squares line."""
    slope, intercept = statistics.linear_regression(xs, ys)
    r = statistics.correlation(xs, ys)
    return slope, intercept, r * r
