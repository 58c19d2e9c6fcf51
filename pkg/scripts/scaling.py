"""Recovery time against replayed operations and affected files, with a linear fit."""

from __future__ import annotations

import argparse

from intrec.bench import db_workload, fs_workload, linear_fit, sweep_times, time_db_recovery, time_fs_recovery


def table(label: str, xs: list[int], ts: list[float]) -> None:
    slope, intercept, r2 = linear_fit(xs, ts)
    print(f"{label:>8}{'ms':>10}")
    for x, t in zip(xs, ts):
        print(f"{x:>8}{t * 1e3:>10.3f}")
    print(f"slope {slope * 1e6:.3f} us/unit, intercept {intercept * 1e3:.3f} ms, R² {r2:.4f}\n")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=15)
    args = ap.parse_args()
    ops = [200, 400, 600, 800, 1000, 2000, 4000]
    files = [20, 40, 60, 80, 100]
    table("ops", ops, sweep_times(time_db_recovery, [db_workload(n) for n in ops], args.repeats))
    table("files", files, sweep_times(time_fs_recovery,
                                      [fs_workload(n, writes_per_file=40, size=16384) for n in files], args.repeats))


if __name__ == "__main__":
    main()
