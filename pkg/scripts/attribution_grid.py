"""Attribution precision/recall across server models, concurrency and pool sizes."""

from __future__ import annotations

import argparse
import time

from intrec.pipeline import analyze, attribution_metrics, scenario_from_result
from intrec.sim import AttackSpec, ScenarioConfig, simulate


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--requests", type=int, default=300)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    attacks = [AttackSpec("rce_webshell", 40), AttackSpec("sqli_write", 120), AttackSpec("multi_stage", 60, 200)]
    print(f"{'model':<20}{'conc':>6}{'pool':>6}{'db P/R':>14}{'file P/R':>14}{'secs':>8}")
    for model in ("thread_per_request", "coroutine"):
        for conc, pool in ((1, 4), (10, 8), (50, 8), (150, 16), (150, 4)):
            cfg = ScenarioConfig(seed=args.seed, concurrency=conc, request_count=args.requests, server_model=model,
                                 pool_size=pool, snapshot_every=0, backup_every=0, attacks=attacks)
            t0 = time.perf_counter()
            result = simulate(cfg)
            analysis = analyze(scenario_from_result(result))
            secs = time.perf_counter() - t0
            db = attribution_metrics(analysis, result.ground_truth, ("db",))
            fs = attribution_metrics(analysis, result.ground_truth, ("file",))
            print(f"{model:<20}{conc:>6}{pool:>6}{db.precision:>7.3f}/{db.recall:<6.3f}"
                  f"{fs.precision:>7.3f}/{fs.recall:<6.3f}{secs:>8.2f}")


if __name__ == "__main__":
    main()
