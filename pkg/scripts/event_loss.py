"""Attribution F1 as kernel event loss grows."""

from __future__ import annotations

import argparse
import statistics

from intrec.pipeline import analyze, attribution_metrics, scenario_from_result
from intrec.sim import AttackSpec, ScenarioConfig, simulate


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--requests", type=int, default=300)
    ap.add_argument("--loss", type=float, nargs="+", default=[0.0, 0.0001, 0.001, 0.01, 0.05])
    args = ap.parse_args()
    print(f"{'loss':>8}{'mean F1':>10}{'min F1':>10}")
    for p in args.loss:
        f1s = []
        for seed in range(args.seeds):
            cfg = ScenarioConfig(seed=200 + seed, concurrency=150, request_count=args.requests, event_loss_prob=p,
                                 snapshot_every=0, backup_every=0,
                                 attacks=[AttackSpec("rce_webshell", 50), AttackSpec("sqli_write", 150)])
            result = simulate(cfg)
            f1s.append(attribution_metrics(analyze(scenario_from_result(result)), result.ground_truth).f1)
        print(f"{p:>8}{statistics.fmean(f1s):>10.4f}{min(f1s):>10.4f}")


if __name__ == "__main__":
    main()
