from __future__ import annotations

import functools

import pytest
from hypothesis import HealthCheck, settings

from intrec.pipeline import analyze, scenario_from_result
from intrec.sim import AttackSpec, ScenarioConfig, simulate

settings.register_profile(
    "default",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


@functools.lru_cache(maxsize=None)
def cached_run(**kwargs):
    """Simulate + analyze once per distinct config; results are treated as read-only."""
    attacks = [AttackSpec(*a) for a in kwargs.pop("attacks", ())]
    for key in ("crud_writes", "upload_chunks", "think_ns"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    cfg = ScenarioConfig(attacks=attacks, **kwargs)
    result = simulate(cfg)
    scn = scenario_from_result(result)
    return result, scn, analyze(scn)


@pytest.fixture(scope="session")
def attack_run():
    """Thread-model run with all three attack kinds."""
    return cached_run(
        seed=11,
        concurrency=25,
        request_count=160,
        snapshot_every=20,
        backup_every=20,
        attacks=(("rce_webshell", 40), ("sqli_write", 70), ("multi_stage", 90, 120)),
    )


@pytest.fixture(scope="session")
def coroutine_run():
    return cached_run(
        seed=12,
        concurrency=25,
        request_count=160,
        server_model="coroutine",
        loop_threads=3,
        snapshot_every=20,
        backup_every=20,
        attacks=(("rce_webshell", 30), ("sqli_write", 100)),
    )


@pytest.fixture(scope="session")
def case_study():
    from intrec.sim import case_study_config

    result = simulate(case_study_config())
    scn = scenario_from_result(result)
    return result, scn, analyze(scn)
