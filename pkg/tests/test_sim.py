import csv
import json

import numpy as np
import pytest

from flsim.server import UnknownActor
from flsim.sim import (
    ConfigError,
    FailureInjection,
    FleetSpec,
    InvalidSpec,
    SyntheticDataSpec,
    build_simulation,
    config_from_dict,
    generate_data,
    generate_fleet,
    inject_failure,
    load_config,
    run_experiment,
)
from flsim.sim.report import format_profile, report_profile, write_profile

TASK = {"population_name": "pop", "task_name": "lr", "code_reviewed": True, "rounds": 3,
        "model": {"dim": 3}, "round_params": {"goal_count": 8}}


def _d(**over):
    d = {"seed": 2, "duration_s": 1800, "fleet": {"n_devices": 80}, "data": {"dim": 3},
         "server": {"estimated_population": 80}, "device": {"base_cost_ms": 200}, "tasks": [dict(TASK)]}
    d.update(over)
    return d


def test_data_is_seeded_and_shaped():
    spec = SyntheticDataSpec(dim=3, examples_mean=5, count_distribution="fixed")
    a, b = generate_data(spec, 4, 9), generate_data(spec, 4, 9)
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a.shards, b.shards))
    assert [len(s[1]) for s in a.shards] == [5] * 4
    assert a.pooled()[0].shape == (20, 3)
    with pytest.raises(InvalidSpec):
        SyntheticDataSpec(model="tree")


def test_fleet_mix_and_schedules():
    spec = FleetSpec(n_devices=2000, version_mix={1: 1, 3: 3}, genuine_fraction=0.9, schedule="diurnal")
    fleet = generate_fleet(spec, SyntheticDataSpec(dim=2), 0)
    versions = np.array([p.runtime_version for p in fleet.profiles])
    assert abs((versions == 3).mean() - 0.75) < 0.04
    assert abs(np.mean([p.genuine for p in fleet.profiles]) - 0.9) < 0.03
    at_peak = np.mean([p.schedule.is_available(2 * 3_600_000) for p in fleet.profiles])
    assert abs(at_peak - spec.f_max) < 0.04
    with pytest.raises(InvalidSpec):
        FleetSpec(schedule="weekly")


def test_config_reports_every_problem():
    with pytest.raises(ConfigError) as err:
        config_from_dict({"seed": -1, "duration_s": 0, "tasks": [{"task_name": "x"}], "bogus": 1,
                          "network": {"latency": 3}, "failure_injections": [{"kind": "master"}]})
    reasons = err.value.reasons
    assert {"seed", "duration", "bogus", "network", "failure_injections[0]"} <= set(reasons)
    assert any(k.startswith("tasks[0].") for k in reasons)
    with pytest.raises(ConfigError) as err:
        config_from_dict(_d(data={"dim": 5}))
    assert "data" in err.value.reasons


def test_config_secagg_block_and_hash():
    cfg = config_from_dict(_d(secagg={"enabled": True, "k": 3}))
    assert cfg.server.secagg and cfg.server.secagg_k == 3
    assert cfg.config_hash() == config_from_dict(_d(secagg={"enabled": True, "k": 3})).config_hash()
    assert cfg.config_hash() != config_from_dict(_d()).config_hash()


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_inject_failure_targets():
    sim = build_simulation(config_from_dict(_d()))
    with pytest.raises(UnknownActor):
        inject_failure(sim, FailureInjection(0, "device"))
    victim = inject_failure(sim, FailureInjection(0, "selector", index=0))
    assert victim is not None and victim.kind == "selector"
    assert inject_failure(sim, FailureInjection(0, "master", index=5)) is None
    assert [x[1] for x in sim.injections] == ["selector", "master"]


def test_artifacts_and_profile(tmp_path):
    res = run_experiment(config_from_dict(_d(failure_injections=[{"at_s": 60, "kind": "aggregator"}])), tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"events.log", "ledger.jsonl", "rounds.csv", "shapes.csv", "traffic.csv", "windows.csv",
            "availability.csv", "health.csv", "injections.csv", "manifest.json"} <= names
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["finished"] and manifest["rounds_committed"] == {"lr": 3}
    assert manifest["config_hash"] == res.sim.cfg.config_hash()
    with (tmp_path / "health.csv").open() as fh:
        header = next(csv.reader(fh))
    assert "device_id" not in header

    prof = report_profile(tmp_path)
    assert prof.bytes_down > 0 and prof.bytes_up > 0
    assert prof.participation_ms.size > 0 and prof.participation_ms.max() <= prof.participation_cap_ms
    files = write_profile(prof, tmp_path)
    assert all(f.exists() for f in files)
    assert "traffic" in format_profile(prof)


def test_stop_when_done_false_runs_full_duration():
    d = _d(stop_when_done=False, duration_s=600)
    d["tasks"][0]["rounds"] = 1
    res = run_experiment(config_from_dict(d))
    assert res.sim.engine.now == 600_000 and res.out_dir is None
