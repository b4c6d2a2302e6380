from flsim.sim import config_from_dict, run_experiment

BASE = {"duration_s": 1800, "fleet": {"n_devices": 100, "dropout_hazard": 0.05, "speed_sigma": 0.5},
        "data": {"dim": 3}, "server": {"estimated_population": 100, "aggregator_capacity": 6},
        "failure_injections": [{"at_s": 45, "kind": "selector"}],
        "tasks": [{"population_name": "pop", "task_name": "lr", "code_reviewed": True, "rounds": 4,
                   "model": {"dim": 3}, "round_params": {"goal_count": 8}}]}


def _artifacts(seed, path):
    run_experiment(config_from_dict(dict(BASE, seed=seed)), path)
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_same_seed_same_bytes(tmp_path):
    assert _artifacts(3, tmp_path / "a") == _artifacts(3, tmp_path / "b")


def test_different_seed_different_log(tmp_path):
    a = _artifacts(3, tmp_path / "a")
    b = _artifacts(4, tmp_path / "b")
    assert a["events.log"] != b["events.log"]
