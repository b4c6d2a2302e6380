from importlib import resources

import pytest
import yaml

from flsim.cli import EXIT_CONFIG, EXIT_GATE, EXIT_OK, main

TASK = {"population_name": "pop", "task_name": "lr", "code_reviewed": True, "rounds": 2,
        "model": {"dim": 3}, "round_params": {"goal_count": 5}}


def _write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(obj))
    return str(p)


def _experiment(**over):
    d = {"seed": 4, "duration_s": 1200, "fleet": {"n_devices": 50}, "data": {"dim": 3},
         "server": {"estimated_population": 50}, "tasks": [dict(TASK)]}
    d.update(over)
    return d


@pytest.fixture
def run_dir(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--config", _write(tmp_path, "c.yaml", _experiment()), "--out", str(out)]) == EXIT_OK
    return out


def test_run_writes_artifacts(run_dir, capsys):
    assert (run_dir / "events.log").stat().st_size > 0
    assert (run_dir / "manifest.json").exists()


def test_report_and_replay(run_dir, capsys):
    capsys.readouterr()
    assert main(["report", "--run", str(run_dir)]) == EXIT_OK
    assert "traffic:" in capsys.readouterr().out
    dev = (run_dir / "events.log").read_text().split()[1]
    assert main(["replay", "--run", str(run_dir), "--filter", f"device={dev}"]) == EXIT_OK
    out = capsys.readouterr().out
    assert f"# device {dev} round" in out
    assert main(["replay", "--run", str(run_dir), "--filter", "1-1-1"]) == EXIT_OK
    assert "# device" in capsys.readouterr().out
    assert main(["replay", "--run", str(run_dir), "--filter", "colour=red"]) == EXIT_CONFIG


def test_config_errors_exit_3(tmp_path):
    assert main(["run", "--config", _write(tmp_path, "bad.yaml", {"seed": "x"}), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["run", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["run", "--config", _write(tmp_path, "c.yaml", _experiment())]) == EXIT_CONFIG  # no output dir
    assert main(["deploy-task", "--config", _write(tmp_path, "t.yaml", {"task_name": "x"})]) == EXIT_CONFIG
    assert main(["replay", "--run", str(tmp_path / "none"), "--filter", "device=1"]) == EXIT_CONFIG


def test_gate_rejection_exits_2(tmp_path, capsys):
    unreviewed = dict(TASK, code_reviewed=False)
    assert main(["deploy-task", "--config", _write(tmp_path, "t.yaml", unreviewed)]) == EXIT_GATE
    assert "accepted: false" in capsys.readouterr().out
    cfg = _write(tmp_path, "c.yaml", _experiment(tasks=[unreviewed]))
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_GATE


def test_deploy_task_accepts_list_and_experiment(tmp_path, capsys):
    assert main(["deploy-task", "--config", _write(tmp_path, "l.yaml", [TASK, dict(TASK, task_name="b")])]) == EXIT_OK
    assert capsys.readouterr().out.count("accepted: true") == 2
    assert main(["deploy-task", "--config", _write(tmp_path, "e.yaml", _experiment())]) == EXIT_OK


@pytest.mark.parametrize("name", ["quickstart.yaml", "secagg.yaml", "diurnal_day.yaml"])
def test_bundled_configs_validate(name):
    from flsim.sim import config_from_dict

    text = resources.files("flsim").joinpath("configs", name).read_text()
    cfg = config_from_dict(yaml.safe_load(text))
    assert cfg.tasks and cfg.duration_ms > 0


def test_usage_error_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code != 0
