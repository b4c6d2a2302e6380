"""Command-line entry point: ``flsim run | deploy-task | report | replay``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .analytics import encode_session, group_sessions, read_event_log
from .plans import GateRejected, InvalidConfig, generate_plan, run_deployment_gate, task_config_from_dict
from .sim.config import ConfigError, load_config
from .sim.experiment import run_experiment
from .sim.report import format_profile, report_profile, write_profile

EXIT_OK = 0
EXIT_GATE = 2
EXIT_CONFIG = 3


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = args.out or cfg.output_dir
    if out is None:
        raise ConfigError({"output_dir": "pass --out or set output_dir"})
    result = run_experiment(cfg, out)
    m = result.manifest
    print(f"run finished at t={m['end_time_ms']} ms; rounds committed {m['rounds_committed']}")
    for task, loss in sorted(m["final_eval_loss"].items()):
        print(f"  {task}: holdout loss {loss:.6f}")
    print(f"artifacts in {result.out_dir}")
    return EXIT_OK


def _task_dicts(path) -> list:
    try:
        d = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError({"config": str(exc)}) from None
    if isinstance(d, dict) and "tasks" in d:
        return list(d["tasks"] or [])
    if isinstance(d, list):
        return d
    if isinstance(d, dict):
        return [d]
    raise ConfigError({"config": "expected a task mapping, a list of tasks, or an experiment config"})


def _cmd_deploy(args) -> int:
    cfgs = [task_config_from_dict(t) for t in _task_dicts(args.config)]
    rejected = False
    for cfg in cfgs:
        report = run_deployment_gate(cfg, generate_plan(cfg))
        print(f"{cfg.population_name}/{cfg.task_name}")
        print(report.render())
        u = report.usage
        print(f"usage: memory {u.memory_bytes} B, compute {u.compute_ms:g} ms, examples {u.examples}")
        rejected |= not report.accepted
    return EXIT_GATE if rejected else EXIT_OK


def _cmd_report(args) -> int:
    profile = report_profile(args.run)
    files = write_profile(profile, args.run)
    print(format_profile(profile))
    for f in files:
        print(f"wrote {f}")
    return EXIT_OK


def _cmd_replay(args) -> int:
    path = Path(args.run) / "events.log"
    try:
        events = read_event_log(path.read_text().splitlines())
    except OSError as exc:
        raise ConfigError({"run": str(exc)}) from None
    key, _, value = args.filter.partition("=")
    if not value:
        key, value = ("device", key) if key.isdigit() else ("round", key)
    if key not in ("device", "round"):
        raise ConfigError({"filter": "use device=<id> or round=<round id>"})
    if key == "device":
        keep = [e for e in events if e.device_id == int(value)]
    else:
        keep = [e for e in events if e.round_id == value]
    for e in keep:
        sys.stdout.write(e.to_line())
    for (dev, rid), evs in group_sessions(keep).items():
        print(f"# device {dev} round {rid}: {encode_session(evs)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flsim", description="Federated learning system simulator")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment and write artifacts")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.set_defaults(fn=_cmd_run)
    d = sub.add_parser("deploy-task", help="run the deployment gate on task configs")
    d.add_argument("--config", required=True)
    d.set_defaults(fn=_cmd_deploy)
    rep = sub.add_parser("report", help="summarize a finished run")
    rep.add_argument("--run", required=True)
    rep.set_defaults(fn=_cmd_report)
    rp = sub.add_parser("replay", help="print the session events of one device or round")
    rp.add_argument("--run", required=True)
    rp.add_argument("--filter", required=True, help="device=<id> or round=<round id>")
    rp.set_defaults(fn=_cmd_replay)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except GateRejected as exc:
        print(f"deployment gate rejected: {exc}", file=sys.stderr)
        return EXIT_GATE
    except (ConfigError, InvalidConfig) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
