import numpy as np
import pytest

from flsim.fedavg import EvalResult, ModelParams, ModelUpdate
from flsim.plans import (
    GateRejected,
    IncompatibleVersion,
    InvalidConfig,
    PlanError,
    ResourceLimits,
    TaskRegistry,
    deploy_all,
    derive_versioned_plan,
    execute_plan,
    generate_plan,
    plan_from_bytes,
    plan_to_bytes,
    product_configs,
    run_deployment_gate,
    task_config_from_dict,
)


def _cfg(**over):
    d = {"population_name": "pop", "task_name": "t", "code_reviewed": True, "model": {"dim": 3}}
    d.update(over)
    return task_config_from_dict(d)


def test_config_errors_are_collected_per_field():
    with pytest.raises(InvalidConfig) as err:
        task_config_from_dict({"population_name": "has space", "task_name": "", "hyper": {"epochs": 0}, "bogus": 1})
    assert {"population_name", "task_name", "hyper", "bogus"} <= set(err.value.reasons)


def test_plan_splits_device_and_server_parts():
    plan = generate_plan(_cfg())
    assert plan.is_training and plan.device_part.computation == "sgd/linear_l2"
    assert plan.server_part.aggregation == "weighted_mean"
    ev = generate_plan(_cfg(kind="evaluation"))
    assert not ev.is_training and ev.server_part.aggregation == "metrics_mean"


def test_plan_bytes_roundtrip():
    plan = generate_plan(_cfg(data_selector={"equals": {"app": "kb"}, "limit": 5}))
    assert plan_from_bytes(plan_to_bytes(plan)) == plan


def test_versioned_plans_compute_identical_results():
    plan = generate_plan(_cfg(required_runtime_versions=[1, 2, 3]))
    rng = np.random.default_rng(0)
    data = (rng.normal(size=(15, 3)), rng.normal(size=15))
    outs = [execute_plan(derive_versioned_plan(plan, v), ModelParams.zeros(3), data) for v in (1, 2, 3)]
    assert derive_versioned_plan(plan, 1).device_part.computation == "sgd/squared_error"
    for o in outs[1:]:
        assert o.weight == outs[0].weight and np.array_equal(o.delta, outs[0].delta)


def test_evaluation_plan_returns_metrics():
    plan = generate_plan(_cfg(kind="evaluation"))
    out = execute_plan(plan, ModelParams.zeros(3), (np.ones((2, 3)), np.ones(2)))
    assert isinstance(out, EvalResult) and out.loss == pytest.approx(0.5)
    with pytest.raises(PlanError):
        execute_plan(plan, ModelParams.zeros(4), (np.ones((2, 4)), np.ones(2)))


def test_gate_accepts_reviewed_task():
    cfg = _cfg(test_predicates=["finite_update", "loss_decreases"], required_runtime_versions=[2, 3])
    report = run_deployment_gate(cfg, generate_plan(cfg))
    assert report.accepted, report.render()
    assert "accepted: true" in report.render()


def test_gate_rejections():
    unreviewed = _cfg(code_reviewed=False)
    assert not run_deployment_gate(unreviewed, generate_plan(unreviewed)).code_review_ok

    diverging = _cfg(hyper={"eta": 1e6}, test_predicates=["finite_update", "loss_decreases"])
    r = run_deployment_gate(diverging, generate_plan(diverging))
    assert not r.predicates_pass

    heavy = _cfg(resource_limits={"max_memory_bytes": 100})
    assert not run_deployment_gate(heavy, generate_plan(heavy)).resources_within_range

    old = _cfg(model={"dim": 3, "kind": "logistic_regression"}, required_runtime_versions=[1, 3])
    r = run_deployment_gate(old, generate_plan(old))
    assert not r.versions_all_pass and any("v1" in d for d in r.details)


def test_unsupported_version_is_a_config_error():
    with pytest.raises(InvalidConfig):
        generate_plan(_cfg(required_runtime_versions=[9]))
    with pytest.raises(IncompatibleVersion):
        derive_versioned_plan(generate_plan(_cfg()), 9)


def test_registry_round_robin_and_rejection():
    a, b = _cfg(task_name="a"), _cfg(task_name="b")
    reg, reports = deploy_all([a, b, _cfg(task_name="c", code_reviewed=False)])
    assert [t.name for t in reg.tasks("pop")] == ["a", "b"]
    assert not reports[("pop", "c")].accepted
    assert [reg.next_task("pop").name for _ in range(3)] == ["a", "b", "a"]
    with pytest.raises(GateRejected):
        TaskRegistry().deploy(_cfg(code_reviewed=False), reports[("pop", "c")])
    with pytest.raises(PlanError):
        reg.deploy(a, reports[("pop", "a")])


def test_plan_for_picks_newest_compatible():
    reg, _ = deploy_all([_cfg(required_runtime_versions=[1, 3])])
    task = reg.tasks("pop")[0]
    assert (task.plan_for(1), task.plan_for(2), task.plan_for(3), task.plan_for(0)) == (1, 1, 3, None)


def test_product_configs():
    cfgs = product_configs(_cfg(), eta=[0.1, 0.2], epochs=[1, 2, 3])
    assert len(cfgs) == 6 and len({c.task_name for c in cfgs}) == 6
    assert {(c.hyper.eta, c.hyper.epochs) for c in cfgs} == {(e, n) for e in (0.1, 0.2) for n in (1, 2, 3)}
