"""Task configuration, plan generation, versioned plans and the deployment gate.

A plan's computations are names in a per-runtime-version registry rather than
serialized graphs. Deriving a plan for another runtime version rewrites those names
through a transformation table; both plans resolve to the same implementation, so
they produce identical numbers on identical inputs.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from .fedavg import (
    EvalResult,
    Hyperparams,
    LossKind,
    LossModel,
    ModelParams,
    ModelUpdate,
    client_update,
    evaluate,
)
from .protocol.rounds import RoundParams

PLAN_FORMAT_VERSION = 1
DEFAULT_MEMORY_LIMIT = 64 * 1024 * 1024
DEFAULT_COMPUTE_LIMIT_MS = 60_000


class PlanError(Exception):
    pass


class InvalidConfig(PlanError):
    def __init__(self, reasons: Mapping[str, str]):
        self.reasons = dict(reasons)
        super().__init__("; ".join(f"{k}: {v}" for k, v in sorted(self.reasons.items())))


class IncompatibleVersion(PlanError):
    pass


class GateRejected(PlanError):
    pass


# -- computation registry -----------------------------------------------------

_LOSS_SUFFIX = {LossKind.LINEAR_REGRESSION_L2: "linear_l2", LossKind.LOGISTIC_REGRESSION: "logistic"}

# canonical op name -> name used by that runtime version (absent = unsupported)
VERSION_TRANSFORMS: dict[int, dict[str, str]] = {
    3: {
        "sgd/linear_l2": "sgd/linear_l2",
        "sgd/logistic": "sgd/logistic",
        "eval/linear_l2": "eval/linear_l2",
        "eval/logistic": "eval/logistic",
        "ckpt/restore": "ckpt/restore",
        "ckpt/save": "ckpt/save",
    },
    2: {
        "sgd/linear_l2": "sgd/squared_error",
        "sgd/logistic": "sgd/logistic",
        "eval/linear_l2": "eval/squared_error",
        "eval/logistic": "eval/logistic",
        "ckpt/restore": "ckpt/restore",
        "ckpt/save": "ckpt/save",
    },
    1: {
        "sgd/linear_l2": "sgd/squared_error",
        "eval/linear_l2": "eval/squared_error",
        "ckpt/restore": "ckpt/restore_v1",
        "ckpt/save": "ckpt/save",
    },
}

_REVERSE = {v: {name: canon for canon, name in table.items()} for v, table in VERSION_TRANSFORMS.items()}
SUPPORTED_VERSIONS = tuple(sorted(VERSION_TRANSFORMS))


def canonical_op(version: int, name: str) -> str:
    try:
        return _REVERSE[version][name]
    except KeyError:
        raise IncompatibleVersion(f"op {name!r} is not part of runtime version {version}") from None


def versioned_op(version: int, canonical: str) -> str:
    table = VERSION_TRANSFORMS.get(version)
    if table is None:
        raise IncompatibleVersion(f"runtime version {version} is not supported")
    if canonical not in table:
        raise IncompatibleVersion(f"runtime version {version} has no implementation of {canonical!r}")
    return table[canonical]


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class DataSelector:
    """Predicate over example metadata: exact-match fields, a maximum age and a cap."""

    equals: tuple = ()
    max_age_ms: Optional[int] = None
    limit: Optional[int] = None

    @classmethod
    def from_dict(cls, d: Optional[Mapping]) -> "DataSelector":
        d = dict(d or {})
        unknown = set(d) - {"equals", "max_age_ms", "limit"}
        if unknown:
            raise ValueError(f"unknown selector keys {sorted(unknown)}")
        return cls(tuple(sorted((d.get("equals") or {}).items())), d.get("max_age_ms"), d.get("limit"))

    def to_dict(self) -> dict:
        return {"equals": dict(self.equals), "max_age_ms": self.max_age_ms, "limit": self.limit}

    def matches(self, metadata: Mapping, age_ms: int) -> bool:
        if self.max_age_ms is not None and age_ms > self.max_age_ms:
            return False
        return all(metadata.get(k) == v for k, v in self.equals)


@dataclass(frozen=True)
class ResourceLimits:
    max_memory_bytes: int = DEFAULT_MEMORY_LIMIT
    max_compute_ms: int = DEFAULT_COMPUTE_LIMIT_MS
    max_examples: int = 100_000


@dataclass(frozen=True)
class FLTaskConfig:
    population_name: str
    task_name: str
    kind: str = "training"
    hyper: Hyperparams = field(default_factory=Hyperparams)
    round_params: RoundParams = field(default_factory=lambda: RoundParams(goal_count=10))
    data_selector: DataSelector = field(default_factory=DataSelector)
    required_runtime_versions: tuple = (3,)
    secagg_group_min_k: Optional[int] = None
    model_kind: LossKind = LossKind.LINEAR_REGRESSION_L2
    model_dim: int = 10
    code_reviewed: bool = False
    test_predicates: tuple = ("finite_update",)
    resource_limits: ResourceLimits = field(default_factory=ResourceLimits)
    rounds: int = 10


_CONFIG_KEYS = {
    "population_name",
    "task_name",
    "kind",
    "hyper",
    "round_params",
    "data_selector",
    "required_runtime_versions",
    "secagg_group_min_k",
    "model",
    "code_reviewed",
    "test_predicates",
    "resource_limits",
    "rounds",
}


def task_config_from_dict(d: Mapping[str, Any]) -> FLTaskConfig:
    """Build a task config, collecting every field-level problem before raising."""
    reasons: dict[str, str] = {}
    d = dict(d)
    for k in sorted(set(d) - _CONFIG_KEYS):
        reasons[k] = "unknown field"

    def take(name, fn):
        try:
            return fn()
        except (TypeError, ValueError, KeyError) as exc:
            reasons[name] = str(exc) or type(exc).__name__
            return None

    for name in ("population_name", "task_name"):
        v = d.get(name)
        if not isinstance(v, str) or not v or any(c.isspace() for c in v):
            reasons[name] = "must be a non-empty string without whitespace"
    kind = d.get("kind", "training")
    if kind not in ("training", "evaluation"):
        reasons["kind"] = "must be 'training' or 'evaluation'"
    hyper = take("hyper", lambda: Hyperparams(**(d.get("hyper") or {})))
    rp = take("round_params", lambda: RoundParams(**(d.get("round_params") or {"goal_count": 10})))
    sel = take("data_selector", lambda: DataSelector.from_dict(d.get("data_selector")))
    versions = d.get("required_runtime_versions", [3])
    if not isinstance(versions, (list, tuple)) or not versions or not all(isinstance(v, int) for v in versions):
        reasons["required_runtime_versions"] = "must be a non-empty list of integers"
        versions = [3]
    k = d.get("secagg_group_min_k")
    if k is not None and (not isinstance(k, int) or k < 1):
        reasons["secagg_group_min_k"] = "must be a positive integer or null"
    model = d.get("model") or {}
    mkind = take("model", lambda: LossKind(model.get("kind", "linear_regression_l2")))
    dim = model.get("dim", 10)
    if not isinstance(dim, int) or dim < 1:
        reasons["model"] = "dim must be a positive integer"
    limits = take("resource_limits", lambda: ResourceLimits(**(d.get("resource_limits") or {})))
    preds = d.get("test_predicates", ["finite_update"])
    bad = [p for p in preds if _predicate_name(p) not in PREDICATES]
    if bad:
        reasons["test_predicates"] = f"unknown predicates {bad}"
    rounds = d.get("rounds", 10)
    if not isinstance(rounds, int) or rounds < 1:
        reasons["rounds"] = "must be a positive integer"
    if reasons:
        raise InvalidConfig(reasons)
    return FLTaskConfig(
        population_name=d["population_name"],
        task_name=d["task_name"],
        kind=kind,
        hyper=hyper,
        round_params=rp,
        data_selector=sel,
        required_runtime_versions=tuple(sorted(set(versions))),
        secagg_group_min_k=k,
        model_kind=mkind,
        model_dim=dim,
        code_reviewed=bool(d.get("code_reviewed", False)),
        test_predicates=tuple(_freeze(p) for p in preds),
        resource_limits=limits,
        rounds=rounds,
    )


def _freeze(p):
    if isinstance(p, Mapping):
        return tuple(sorted(p.items()))
    return p


def _predicate_name(p) -> str:
    if isinstance(p, str):
        return p
    if isinstance(p, Mapping):
        return p.get("name", "")
    return dict(p).get("name", "")


# -- plans --------------------------------------------------------------------

@dataclass(frozen=True)
class DevicePlan:
    computation: str
    entry_points: tuple
    data_selection: DataSelector
    epochs: int
    batch_size: int
    eta: float
    seed: int
    mutates_weights: bool
    model_dim: int


@dataclass(frozen=True)
class ServerPlan:
    aggregation: str
    round_params: RoundParams
    secagg_enabled: bool
    secagg_min_k: int
    model_dim: int


@dataclass(frozen=True)
class FLPlan:
    population_name: str
    task_name: str
    version: int
    device_part: DevicePlan
    server_part: ServerPlan

    @property
    def is_training(self) -> bool:
        return self.device_part.mutates_weights

    def entry(self, name: str) -> str:
        return dict(self.device_part.entry_points)[name]


def _canonical_entry_points(cfg: FLTaskConfig) -> dict[str, str]:
    suffix = _LOSS_SUFFIX[cfg.model_kind]
    eps = {"restore": "ckpt/restore", "eval": f"eval/{suffix}"}
    if cfg.kind == "training":
        eps["train"] = f"sgd/{suffix}"
        eps["save"] = "ckpt/save"
    return eps


def generate_plan(cfg: FLTaskConfig) -> FLPlan:
    """Split a task into its device and server parts at the newest required version."""
    reasons = {}
    if cfg.hyper.eta < 0:
        reasons["hyper"] = "eta must be >= 0"
    unknown = [v for v in cfg.required_runtime_versions if v not in VERSION_TRANSFORMS]
    if unknown:
        reasons["required_runtime_versions"] = f"unsupported versions {unknown}"
    if cfg.secagg_group_min_k is not None and cfg.secagg_group_min_k > cfg.round_params.target_count:
        reasons["secagg_group_min_k"] = "larger than the configured participants per round"
    if reasons:
        raise InvalidConfig(reasons)
    version = max(cfg.required_runtime_versions)
    canonical = _canonical_entry_points(cfg)
    try:
        eps = {k: versioned_op(version, v) for k, v in canonical.items()}
    except IncompatibleVersion as exc:
        raise InvalidConfig({"model": str(exc)}) from None
    training = cfg.kind == "training"
    device = DevicePlan(
        computation=eps["train"] if training else eps["eval"],
        entry_points=tuple(sorted(eps.items())),
        data_selection=cfg.data_selector,
        epochs=cfg.hyper.epochs,
        batch_size=cfg.hyper.batch_size,
        eta=cfg.hyper.eta,
        seed=cfg.hyper.seed,
        mutates_weights=training,
        model_dim=cfg.model_dim,
    )
    server = ServerPlan(
        aggregation="weighted_mean" if training else "metrics_mean",
        round_params=cfg.round_params,
        secagg_enabled=cfg.secagg_group_min_k is not None,
        secagg_min_k=cfg.secagg_group_min_k or 1,
        model_dim=cfg.model_dim,
    )
    return FLPlan(cfg.population_name, cfg.task_name, version, device, server)


def derive_versioned_plan(plan: FLPlan, target_version: int) -> FLPlan:
    if target_version == plan.version:
        return plan
    if target_version not in VERSION_TRANSFORMS:
        raise IncompatibleVersion(f"runtime version {target_version} is not supported")
    eps = {k: versioned_op(target_version, canonical_op(plan.version, v)) for k, v in plan.device_part.entry_points}
    comp = versioned_op(target_version, canonical_op(plan.version, plan.device_part.computation))
    device = replace(plan.device_part, computation=comp, entry_points=tuple(sorted(eps.items())))
    return replace(plan, version=target_version, device_part=device)


# -- execution ----------------------------------------------------------------

def _op_loss(canonical: str) -> LossModel:
    suffix = canonical.split("/", 1)[1]
    for kind, s in _LOSS_SUFFIX.items():
        if s == suffix:
            return LossModel(kind)
    raise IncompatibleVersion(f"no loss registered for {canonical!r}")


def execute_plan(plan: FLPlan, checkpoint: ModelParams, data, seed: Optional[int] = None):
    """Run the device part on ``data``: a ``ModelUpdate`` for training, else ``EvalResult``."""
    if checkpoint.dim != plan.device_part.model_dim:
        raise PlanError(f"checkpoint has dim {checkpoint.dim}, plan expects {plan.device_part.model_dim}")
    canonical = canonical_op(plan.version, plan.device_part.computation)
    loss = _op_loss(canonical)
    if canonical.startswith("sgd/"):
        dp = plan.device_part
        hyper = Hyperparams(dp.epochs, dp.batch_size, dp.eta, dp.seed if seed is None else seed)
        return client_update(checkpoint, data, hyper, loss)
    return evaluate(checkpoint, data, loss)


# -- serialization ------------------------------------------------------------

def plan_to_dict(plan: FLPlan) -> dict:
    dp = plan.device_part
    sp = plan.server_part
    return {
        "format_version": PLAN_FORMAT_VERSION,
        "population_name": plan.population_name,
        "task_name": plan.task_name,
        "version": plan.version,
        "device_part": {
            "computation": dp.computation,
            "entry_points": dict(dp.entry_points),
            "data_selection": dp.data_selection.to_dict(),
            "epochs": dp.epochs,
            "batch_size": dp.batch_size,
            "eta": dp.eta,
            "seed": dp.seed,
            "mutates_weights": dp.mutates_weights,
            "model_dim": dp.model_dim,
        },
        "server_part": {
            "aggregation": sp.aggregation,
            "round_params": asdict(sp.round_params),
            "secagg_enabled": sp.secagg_enabled,
            "secagg_min_k": sp.secagg_min_k,
            "model_dim": sp.model_dim,
        },
    }


def plan_to_bytes(plan: FLPlan) -> bytes:
    return json.dumps(plan_to_dict(plan), sort_keys=True, separators=(",", ":")).encode("utf-8")


def plan_from_bytes(raw: bytes) -> FLPlan:
    d = json.loads(raw.decode("utf-8"))
    if d.get("format_version") != PLAN_FORMAT_VERSION:
        raise PlanError(f"unsupported plan format {d.get('format_version')!r}")
    dp = d["device_part"]
    sp = d["server_part"]
    device = DevicePlan(
        computation=dp["computation"],
        entry_points=tuple(sorted(dp["entry_points"].items())),
        data_selection=DataSelector.from_dict(dp["data_selection"]),
        epochs=dp["epochs"],
        batch_size=dp["batch_size"],
        eta=dp["eta"],
        seed=dp["seed"],
        mutates_weights=dp["mutates_weights"],
        model_dim=dp["model_dim"],
    )
    server = ServerPlan(
        aggregation=sp["aggregation"],
        round_params=RoundParams(**sp["round_params"]),
        secagg_enabled=sp["secagg_enabled"],
        secagg_min_k=sp["secagg_min_k"],
        model_dim=sp["model_dim"],
    )
    return FLPlan(d["population_name"], d["task_name"], d["version"], device, server)


# -- deployment gate ----------------------------------------------------------

@dataclass(frozen=True)
class SimulatedResources:
    """Proxy-device harness used by the gate."""

    n_examples: int = 200
    base_cost_ms: float = 2.0
    seed: int = 0
    noise: float = 0.1


@dataclass(frozen=True)
class ResourceUsage:
    memory_bytes: int
    compute_ms: float
    examples: int


@dataclass
class DeploymentGateReport:
    code_review_ok: bool
    predicates_pass: bool
    resources_within_range: bool
    versions_all_pass: bool
    details: list = field(default_factory=list)
    usage: Optional[ResourceUsage] = None

    @property
    def accepted(self) -> bool:
        return self.code_review_ok and self.predicates_pass and self.resources_within_range and self.versions_all_pass

    def render(self) -> str:
        lines = [f"accepted: {str(self.accepted).lower()}"]
        for name in ("code_review_ok", "predicates_pass", "resources_within_range", "versions_all_pass"):
            lines.append(f"{name}: {str(getattr(self, name)).lower()}")
        lines.extend(f"- {d}" for d in self.details)
        return "\n".join(lines)


def proxy_dataset(cfg: FLTaskConfig, res: SimulatedResources):
    """Synthetic proxy data with the task's shape, drawn independently of any fleet."""
    rng = np.random.default_rng([res.seed, cfg.model_dim, 0x9A7E])
    X = rng.normal(size=(res.n_examples, cfg.model_dim))
    w = rng.normal(size=cfg.model_dim)
    z = X @ w
    if cfg.model_kind is LossKind.LOGISTIC_REGRESSION:
        y = (rng.random(res.n_examples) < 1 / (1 + np.exp(-z))).astype(float)
    else:
        y = z + res.noise * rng.normal(size=res.n_examples)
    return X, y


def measure_usage(plan: FLPlan, res: SimulatedResources) -> ResourceUsage:
    """Memory and compute proxies for one proxy-device run of the plan."""
    dp = plan.device_part
    dim = dp.model_dim
    n = res.n_examples
    epochs = dp.epochs if dp.mutates_weights else 1
    # examples + labels, plus model, working copy, gradient and one batch buffer
    memory = 8 * (n * (dim + 1) + 3 * dim + dp.batch_size * (dim + 1))
    return ResourceUsage(memory, res.base_cost_ms * n * epochs, n)


@dataclass(frozen=True)
class _ProxyOutcome:
    output: Any
    before: float
    after: float


def _run_proxy(plan: FLPlan, cfg: FLTaskConfig, data) -> _ProxyOutcome:
    w0 = ModelParams.zeros(plan.device_part.model_dim)
    out = execute_plan(plan, w0, data)
    loss = _op_loss(canonical_op(plan.version, plan.entry("eval")))
    before = evaluate(w0, data, loss).loss
    if isinstance(out, ModelUpdate):
        w1 = ModelParams(w0.weights + out.delta / max(out.weight, 1))
        after = evaluate(w1, data, loss).loss
    else:
        after = before
    return _ProxyOutcome(out, before, after)


def _check_predicate(pred, outcome: _ProxyOutcome) -> tuple[bool, str]:
    params = dict(pred) if not isinstance(pred, str) else {"name": pred}
    name = params["name"]
    out = outcome.output
    if name == "finite_update":
        vals = out.delta if isinstance(out, ModelUpdate) else np.array([out.loss])
        return bool(np.all(np.isfinite(vals))), "update is finite"
    if name == "loss_decreases":
        if not isinstance(out, ModelUpdate):
            return True, "loss_decreases skipped for evaluation plans"
        return outcome.after < outcome.before, f"proxy loss {outcome.before:.6g} -> {outcome.after:.6g}"
    if name == "max_loss":
        threshold = float(params.get("threshold", 1.0))
        return outcome.after <= threshold, f"proxy loss {outcome.after:.6g} <= {threshold:g}"
    return False, f"unknown predicate {name}"


PREDICATES = ("finite_update", "loss_decreases", "max_loss")


def _outputs_equal(a, b) -> bool:
    if isinstance(a, ModelUpdate) and isinstance(b, ModelUpdate):
        return a.weight == b.weight and np.array_equal(a.delta, b.delta)
    if isinstance(a, EvalResult) and isinstance(b, EvalResult):
        return a == b
    return False


def run_deployment_gate(
    cfg: FLTaskConfig,
    plan: FLPlan,
    simulated_resources: SimulatedResources = SimulatedResources(),
) -> DeploymentGateReport:
    details: list[str] = []
    review = bool(cfg.code_reviewed)
    if not review:
        details.append("code review attestation missing")
    data = proxy_dataset(cfg, simulated_resources)

    def predicates_hold(p: FLPlan, label: str) -> tuple[bool, Optional[_ProxyOutcome]]:
        try:
            outcome = _run_proxy(p, cfg, data)
        except Exception as exc:  # gate reports failures instead of raising
            details.append(f"{label}: proxy run failed: {exc}")
            return False, None
        ok = True
        for pred in cfg.test_predicates:
            passed, msg = _check_predicate(pred, outcome)
            if not passed:
                ok = False
                details.append(f"{label}: predicate failed: {msg}")
        return ok, outcome

    preds_ok, base = predicates_hold(plan, f"v{plan.version}")

    usage = measure_usage(plan, simulated_resources)
    lim = cfg.resource_limits
    res_ok = True
    if usage.memory_bytes > lim.max_memory_bytes:
        res_ok = False
        details.append(f"memory proxy {usage.memory_bytes} B exceeds {lim.max_memory_bytes} B")
    if usage.compute_ms > lim.max_compute_ms:
        res_ok = False
        details.append(f"compute proxy {usage.compute_ms:g} ms exceeds {lim.max_compute_ms} ms")
    if usage.examples > lim.max_examples:
        res_ok = False
        details.append(f"example count {usage.examples} exceeds {lim.max_examples}")

    versions_ok = True
    for v in cfg.required_runtime_versions:
        try:
            vp = derive_versioned_plan(plan, v)
        except IncompatibleVersion as exc:
            versions_ok = False
            details.append(f"v{v}: {exc}")
            continue
        ok, outcome = predicates_hold(vp, f"v{v}")
        if not ok:
            versions_ok = False
        elif base is not None and not _outputs_equal(outcome.output, base.output):
            versions_ok = False
            details.append(f"v{v}: output differs from v{plan.version}")
    return DeploymentGateReport(review, preds_ok, res_ok, versions_ok, details, usage)


# -- task registry ------------------------------------------------------------

@dataclass
class DeployedTask:
    config: FLTaskConfig
    plans: dict  # runtime version -> FLPlan
    plan_bytes: dict  # runtime version -> serialized plan

    @property
    def name(self) -> str:
        return self.config.task_name

    def plan_for(self, runtime_version: int) -> Optional[int]:
        """Newest plan version a device on ``runtime_version`` can execute."""
        usable = [v for v in self.plans if v <= runtime_version]
        return max(usable) if usable else None


class TaskRegistry:
    """Gate-accepted tasks per population, served in round-robin order."""

    def __init__(self):
        self._tasks: dict[str, list[DeployedTask]] = {}
        self._cursor: dict[str, int] = {}

    def deploy(self, cfg: FLTaskConfig, report: DeploymentGateReport, plan: Optional[FLPlan] = None) -> DeployedTask:
        if not report.accepted:
            raise GateRejected(f"task {cfg.task_name!r} did not pass the deployment gate")
        plan = plan or generate_plan(cfg)
        plans = {v: derive_versioned_plan(plan, v) for v in cfg.required_runtime_versions}
        task = DeployedTask(cfg, plans, {v: plan_to_bytes(p) for v, p in plans.items()})
        tasks = self._tasks.setdefault(cfg.population_name, [])
        if any(t.name == cfg.task_name for t in tasks):
            raise PlanError(f"task {cfg.task_name!r} already deployed in {cfg.population_name!r}")
        tasks.append(task)
        return task

    def tasks(self, population: str) -> list[DeployedTask]:
        return list(self._tasks.get(population, []))

    def populations(self) -> list[str]:
        return sorted(self._tasks)

    def next_task(self, population: str) -> Optional[DeployedTask]:
        tasks = self._tasks.get(population)
        if not tasks:
            return None
        i = self._cursor.get(population, 0)
        self._cursor[population] = (i + 1) % len(tasks)
        return tasks[i % len(tasks)]


def deploy_all(cfgs: Iterable[FLTaskConfig], resources: SimulatedResources = SimulatedResources()):
    """Gate every config; returns the registry and the per-task reports."""
    registry = TaskRegistry()
    reports = {}
    for cfg in cfgs:
        plan = generate_plan(cfg)
        report = run_deployment_gate(cfg, plan, resources)
        reports[(cfg.population_name, cfg.task_name)] = report
        if report.accepted:
            registry.deploy(cfg, report, plan)
    return registry, reports


def product_configs(base: FLTaskConfig, **axes: Sequence) -> list[FLTaskConfig]:
    """Cartesian product over hyperparameter axes (``eta``, ``epochs``, ``batch_size``)."""
    keys = sorted(axes)
    out = []
    for i, combo in enumerate(itertools.product(*(axes[k] for k in keys))):
        out.append(replace(base, task_name=f"{base.task_name}.{i}", hyper=replace(base.hyper, **dict(zip(keys, combo)))))
    return out
