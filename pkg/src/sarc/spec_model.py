"""Specification data model: parsing, validation lints, canonical serialization.

A specification is the four-component contract an agent runs under: the
state it may read, the actions it may take, the reward it optimizes, and
the constraints the runtime enforces.  Constraints are first-class: each
one declares source, class, predicate, verification site, response, and
an operating point, and the validator lints the machine-checkable
invariants (completeness of those fields, class/layer compatibility, and
no-bypass over a supplied dispatch graph).

The exchange format is YAML with the field names of the reference
document shipped in ``sarc/data``; JSON parses as an alternate encoding
of the same tree.  Unknown fields are preserved opaquely so future
versions of the format still round-trip.
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Optional, Sequence

import yaml

from .predicate import PredicateExpr, parse_predicate, to_source, _DURATION_UNIT_S

__all__ = [
    "SPEC_VERSION",
    "SourceKind",
    "ConstraintClass",
    "VerificationSite",
    "ResponseKind",
    "OperatingPointKind",
    "OperatingPoint",
    "TimeoutSpec",
    "ResponseSpec",
    "ConstraintDef",
    "RetrievalSource",
    "MemoryKind",
    "StateSpec",
    "ToolParam",
    "ToolSignature",
    "ActionSpaceSpec",
    "RewardComponent",
    "RewardKind",
    "RewardSpec",
    "OperatorGroupSpec",
    "Specification",
    "LintFinding",
    "SpecError",
    "SpecParseError",
    "COMPATIBLE_SITES",
    "SOURCE_SEVERITY",
    "parse_spec",
    "validate_spec",
    "serialize_spec",
    "guard_tools",
    "spec_from_tree",
    "spec_to_tree",
    "parse_duration",
    "format_duration",
    "reference_spec_text",
    "load_reference_spec",
]

SPEC_VERSION = "sarc-0.1"


class SpecError(Exception):
    """Base class for specification errors."""


class SpecParseError(SpecError):
    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{message}" + (f" (at {path})" if path else ""))


class SourceKind(enum.Enum):
    REGULATORY = "regulatory"
    CONTRACTUAL = "contractual"
    ETHICAL = "ethical"  # accepted for quintuple fidelity; unused by fixtures
    OPERATIONAL = "operational"


# Severity order for escalation precedence; unnamed kinds sort last.
SOURCE_SEVERITY = {
    SourceKind.REGULATORY: 0,
    SourceKind.CONTRACTUAL: 1,
    SourceKind.OPERATIONAL: 2,
    SourceKind.ETHICAL: 3,
}


class ConstraintClass(enum.Enum):
    HARD = "hard"              # never-violate; admissibility decided pre-dispatch
    SOFT = "soft"              # cost-bearing; evaluated over completed actions
    ESCALATION = "escalation"  # human hand-off with bounded reversibility window


class VerificationSite(enum.Enum):
    PAG = "PAG"
    ATM = "ATM"
    PAA = "PAA"
    TOOL_LAYER = "tool_layer"
    POLICY_LAYER = "policy_layer"
    PROMPT_LAYER = "prompt_layer"


# Canonical class/site compatibility. Hard constraints need a site that can
# refuse execution; soft constraints need partial or completed action data;
# escalations fire predictively at PAG or reactively at PAA. The prompt
# layer enforces nothing and is compatible with no class.
COMPATIBLE_SITES = {
    ConstraintClass.HARD: frozenset(
        {VerificationSite.PAG, VerificationSite.ATM,
         VerificationSite.TOOL_LAYER, VerificationSite.POLICY_LAYER}
    ),
    ConstraintClass.SOFT: frozenset(
        {VerificationSite.ATM, VerificationSite.PAA,
         VerificationSite.TOOL_LAYER, VerificationSite.POLICY_LAYER}
    ),
    ConstraintClass.ESCALATION: frozenset(
        {VerificationSite.PAG, VerificationSite.PAA}
    ),
}


class ResponseKind(enum.Enum):
    BLOCK = "block"
    ABORT = "abort"
    LOG = "log"
    THROTTLE = "throttle"
    SUSPEND_AND_ROUTE = "suspend_and_route"


class OperatingPointKind(enum.Enum):
    EXACT_PREDICATE = "exact_predicate"
    DETERMINISTIC_THRESHOLD = "deterministic_threshold"
    THRESHOLD = "threshold"


@dataclass(frozen=True)
class OperatingPoint:
    kind: OperatingPointKind
    theta: Optional[float] = None
    fp_tolerance: float = 0.0
    fn_tolerance: float = 0.0
    extra: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        for name, tol in (("false_positive", self.fp_tolerance),
                          ("false_negative", self.fn_tolerance)):
            if not 0.0 <= tol <= 1.0:
                raise SpecParseError(f"{name} tolerance {tol} outside [0, 1]")
        if self.kind is OperatingPointKind.EXACT_PREDICATE and (
            self.fp_tolerance != 0.0 or self.fn_tolerance != 0.0
        ):
            raise SpecParseError("exact_predicate requires zero tolerances")


@dataclass(frozen=True)
class TimeoutSpec:
    reversibility_window_s: float
    on_timeout: str = "deny"
    extra: Mapping[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class ResponseSpec:
    kind: ResponseKind
    router_group: Optional[str] = None
    backoff_formula: Optional[str] = None
    backoff_unit: Optional[str] = None
    extra: Mapping[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class ConstraintDef:
    id: str
    source_kind: SourceKind
    source_reference: str
    constraint_class: ConstraintClass
    pred: PredicateExpr
    verif: VerificationSite
    resp: ResponseSpec
    operating_point: Optional[OperatingPoint]
    timeout: Optional[TimeoutSpec] = None
    authority_binding: frozenset = frozenset()
    trace_fields: tuple = ()
    cost_weight: float = 1.0
    verif_tool: Optional[str] = None
    latency_budget_ms: Optional[float] = None
    pred_lang: str = "spel-mini"
    extra: Mapping[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class RetrievalSource:
    source: str
    freshness_max_s: float
    extra: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.freshness_max_s <= 0:
            raise SpecParseError(f"freshness for {self.source} must be positive")


class MemoryKind(enum.Enum):
    STATELESS = "stateless"
    EPISODIC = "episodic"
    PERSISTENT = "persistent"


@dataclass(frozen=True)
class StateSpec:
    modalities: tuple
    retrieval_sources: tuple = ()
    memory_kind: MemoryKind = MemoryKind.STATELESS
    freshness_default_s: float = 300.0
    extra: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.freshness_default_s <= 0:
            raise SpecParseError("freshness_default must be positive")


@dataclass(frozen=True)
class ToolParam:
    name: str
    semantic_type: str  # money-eur | text-id | record


@dataclass(frozen=True)
class ToolSignature:
    name: str
    params: tuple
    returns: str
    enforcement_hooks: frozenset = frozenset()
    extra: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        names = [p.name for p in self.params]
        if len(names) != len(set(names)):
            raise SpecParseError(f"duplicate parameter names on tool {self.name}")


@dataclass(frozen=True)
class ActionSpaceSpec:
    tools: tuple
    max_plan_length: int
    cost_model: Mapping[str, Mapping[str, str]] = field(default_factory=dict)
    extra: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        names = [t.name for t in self.tools]
        if len(names) != len(set(names)):
            raise SpecParseError("tool names must be unique")
        if self.max_plan_length < 1:
            raise SpecParseError("max_plan_length must be >= 1")

    def tool(self, name: str) -> ToolSignature:
        for t in self.tools:
            if t.name == name:
                return t
        raise KeyError(name)


class RewardKind(enum.Enum):
    SCALARIZATION = "scalarization"
    LEXICOGRAPHIC = "lexicographic"


@dataclass(frozen=True)
class RewardComponent:
    name: str
    weight: float


@dataclass(frozen=True)
class RewardSpec:
    kind: RewardKind
    components: tuple
    horizon: str = ""
    fp_cost: float = 0.0
    fn_cost: float = 0.0
    goodhart_note: Mapping[str, object] = field(default_factory=dict)
    extra: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind is RewardKind.SCALARIZATION:
            total = sum(c.weight for c in self.components)
            if abs(total - 1.0) > 1e-9:
                raise SpecParseError(f"scalarization weights sum to {total}, not 1")


@dataclass(frozen=True)
class OperatorGroupSpec:
    name: str
    server_count: int
    mean_service_s: float
    hours: str = ""
    extra: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.server_count < 1:
            raise SpecParseError(f"group {self.name}: server count must be >= 1")
        if self.mean_service_s <= 0:
            raise SpecParseError(f"group {self.name}: mean service must be positive")


@dataclass(frozen=True)
class Specification:
    spec_version: str
    agent_name: str
    state_spec: StateSpec
    action_space: ActionSpaceSpec
    reward_spec: RewardSpec
    constraints: tuple
    router_groups: Mapping[str, OperatorGroupSpec] = field(default_factory=dict)
    audit_schema_version: str = "sarc-trace-0.1"
    extra: Mapping[str, object] = field(default_factory=dict)

    def constraint(self, constraint_id: str) -> ConstraintDef:
        for c in self.constraints:
            if c.id == constraint_id:
                return c
        raise KeyError(constraint_id)

    def by_class(self, cls: ConstraintClass) -> tuple:
        return tuple(c for c in self.constraints if c.constraint_class is cls)


@dataclass(frozen=True)
class LintFinding:
    lint: str  # I2-completeness | I6-layer-class | I7-no-bypass | escalation-timeout | router-capacity
    detail: str
    constraint_id: Optional[str] = None
    tool: Optional[str] = None


# ---------------------------------------------------------------------------
# Durations
# ---------------------------------------------------------------------------


def parse_duration(value: object, where: str = "") -> float:
    """'60s' / '5m' / '24h' / '90d' or a bare number of seconds."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, str) and value and value[-1] in _DURATION_UNIT_S:
        body = value[:-1]
        try:
            return float(body) * _DURATION_UNIT_S[value[-1]]
        except ValueError:
            pass
    raise SpecParseError(f"cannot read duration {value!r}", where)


def format_duration(seconds: float) -> str:
    s = int(seconds)
    if s == seconds and s > 0:
        for unit in ("d", "h", "m", "s"):
            size = _DURATION_UNIT_S[unit]
            if s % size == 0:
                return f"{s // size}{unit}"
    return f"{seconds}s"


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _take(mapping: dict, *keys):
    """Pop known keys; whatever remains becomes the node's opaque extra."""
    return tuple(mapping.pop(k, None) for k in keys)


def _require(value, path: str):
    if value is None:
        raise SpecParseError("missing required field", path)
    return value


def _enum(cls, value, path: str):
    try:
        return cls(value)
    except ValueError:
        allowed = ", ".join(e.value for e in cls)
        raise SpecParseError(f"unknown value {value!r}, expected one of: {allowed}", path)


def reference_spec_text(name: str = "procurement_approver") -> str:
    """Source text of a specification document shipped with the package."""
    return (resources.files("sarc") / "data" / f"{name}.yaml").read_text("utf-8")


def load_reference_spec(name: str = "procurement_approver") -> Specification:
    return parse_spec(reference_spec_text(name))


def parse_spec(document: str) -> Specification:
    """Parse a YAML (or JSON) specification document.

    Errors carry the field path of the offending node. Unknown fields at
    any level are preserved and survive a serialize/parse round trip.
    """
    try:
        tree = yaml.safe_load(io.StringIO(document))
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "document"
        raise SpecParseError(f"document is not well-formed YAML ({where})")
    if not isinstance(tree, dict):
        raise SpecParseError("document root must be a mapping")
    return spec_from_tree(tree)


def spec_from_tree(tree: Mapping[str, object]) -> Specification:
    tree = dict(tree)
    version, agent, state, action_space, reward = _take(
        tree, "spec_version", "agent", "state", "action_space", "reward"
    )
    constraints_node, router_node, audit_node = _take(
        tree, "constraints", "escalation_router", "audit_emission"
    )
    if _require(version, "spec_version") != SPEC_VERSION:
        raise SpecParseError(
            f"unsupported spec_version {version!r}, expected {SPEC_VERSION!r}",
            "spec_version",
        )
    constraints = tuple(
        _parse_constraint(node, f"constraints[{i}]")
        for i, node in enumerate(constraints_node or [])
    )
    ids = [c.id for c in constraints]
    dupes = {i for i in ids if ids.count(i) > 1}
    if dupes:
        raise SpecParseError(f"duplicate constraint ids: {sorted(dupes)}", "constraints")
    action = _parse_action_space(_require(action_space, "action_space"), constraints)
    audit_node = dict(audit_node or {})
    schema_version = audit_node.pop("schema_version", "sarc-trace-0.1")
    if audit_node:
        tree["audit_emission"] = audit_node  # keep unconsumed audit fields opaque
    return Specification(
        spec_version=version,
        agent_name=_require(agent, "agent"),
        state_spec=_parse_state(_require(state, "state")),
        action_space=action,
        reward_spec=_parse_reward(_require(reward, "reward")),
        constraints=constraints,
        router_groups=_parse_router(router_node),
        audit_schema_version=schema_version,
        extra=tree,
    )


def _parse_state(node) -> StateSpec:
    node = dict(node)
    modalities, retrieval, memory, freshness = _take(
        node, "modalities", "retrieval", "memory", "freshness_default"
    )
    sources = []
    for r in retrieval or []:
        r = dict(r)
        sources.append(RetrievalSource(
            source=_require(r.pop("source", None), "state.retrieval.source"),
            freshness_max_s=parse_duration(
                _require(r.pop("freshness_max", None), "state.retrieval.freshness_max"),
                "state.retrieval.freshness_max",
            ),
            extra=r,
        ))
    return StateSpec(
        modalities=tuple(modalities or []),
        retrieval_sources=tuple(sources),
        memory_kind=_enum(MemoryKind, memory or "stateless", "state.memory"),
        freshness_default_s=parse_duration(freshness or 300, "state.freshness_default"),
        extra=node,
    )


_SEMANTIC_TYPES = {"EUR": "money-eur", "str": "text-id"}


def _semantic_type(name: str) -> str:
    if name in _SEMANTIC_TYPES:
        return _SEMANTIC_TYPES[name]
    if name.endswith("_id"):
        return "text-id"
    return "record"


def _parse_signature(text: str, path: str):
    # "(amount: EUR, supplier_id: str) -> po_id"
    try:
        params_part, returns = text.split("->")
        params_part = params_part.strip()
        assert params_part.startswith("(") and params_part.endswith(")")
        inner = params_part[1:-1].strip()
        params = []
        if inner:
            for piece in inner.split(","):
                pname, ptype = (p.strip() for p in piece.split(":"))
                params.append(ToolParam(pname, _semantic_type(ptype)))
        return tuple(params), _semantic_type(returns.strip())
    except (ValueError, AssertionError):
        raise SpecParseError(f"cannot read tool signature {text!r}", path)


def _parse_action_space(node, constraints) -> ActionSpaceSpec:
    node = dict(node)
    tools_node, max_plan, cost_model = _take(node, "tools", "max_plan_length", "cost_model")
    tools = []
    for i, t in enumerate(tools_node or []):
        t = dict(t)
        name = _require(t.pop("name", None), f"action_space.tools[{i}].name")
        sig = _require(t.pop("signature", None), f"action_space.tools[{i}].signature")
        params, returns = _parse_signature(sig, f"action_space.tools[{i}].signature")
        hooks = frozenset(
            c.id
            for c in constraints
            if c.verif in (VerificationSite.TOOL_LAYER, VerificationSite.POLICY_LAYER)
            and c.verif_tool == name
        )
        tools.append(
            ToolSignature(name=name, params=params, returns=returns,
                          enforcement_hooks=hooks, extra=t)
        )
    return ActionSpaceSpec(
        tools=tuple(tools),
        max_plan_length=int(_require(max_plan, "action_space.max_plan_length")),
        cost_model=cost_model or {},
        extra=node,
    )


def _parse_reward(node) -> RewardSpec:
    node = dict(node)
    kind, components, horizon, asymmetry, goodhart = _take(
        node, "type", "components", "horizon", "asymmetry", "goodhart_check"
    )
    asymmetry = dict(asymmetry or {})
    fp_cost = float(asymmetry.pop("false_positive_cost", 0.0))
    fn_cost = float(asymmetry.pop("false_negative_cost", 0.0))
    if asymmetry:
        node["_asymmetry_extra"] = asymmetry
    return RewardSpec(
        kind=_enum(RewardKind, _require(kind, "reward.type"), "reward.type"),
        components=tuple(
            RewardComponent(c["name"], float(c["weight"])) for c in components or []
        ),
        horizon=str(horizon or ""),
        fp_cost=fp_cost,
        fn_cost=fn_cost,
        goodhart_note=dict(goodhart or {}),
        extra=node,
    )


def _parse_constraint(node, path: str) -> ConstraintDef:
    node = dict(node)
    cid = _require(node.pop("id", None), f"{path}.id")
    path = f"constraint {cid!r}"
    source = dict(_require(node.pop("source", None), f"{path}.source"))
    cls = _enum(ConstraintClass, _require(node.pop("class", None), f"{path}.class"),
                f"{path}.class")
    pred_node = dict(_require(node.pop("predicate", None), f"{path}.predicate"))
    expr_text = _require(pred_node.pop("expr", None), f"{path}.predicate.expr")
    pred = parse_predicate(expr_text)
    op_node = _require(node.pop("operating_point", None), f"{path}.operating_point")
    op_node = dict(op_node)
    op = OperatingPoint(
        kind=_enum(OperatingPointKind,
                   _require(op_node.pop("type", None), f"{path}.operating_point.type"),
                   f"{path}.operating_point.type"),
        theta=op_node.pop("theta", None),
        fp_tolerance=float(op_node.pop("false_positive_tolerance", 0.0)),
        fn_tolerance=float(op_node.pop("false_negative_tolerance", 0.0)),
        extra=op_node,
    )
    verif_node = dict(_require(node.pop("verification", None), f"{path}.verification"))
    site = _enum(VerificationSite,
                 _require(verif_node.pop("point", None), f"{path}.verification.point"),
                 f"{path}.verification.point")
    verif_tool = verif_node.pop("tool", None)
    latency_budget = verif_node.pop("latency_budget_ms", None)
    resp_node = dict(_require(node.pop("response", None), f"{path}.response"))
    backoff = dict(resp_node.pop("backoff", None) or {})
    backoff_formula = backoff.pop("formula", None)
    backoff_unit = backoff.pop("unit", None)
    if backoff:
        resp_node["_backoff_extra"] = backoff
    resp = ResponseSpec(
        kind=_enum(ResponseKind,
                   _require(resp_node.pop("type", None), f"{path}.response.type"),
                   f"{path}.response.type"),
        router_group=resp_node.pop("router_group", None),
        backoff_formula=backoff_formula,
        backoff_unit=backoff_unit,
        extra=resp_node,
    )
    timeout_node = node.pop("timeout", None)
    timeout = None
    if timeout_node is not None:
        timeout_node = dict(timeout_node)
        timeout = TimeoutSpec(
            reversibility_window_s=parse_duration(
                _require(timeout_node.pop("reversibility_window_s", None),
                         f"{path}.timeout.reversibility_window_s"),
                f"{path}.timeout",
            ),
            on_timeout=str(timeout_node.pop("on_timeout", "deny")),
            extra=timeout_node,
        )
    return ConstraintDef(
        id=cid,
        source_kind=_enum(SourceKind, _require(source.pop("type", None),
                                               f"{path}.source.type"),
                          f"{path}.source.type"),
        source_reference=str(source.pop("reference", "")),
        constraint_class=cls,
        pred=pred,
        verif=site,
        resp=resp,
        operating_point=op,
        timeout=timeout,
        authority_binding=frozenset(node.pop("authority_binding", []) or []),
        trace_fields=tuple(node.pop("trace_fields", []) or []),
        cost_weight=float(node.pop("cost_weight", 1.0)),
        verif_tool=verif_tool,
        latency_budget_ms=latency_budget,
        pred_lang=str(pred_node.pop("lang", "spel-mini")),
        extra={**node, **({"_predicate_extra": pred_node} if pred_node else {}),
               **({"_verification_extra": verif_node} if verif_node else {}),
               **({"_source_extra": source} if source else {})},
    )


def _parse_router(node) -> dict:
    groups = {}
    for name, g in dict(node or {}).get("groups", {}).items():
        g = dict(g)
        capacity = dict(g.pop("capacity_model", None) or {})
        server_count = int(capacity.pop("c", 0))
        mean_service_s = float(capacity.pop("mean_service_s", 0.0))
        capacity.pop("type", None)
        if capacity:
            g["_capacity_extra"] = capacity
        groups[name] = OperatorGroupSpec(
            name=name,
            server_count=server_count,
            mean_service_s=mean_service_s,
            hours=str(g.pop("hours", "")),
            extra=g,
        )
    return groups


# ---------------------------------------------------------------------------
# Validation lints
# ---------------------------------------------------------------------------


def guard_tools(pred: PredicateExpr):
    """Tool names a predicate is syntactically guarded on, or None if guardless.

    A guard is a top-level conjunct of the form ``action.tool == '<name>'``
    (or ``tool(action) == '<name>'``); a disjunction of such equalities
    guards on the union. Predicates without a tool guard apply to every
    action.
    """
    from .predicate import Binary, Call, Literal, Path

    def tool_equality(node):
        if not (isinstance(node, Binary) and node.op == "=="):
            return None
        sides = (node.left, node.right)
        name = None
        has_tool_ref = False
        for side in sides:
            if isinstance(side, Path) and side.dotted == "action.tool":
                has_tool_ref = True
            elif isinstance(side, Call) and side.name == "tool":
                has_tool_ref = True
            elif isinstance(side, Literal) and isinstance(side.value, str):
                name = side.value
        return name if has_tool_ref and name is not None else None

    def conjuncts(node):
        if isinstance(node, Binary) and node.op == "&&":
            yield from conjuncts(node.left)
            yield from conjuncts(node.right)
        else:
            yield node

    def disjunct_guard(node):
        if isinstance(node, Binary) and node.op == "||":
            left = disjunct_guard(node.left)
            right = disjunct_guard(node.right)
            if left is not None and right is not None:
                return left | right
            return None
        name = tool_equality(node)
        return {name} if name is not None else None

    for conjunct in conjuncts(pred.root):
        guard = disjunct_guard(conjunct)
        if guard is not None:
            return frozenset(guard)
    return None


def validate_spec(spec: Specification, dispatch_graph: Mapping[str, Sequence]) -> list:
    """Run the static lints; findings are data, never exceptions.

    dispatch_graph maps tool name to the set of enforcement sites a call
    to that tool traverses; it is supplied by the harness because bypass
    freedom is a property of the wiring, not of the specification alone.
    """
    findings = []
    declared_groups = set(spec.router_groups)
    for c in spec.constraints:
        if c.operating_point is None:
            findings.append(LintFinding(
                "I2-completeness", "constraint lacks an operating point",
                constraint_id=c.id))
        if c.constraint_class is ConstraintClass.HARD and \
                c.verif is VerificationSite.PROMPT_LAYER:
            findings.append(LintFinding(
                "I6-layer-class",
                "hard constraint hosted only at the prompt layer enforces nothing",
                constraint_id=c.id))
        if c.constraint_class is ConstraintClass.ESCALATION:
            if c.timeout is None or c.timeout.on_timeout != "deny":
                findings.append(LintFinding(
                    "escalation-timeout",
                    "escalation constraints need a reversibility window and "
                    "on_timeout: deny",
                    constraint_id=c.id))
        if c.resp.kind is ResponseKind.SUSPEND_AND_ROUTE:
            group = c.resp.router_group
            if group is None or group not in declared_groups:
                findings.append(LintFinding(
                    "router-capacity",
                    f"routed group {group!r} has no declared capacity",
                    constraint_id=c.id))
    normalized_graph = {
        tool: frozenset(
            s if isinstance(s, VerificationSite) else VerificationSite(s)
            for s in sites
        )
        for tool, sites in dispatch_graph.items()
    }
    for tool, sites in sorted(normalized_graph.items()):
        for c in spec.constraints:
            guard = guard_tools(c.pred)
            if guard is not None and tool not in guard:
                continue
            if not sites & COMPATIBLE_SITES[c.constraint_class]:
                findings.append(LintFinding(
                    "I7-no-bypass",
                    f"tool {tool!r} traverses no site compatible with "
                    f"{c.constraint_class.value} constraint {c.id!r}",
                    constraint_id=c.id, tool=tool))
    return findings


# ---------------------------------------------------------------------------
# Canonical serialization
# ---------------------------------------------------------------------------


def serialize_spec(spec: Specification) -> str:
    """Canonical, byte-stable YAML: sorted keys, normalized predicates."""
    return yaml.safe_dump(spec_to_tree(spec), sort_keys=True,
                          default_flow_style=False, allow_unicode=True)


def spec_to_tree(spec: Specification) -> dict:
    tree = dict(spec.extra)
    tree["spec_version"] = spec.spec_version
    tree["agent"] = spec.agent_name
    state = dict(spec.state_spec.extra)
    state["modalities"] = list(spec.state_spec.modalities)
    if spec.state_spec.retrieval_sources:
        state["retrieval"] = [
            {**r.extra, "source": r.source,
             "freshness_max": format_duration(r.freshness_max_s)}
            for r in spec.state_spec.retrieval_sources
        ]
    state["memory"] = spec.state_spec.memory_kind.value
    state["freshness_default"] = format_duration(spec.state_spec.freshness_default_s)
    tree["state"] = state

    action = dict(spec.action_space.extra)
    action["tools"] = [
        {**t.extra, "name": t.name, "signature": _format_signature(t)}
        for t in spec.action_space.tools
    ]
    action["max_plan_length"] = spec.action_space.max_plan_length
    if spec.action_space.cost_model:
        action["cost_model"] = {k: dict(v) for k, v in spec.action_space.cost_model.items()}
    tree["action_space"] = action

    reward = dict(spec.reward_spec.extra)
    asymmetry_extra = reward.pop("_asymmetry_extra", {})
    reward["type"] = spec.reward_spec.kind.value
    reward["components"] = [
        {"name": c.name, "weight": c.weight} for c in spec.reward_spec.components
    ]
    if spec.reward_spec.horizon:
        reward["horizon"] = spec.reward_spec.horizon
    reward["asymmetry"] = {
        **asymmetry_extra,
        "false_positive_cost": spec.reward_spec.fp_cost,
        "false_negative_cost": spec.reward_spec.fn_cost,
    }
    if spec.reward_spec.goodhart_note:
        reward["goodhart_check"] = dict(spec.reward_spec.goodhart_note)
    tree["reward"] = reward

    tree["constraints"] = [_constraint_to_tree(c) for c in spec.constraints]

    if spec.router_groups:
        groups = {}
        for name, g in sorted(spec.router_groups.items()):
            g_extra = dict(g.extra)
            capacity_extra = g_extra.pop("_capacity_extra", {})
            groups[name] = {
                **g_extra,
                "capacity_model": {
                    **capacity_extra, "type": "mmc", "c": g.server_count,
                    "mean_service_s": g.mean_service_s,
                },
                **({"hours": g.hours} if g.hours else {}),
            }
        tree["escalation_router"] = {"groups": groups}
    audit = dict(tree.pop("audit_emission", {}) or {})
    audit["schema_version"] = spec.audit_schema_version
    tree["audit_emission"] = audit
    return tree


def _format_signature(t: ToolSignature) -> str:
    reverse = {"money-eur": "EUR", "text-id": "str"}
    params = ", ".join(f"{p.name}: {reverse.get(p.semantic_type, p.semantic_type)}"
                       for p in t.params)
    ret = {"money-eur": "EUR"}.get(t.returns, t.returns)
    if t.returns == "text-id":
        ret = "str"
    return f"({params}) -> {ret}"


def _constraint_to_tree(c: ConstraintDef) -> dict:
    node = {
        k: v for k, v in c.extra.items()
        if k not in ("_predicate_extra", "_verification_extra", "_source_extra")
    }
    node["id"] = c.id
    node["source"] = {
        **c.extra.get("_source_extra", {}),
        "type": c.source_kind.value,
        "reference": c.source_reference,
    }
    node["class"] = c.constraint_class.value
    node["predicate"] = {
        **c.extra.get("_predicate_extra", {}),
        "lang": c.pred_lang,
        "expr": to_source(c.pred),
    }
    if c.operating_point is not None:
        op = dict(c.operating_point.extra)
        op["type"] = c.operating_point.kind.value
        if c.operating_point.theta is not None:
            op["theta"] = c.operating_point.theta
        op["false_positive_tolerance"] = c.operating_point.fp_tolerance
        op["false_negative_tolerance"] = c.operating_point.fn_tolerance
        node["operating_point"] = op
    verification = {**c.extra.get("_verification_extra", {}), "point": c.verif.value}
    if c.latency_budget_ms is not None:
        verification["latency_budget_ms"] = c.latency_budget_ms
    if c.verif_tool is not None:
        verification["tool"] = c.verif_tool
    node["verification"] = verification
    resp_extra = dict(c.resp.extra)
    backoff_extra = resp_extra.pop("_backoff_extra", {})
    response = {**resp_extra, "type": c.resp.kind.value}
    if c.resp.router_group is not None:
        response["router_group"] = c.resp.router_group
    if c.resp.backoff_formula is not None or backoff_extra:
        backoff = dict(backoff_extra)
        if c.resp.backoff_formula is not None:
            backoff["formula"] = c.resp.backoff_formula
        if c.resp.backoff_unit is not None:
            backoff["unit"] = c.resp.backoff_unit
        response["backoff"] = backoff
    node["response"] = response
    if c.timeout is not None:
        node["timeout"] = {
            **c.timeout.extra,
            "reversibility_window_s": int(c.timeout.reversibility_window_s)
            if c.timeout.reversibility_window_s == int(c.timeout.reversibility_window_s)
            else c.timeout.reversibility_window_s,
            "on_timeout": c.timeout.on_timeout,
        }
    if c.authority_binding:
        node["authority_binding"] = sorted(c.authority_binding)
    if c.trace_fields:
        node["trace_fields"] = list(c.trace_fields)
    if c.cost_weight != 1.0:
        node["cost_weight"] = c.cost_weight
    return node
