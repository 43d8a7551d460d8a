"""Governed dispatch across agent boundaries.

A workflow is an orchestrator that hands sub-tasks to worker agents, each
running its own governed loop.  Crossing an agent boundary is where
single-agent guarantees usually leak, so this module pins down the four
spots where they must not:

* constraints declared upstream propagate to workers where their state
  allows, and are rescued at the deepest layer that can still decide them
  when it does not;
* every dispatch executes under the intersection of authorities along the
  principal chain, which can narrow but never widen;
* state imported from outside the trust boundary passes a gateway before
  it may touch a worker's state slice;
* the trace is a tree whose leaves are the workers' own records, kept
  verbatim rather than summarized.

Each defense can be switched off individually so that the failure mode it
prevents can be demonstrated, not just asserted.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Optional, Sequence

import yaml

from .engine import (
    Action,
    AgentState,
    Clock,
    ConstraintEvent,
    FaultModel,
    LatencyModel,
    ScriptedPlanner,
    ToolRegistry,
    TraceRecord,
    evaluate_constraint,
    event_from_json_dict,
    event_to_json_dict,
    record_from_json_dict,
    record_to_json_dict,
    run_episode,
)
from .predicate import EvalContext, PredicateExpr, eval_predicate, free_paths, parse_predicate
from .spec_model import (
    SOURCE_SEVERITY,
    ConstraintClass,
    ConstraintDef,
    ResponseKind,
    SpecParseError,
    Specification,
    spec_from_tree,
    validate_spec,
)

try:
    from importlib import resources
except ImportError:  # pragma: no cover
    import importlib_resources as resources  # type: ignore

__all__ = [
    "AuthoritySet", "AuthorityEmpty", "authority_permits",
    "Principal", "PrincipalChain", "chain_authority",
    "CompositionRule", "compose_authority",
    "AttributionTuple", "attribution_to_json_dict",
    "attribution_from_json_dict",
    "TraceTree", "tree_to_json_dict", "tree_from_json_dict",
    "write_trace_tree", "read_trace_tree",
    "state_paths", "rescue_layer",
    "ComposedConstraints", "compose_constraints",
    "TrustTag", "ImportedState", "GatewayConfig", "GatewayDecision",
    "sanitize_text", "gateway_check",
    "WorkerSpecInvalid", "Defenses", "Worker", "Dispatch", "orchestrate",
    "WorkflowBundle", "workflow_from_tree", "load_workflow",
    "reference_workflow_text", "reference_workflow", "REFERENCE_WORKFLOWS",
]


# ---------------------------------------------------------------------------
# Authority algebra
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AuthoritySet:
    """A set of capability identifiers, e.g. ``erp.create_po:<=100000``.

    Capabilities are opaque strings; intersection and union are exact
    string-set algebra. The optional ``:<=BOUND`` suffix is interpreted
    only by `authority_permits`, never by the set operations.
    """

    capabilities: frozenset = frozenset()

    @classmethod
    def of(cls, *capabilities: str) -> "AuthoritySet":
        return cls(frozenset(capabilities))

    def __and__(self, other: "AuthoritySet") -> "AuthoritySet":
        return AuthoritySet(self.capabilities & other.capabilities)

    def __or__(self, other: "AuthoritySet") -> "AuthoritySet":
        return AuthoritySet(self.capabilities | other.capabilities)

    def __contains__(self, capability: str) -> bool:
        return capability in self.capabilities

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self.capabilities))

    def __len__(self) -> int:
        return len(self.capabilities)

    def __bool__(self) -> bool:
        return bool(self.capabilities)

    def issubset(self, other: "AuthoritySet") -> bool:
        return self.capabilities <= other.capabilities

    def as_list(self) -> list:
        return sorted(self.capabilities)


def authority_permits(auth: AuthoritySet, tool: str, args: Optional[Mapping] = None) -> bool:
    """Whether `auth` covers a call to `tool` with `args`.

    A bare capability covers the tool outright; a bounded capability
    ``tool:<=N`` covers calls whose ``amount`` argument stays at or
    below N.
    """
    if tool in auth.capabilities:
        return True
    prefix = f"{tool}:<="
    for capability in auth.capabilities:
        if capability.startswith(prefix):
            try:
                bound = float(capability[len(prefix):])
            except ValueError:
                continue
            amount = (args or {}).get("amount", 0.0)
            if isinstance(amount, (int, float)) and float(amount) <= bound:
                return True
    return False


@dataclass(frozen=True)
class Principal:
    id: str
    role: str
    authority: AuthoritySet


@dataclass(frozen=True)
class PrincipalChain:
    """Ordered call chain [p0, p1, ..., pk]; p0 is the originating principal."""

    entries: tuple

    def __post_init__(self):
        if not self.entries:
            raise ValueError("a principal chain needs at least its originating principal")

    @property
    def origin(self) -> Principal:
        return self.entries[0]

    @property
    def depth(self) -> int:
        return len(self.entries) - 1

    def extended(self, principal: Principal) -> "PrincipalChain":
        return PrincipalChain(self.entries + (principal,))

    def ids(self) -> tuple:
        return tuple(p.id for p in self.entries)


def chain_authority(chain: PrincipalChain) -> AuthoritySet:
    """Running intersection along the chain; monotone non-increasing."""
    auth = chain.entries[0].authority
    for principal in chain.entries[1:]:
        auth = auth & principal.authority
    return auth


@dataclass(frozen=True)
class CompositionRule:
    """How multiple principals' authorities combine for one action class.

    all_of intersects every relevant principal (each holds a veto);
    any_of unions the principals matching the qualifying predicate.
    Silent any_of is unsafe, so the predicate is mandatory there.
    """

    kind: str = "all_of"
    qualifying_predicate: Optional[PredicateExpr] = None

    def __post_init__(self):
        if self.kind not in ("all_of", "any_of"):
            raise ValueError(f"unknown composition rule {self.kind!r}")
        if self.kind == "any_of" and self.qualifying_predicate is None:
            raise ValueError("any_of composition requires a qualifying-principal predicate")


def _qualifies(principal: Principal, predicate: PredicateExpr) -> bool:
    ctx = EvalContext(
        state_fields={"principal.id": principal.id, "principal.role": principal.role},
        action_tool=None, action_args={}, clock_now=0.0,
        rolling_window_oracle=None)
    return eval_predicate(predicate, ctx).fired


def compose_authority(action_class: str, principals: Sequence[Principal],
                      rule: CompositionRule) -> AuthoritySet:
    """Principal-level authority for one action class.

    all_of intersects every principal's authority; any_of unions the
    qualifying principals and yields the empty set when none qualify
    (the downstream empty-intersection check then refuses the dispatch).
    """
    if not principals:
        raise ValueError(f"action class {action_class!r} dispatched with no principals")
    if rule.kind == "all_of":
        auth = principals[0].authority
        for principal in principals[1:]:
            auth = auth & principal.authority
        return auth
    qualifying = [p for p in principals if _qualifies(p, rule.qualifying_predicate)]
    auth = AuthoritySet()
    for principal in qualifying:
        auth = auth | principal.authority
    return auth


# ---------------------------------------------------------------------------
# Attribution and the trace tree
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttributionTuple:
    """Who asked, who planned, who executed, with what authority.

    `evaluated` carries the constraint events attached to the dispatch
    itself (rescues, gateway rulings, deferred post-checks); per-action
    events live on the leaf records.
    """

    chain: PrincipalChain
    planner_id: str
    executor_id: str
    tool: str
    auth: AuthoritySet
    evaluated: tuple = ()


def attribution_to_json_dict(attr: AttributionTuple, *, include_events: bool = True) -> dict:
    out = {
        "chain": [{"id": p.id, "role": p.role, "authority": p.authority.as_list()}
                  for p in attr.chain.entries],
        "planner": attr.planner_id,
        "executor": attr.executor_id,
        "tool": attr.tool,
        "auth": attr.auth.as_list(),
    }
    if include_events:
        out["evaluated"] = [event_to_json_dict(e) for e in attr.evaluated]
    return out


def attribution_from_json_dict(data: Mapping) -> AttributionTuple:
    chain = PrincipalChain(tuple(
        Principal(p["id"], p["role"], AuthoritySet.of(*p.get("authority", [])))
        for p in data["chain"]))
    return AttributionTuple(
        chain=chain, planner_id=data["planner"], executor_id=data["executor"],
        tool=data["tool"], auth=AuthoritySet.of(*data.get("auth", [])),
        evaluated=tuple(event_from_json_dict(e) for e in data.get("evaluated", [])))


@dataclass(frozen=True)
class TraceTree:
    """Dispatch node with the worker's own records attached verbatim.

    Children are nested dispatches (a worker acting as orchestrator);
    they hang off this node, never off the root, so recursion depth is
    visible in the tree shape.
    """

    sub_task: str
    worker_id: str
    attribution: AttributionTuple
    records: tuple = ()
    children: tuple = ()
    refused: tuple = ()  # (tool, args, reason) triples screened pre-dispatch
    summary: Optional[str] = None
    outcome: str = "completed"

    def walk(self) -> Iterator["TraceTree"]:
        yield self
        for child in self.children:
            yield from child.walk()

    def flatten_records(self) -> Iterator[TraceRecord]:
        """Leaf records in dispatch order."""
        for node in self.walk():
            yield from node.records

    def leaves(self) -> Iterator["TraceTree"]:
        for node in self.walk():
            if not node.children:
                yield node


def tree_to_json_dict(tree: TraceTree) -> dict:
    out = {
        "sub_task": tree.sub_task,
        "worker_id": tree.worker_id,
        "attribution": attribution_to_json_dict(tree.attribution),
        "outcome": tree.outcome,
        "records": [record_to_json_dict(r) for r in tree.records],
        "children": [tree_to_json_dict(c) for c in tree.children],
    }
    if tree.refused:
        out["refused"] = [{"tool": t, "args": dict(a), "reason": r}
                          for t, a, r in tree.refused]
    if tree.summary is not None:
        out["summary"] = tree.summary
    return out


def tree_from_json_dict(data: Mapping) -> TraceTree:
    return TraceTree(
        sub_task=data["sub_task"],
        worker_id=data["worker_id"],
        attribution=attribution_from_json_dict(data["attribution"]),
        records=tuple(record_from_json_dict(r) for r in data.get("records", [])),
        children=tuple(tree_from_json_dict(c) for c in data.get("children", [])),
        refused=tuple((r["tool"], r["args"], r["reason"])
                      for r in data.get("refused", [])),
        summary=data.get("summary"),
        outcome=data.get("outcome", "completed"))


def write_trace_tree(tree: TraceTree, fp) -> None:
    fp.write(json.dumps(tree_to_json_dict(tree), sort_keys=True, indent=2))
    fp.write("\n")


def read_trace_tree(fp) -> TraceTree:
    return tree_from_json_dict(json.load(fp))


# ---------------------------------------------------------------------------
# Decidability rescue
# ---------------------------------------------------------------------------


def state_paths(pred: PredicateExpr) -> frozenset:
    """State fields a predicate needs; action/chunk paths are always in hand."""
    return frozenset(p for p in free_paths(pred)
                     if p.split(".", 1)[0] not in ("action", "chunk"))


def rescue_layer(constraint: ConstraintDef, declare_layer: int, reach_layer: int,
                 available_paths_per_layer) -> int:
    """Deepest layer in [declare, reach] whose state covers the predicate.

    Falls back to the declaration layer, which is decidable by
    construction (the orchestrator-layer rescue).
    """
    if reach_layer < declare_layer:
        raise ValueError("reach layer precedes declaration layer")
    needed = state_paths(constraint.pred)
    best = declare_layer
    for layer in range(declare_layer, reach_layer + 1):
        if needed <= frozenset(available_paths_per_layer[layer]):
            best = layer
    return best


# ---------------------------------------------------------------------------
# Constraint-set composition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComposedConstraints:
    constraints: tuple
    merged_soft: Mapping[str, tuple]  # source_reference -> (kept_id, *dropped_ids)
    escalation_order: tuple


def compose_constraints(sets: Iterable[Sequence[ConstraintDef]]) -> ComposedConstraints:
    """Union of per-agent constraint sets with the cross-agent merge rules.

    Hard constraints are all retained (an action must pass every one);
    soft constraints citing the same source keep only the maximum cost
    weight so a shared obligation is not double-counted; escalations are
    ordered by source severity with ties broken lexicographically on the
    source reference.
    """
    by_id: dict = {}
    for constraint_set in sets:
        for c in constraint_set:
            by_id.setdefault(c.id, c)

    hard = sorted((c for c in by_id.values()
                   if c.constraint_class is ConstraintClass.HARD), key=lambda c: c.id)
    escalation = sorted(
        (c for c in by_id.values() if c.constraint_class is ConstraintClass.ESCALATION),
        key=lambda c: (SOURCE_SEVERITY[c.source_kind], c.source_reference, c.id))

    soft_by_source: dict = {}
    for c in sorted((c for c in by_id.values()
                     if c.constraint_class is ConstraintClass.SOFT), key=lambda c: c.id):
        soft_by_source.setdefault(c.source_reference, []).append(c)
    soft, merged = [], {}
    for source, group in sorted(soft_by_source.items()):
        kept = max(group, key=lambda c: (c.cost_weight, c.id))
        soft.append(kept)
        if len(group) > 1:
            merged[source] = (kept.id,) + tuple(c.id for c in group if c is not kept)

    return ComposedConstraints(
        constraints=tuple(hard) + tuple(soft) + tuple(escalation),
        merged_soft=merged,
        escalation_order=tuple(c.id for c in escalation))


# ---------------------------------------------------------------------------
# Trust-boundary gateway
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrustTag:
    """Provenance attached to every value imported across the boundary."""

    source: str
    authentication_context: str
    classification: str
    inside_boundary: bool


@dataclass(frozen=True)
class ImportedState:
    path: str
    value: object
    tag: Optional[TrustTag] = None


@dataclass(frozen=True)
class GatewayConfig:
    """Response wiring for imports that fail the trust predicate.

    High-stakes usage maps the failure to a hard discard or an
    escalation; low-stakes usage may sanitize or admit-and-log.
    """

    constraint_id: str
    trust_pred: PredicateExpr
    high_stakes_class: ConstraintClass = ConstraintClass.ESCALATION
    low_stakes_rule: str = "sanitize"

    def __post_init__(self):
        if self.high_stakes_class not in (ConstraintClass.HARD, ConstraintClass.ESCALATION):
            raise ValueError("high-stakes imports map to a hard or escalation response")
        if self.low_stakes_rule not in ("sanitize", "admit"):
            raise ValueError(f"unknown low-stakes rule {self.low_stakes_rule!r}")


@dataclass(frozen=True)
class GatewayDecision:
    outcome: str  # admit | sanitize | escalate | discard
    value: object
    event: ConstraintEvent
    transformation: Optional[str] = None

    @property
    def admitted(self) -> bool:
        return self.outcome in ("admit", "sanitize")


_INSTRUCTION_MARKERS = ("ignore ", "disregard ", "override ", "you must ",
                        "system:", "assistant:", "new instruction")


def sanitize_text(text: str) -> tuple:
    """Strip instruction-like lines; returns (clean_text, lines_removed)."""
    kept, removed = [], 0
    for line in text.splitlines():
        if line.strip().lower().startswith(_INSTRUCTION_MARKERS):
            removed += 1
        else:
            kept.append(line)
    return "\n".join(kept), removed


def gateway_check(imported: ImportedState, trust_pred: PredicateExpr,
                  action_stakes: str, *,
                  high_stakes_class: ConstraintClass = ConstraintClass.ESCALATION,
                  low_stakes_rule: str = "sanitize",
                  constraint_id: str = "trust_boundary") -> GatewayDecision:
    """Admit, sanitize, escalate, or discard one boundary-crossing value.

    The trust predicate sees the tag as ``import.*`` fields; an
    undecidable predicate counts as failing. Untagged imports are an
    invariant breach, not a policy decision.
    """
    if action_stakes not in ("low", "high"):
        raise ValueError(f"unknown stakes {action_stakes!r}")
    if imported.tag is None:
        raise ValueError(
            f"import of {imported.path!r} carries no trust tag; "
            "every boundary crossing must be tagged")
    tag = imported.tag
    ctx = EvalContext(
        state_fields={
            "import.source": tag.source,
            "import.authentication_context": tag.authentication_context,
            "import.classification": tag.classification,
            "import.inside_boundary": tag.inside_boundary,
        },
        action_tool=None, action_args={}, clock_now=0.0,
        rolling_window_oracle=None)
    trusted = eval_predicate(trust_pred, ctx).fired
    detail = {"path": imported.path, "source": tag.source, "stakes": action_stakes}

    if trusted:
        event = ConstraintEvent(constraint_id, "PAA", "not_fired", "none", detail=detail)
        return GatewayDecision("admit", imported.value, event)

    if action_stakes == "high":
        outcome = ("discard" if high_stakes_class is ConstraintClass.HARD
                   else "escalate")
        event = ConstraintEvent(constraint_id, "PAA", "fired", outcome, detail=detail)
        return GatewayDecision(outcome, None, event)

    if low_stakes_rule == "sanitize" and isinstance(imported.value, str):
        clean, removed = sanitize_text(imported.value)
        transformation = f"stripped {removed} instruction-like line(s)"
        event = ConstraintEvent(constraint_id, "PAA", "fired", "sanitize",
                                detail={**detail, "transformation": transformation})
        return GatewayDecision("sanitize", clean, event, transformation)
    if low_stakes_rule == "sanitize":
        # nothing to transform on a non-text value; failing closed beats guessing
        event = ConstraintEvent(constraint_id, "PAA", "fired", "discard", detail=detail)
        return GatewayDecision("discard", None, event)
    event = ConstraintEvent(constraint_id, "PAA", "fired", "log", detail=detail)
    return GatewayDecision("admit", imported.value, event)


# ---------------------------------------------------------------------------
# The orchestrator loop
# ---------------------------------------------------------------------------


class AuthorityEmpty(RuntimeError):
    """Authority degradation to empty: the workflow refuses to proceed."""

    def __init__(self, sub_task: str, worker: str, chain: PrincipalChain):
        super().__init__(
            f"dispatch of {sub_task!r} to {worker!r} has empty intersected "
            f"authority along chain {list(chain.ids())}")
        self.sub_task = sub_task
        self.worker = worker
        self.chain = chain


class WorkerSpecInvalid(ValueError):
    def __init__(self, worker: str, findings: Sequence):
        lints = ", ".join(sorted({f.lint for f in findings}))
        super().__init__(f"worker {worker!r} specification fails lints: {lints}")
        self.worker = worker
        self.findings = tuple(findings)


@dataclass(frozen=True)
class Defenses:
    """Cross-agent defense toggles; all on in any real deployment.

    Each switch exists so the failure mode it prevents can be
    demonstrated against the same fixture that proves the defense.
    """

    propagate_constraints: bool = True
    intersect_authority: bool = True
    gateway: bool = True
    preserve_attribution: bool = True

    @classmethod
    def all_off(cls) -> "Defenses":
        return cls(False, False, False, False)


@dataclass(frozen=True)
class Worker:
    """A dispatchable agent: its spec, standing authority, and state slice."""

    spec: Specification
    authority: AuthoritySet
    state_fields: Mapping[str, object] = field(default_factory=dict)
    role: str = "agent"
    registry: Optional[ToolRegistry] = None


@dataclass(frozen=True)
class Dispatch:
    """One planned hand-off: either a scripted leaf or a nested plan."""

    sub_task: str
    worker: str
    actions: tuple = ()
    nested: tuple = ()
    action_class: str = "default"
    rule: CompositionRule = CompositionRule()
    principals: tuple = ()  # defaults to the chain's originating principal
    stakes: str = "low"
    imports: tuple = ()


def _decidable(constraint: ConstraintDef, fields: Mapping) -> bool:
    return state_paths(constraint.pred) <= frozenset(fields)


def _ctx(fields: Mapping, action: Optional[Action], now: float,
         oracles: Mapping[str, Callable]) -> EvalContext:
    return EvalContext(
        state_fields=fields,
        action_tool=action.tool if action else None,
        action_args=action.args if action else None,
        clock_now=now,
        rolling_window_oracle=oracles.get("rolling_24h_spend"))


def orchestrate(workflow: Specification, workers: Mapping[str, Worker],
                plan: Sequence[Dispatch], *, chain: PrincipalChain,
                orchestrator_state: Optional[Mapping] = None,
                defenses: Defenses = Defenses(),
                gateway: Optional[GatewayConfig] = None,
                faults: Optional[FaultModel] = None,
                clock: Optional[Clock] = None,
                ruling_policy="approve_all",
                oracles: Mapping[str, Callable] = {},
                latency: LatencyModel = LatencyModel.zero()) -> TraceTree:
    """Run a workflow and return its attribution-preserving trace tree.

    Workflow constraints propagate into each worker's effective spec
    where the worker's state slice can decide them; hard and escalation
    constraints that the slice cannot decide are evaluated before
    dispatch at the deepest deciding layer, and soft ones are deferred
    to a post-worker check here. Every dispatch runs under
    principal-composition ∩ chain ∩ worker authority and aborts the
    workflow when that intersection is empty.
    """
    clock = clock or Clock()
    faults = faults or FaultModel.none()
    root_attr = AttributionTuple(
        chain=chain, planner_id="orch", executor_id="orch", tool="none",
        auth=chain_authority(chain), evaluated=())
    layers = [dict(orchestrator_state or {})]
    children = tuple(
        _dispatch(d, workflow.constraints, workers, chain, workflow.agent_name,
                  layers, defenses, gateway, faults, clock, ruling_policy,
                  oracles, latency)
        for d in plan)
    return TraceTree(sub_task="workflow", worker_id=workflow.agent_name,
                     attribution=root_attr, children=children)


def _rescue_events(constraints: Sequence[ConstraintDef], actions: Sequence[Action],
                   layers: Sequence[Mapping], now: float,
                   oracles: Mapping) -> tuple:
    """Pre-dispatch evaluation of non-propagatable hard/escalation constraints.

    Each constraint is evaluated at the deepest layer whose fields cover
    its predicate; a firing one vetoes the actions it fired against.
    """
    events, vetoed = [], []
    for c in constraints:
        layer = 0
        for k, fields in enumerate(layers):
            if _decidable(c, fields):
                layer = k
        fields = layers[layer]
        probes = list(actions) or [None]
        for action in probes:
            outcome, detail = evaluate_constraint(c, _ctx(fields, action, now, oracles))
            detail = {**detail, "rescued": "orchestration", "rescue_layer": layer}
            if outcome == "fired":
                events.append(ConstraintEvent(
                    c.id, "PAG", "fired", c.resp.kind.value, detail=detail))
                if action is not None and c.resp.kind in (ResponseKind.BLOCK,
                                                          ResponseKind.ABORT,
                                                          ResponseKind.SUSPEND_AND_ROUTE):
                    # no reviewer sits at the pre-dispatch rescue; default-deny
                    vetoed.append((action, f"constraint {c.id} fired at rescue"))
            else:
                events.append(ConstraintEvent(
                    c.id, "PAG", "undecidable_rescued(orchestration)", "none",
                    detail=detail))
    return tuple(events), tuple(vetoed)


def _dispatch(d: Dispatch, workflow_constraints: tuple,
              workers: Mapping[str, Worker], chain: PrincipalChain,
              dispatcher_id: str, layers: list, defenses: Defenses,
              gateway: Optional[GatewayConfig], faults: FaultModel,
              clock: Clock, ruling_policy, oracles: Mapping,
              latency: LatencyModel) -> TraceTree:
    if d.worker not in workers:
        raise LookupError(
            f"no worker {d.worker!r}; declared workers: {sorted(workers)}")
    worker = workers[d.worker]
    findings = validate_spec(worker.spec, {})
    if findings:
        raise WorkerSpecInvalid(d.worker, findings)

    node_events: list = []
    refused: list = []
    state_fields = dict(worker.state_fields)

    for imported in d.imports:
        if defenses.gateway and gateway is not None:
            decision = gateway_check(
                imported, gateway.trust_pred, d.stakes,
                high_stakes_class=gateway.high_stakes_class,
                low_stakes_rule=gateway.low_stakes_rule,
                constraint_id=gateway.constraint_id)
            node_events.append(decision.event)
            if decision.admitted:
                state_fields[imported.path] = decision.value
        else:
            # boundary open: the import lands unchecked
            state_fields[imported.path] = imported.value

    worker_ids = {c.id for c in worker.spec.constraints}
    effective_spec = worker.spec
    deferred_soft: list = []
    vetoed: tuple = ()
    if defenses.propagate_constraints:
        inherited = tuple(
            c for c in workflow_constraints
            if c.id not in worker_ids and _decidable(c, state_fields))
        if inherited:
            effective_spec = dataclasses.replace(
                worker.spec,
                constraints=worker.spec.constraints + inherited)
        undecidable = [c for c in workflow_constraints
                       if c.id not in worker_ids and not _decidable(c, state_fields)]
        rescue = [c for c in undecidable
                  if c.constraint_class is not ConstraintClass.SOFT]
        deferred_soft = [c for c in undecidable
                         if c.constraint_class is ConstraintClass.SOFT]
        events, vetoed = _rescue_events(rescue, d.actions, layers, clock.now(), oracles)
        node_events.extend(events)

    principals = d.principals or (chain.origin,)
    principal_auth = compose_authority(d.action_class, principals, d.rule)
    worker_principal = Principal(d.worker, worker.role, worker.authority)
    if defenses.intersect_authority:
        auth_w = principal_auth & chain_authority(chain) & worker.authority
        if not auth_w:
            raise AuthorityEmpty(d.sub_task, d.worker, chain)
    else:
        # attack surface: the worker runs on its own local credentials
        auth_w = worker.authority
    new_chain = chain.extended(worker_principal)

    vetoed_actions = {id(a) for a, _ in vetoed}
    refused.extend((a.tool, a.args, reason) for a, reason in vetoed)
    permitted = []
    for action in d.actions:
        if id(action) in vetoed_actions:
            continue
        if authority_permits(auth_w, action.tool, action.args):
            permitted.append(action)
        else:
            refused.append((action.tool, action.args, "outside intersected authority"))

    records: tuple = ()
    summary = None
    outcome = "completed"
    children: tuple = ()
    if d.nested:
        inner = compose_constraints([workflow_constraints, worker.spec.constraints])
        children = tuple(
            _dispatch(nd, inner.constraints, workers, new_chain, d.worker,
                      layers + [state_fields], defenses, gateway, faults,
                      clock, ruling_policy, oracles, latency)
            for nd in d.nested)
    if permitted:
        registry = worker.registry or ToolRegistry.with_defaults(effective_spec)
        attribution = attribution_to_json_dict(
            AttributionTuple(new_chain, dispatcher_id, d.worker, "none", auth_w),
            include_events=False)
        result = run_episode(
            effective_spec, ScriptedPlanner(permitted), registry,
            len(permitted) + 2, attribution, faults=faults, clock=clock,
            ruling_policy=ruling_policy, latency=latency, oracles=oracles,
            initial_state=AgentState(state_fields))
        outcome = result.outcome
        if defenses.preserve_attribution:
            records = tuple(result.records)
        else:
            # attack surface: the fold summarizes instead of preserving
            summary = (f"{d.worker} completed {len(result.records)} action(s) "
                       f"for {d.sub_task!r}")
        if defenses.propagate_constraints and deferred_soft:
            post_fields = {**layers[0], **result.final_state.fields}
            for c in deferred_soft:
                soft_outcome, detail = evaluate_constraint(
                    c, _ctx(post_fields, None, clock.now(), oracles))
                node_events.append(ConstraintEvent(
                    c.id, "PAA", soft_outcome,
                    c.resp.kind.value if soft_outcome == "fired" else "none",
                    detail={**detail, "deferred": True}))

    attr = AttributionTuple(new_chain, dispatcher_id, d.worker, "none",
                            auth_w, tuple(node_events))
    return TraceTree(sub_task=d.sub_task, worker_id=d.worker, attribution=attr,
                     records=records, children=children,
                     refused=tuple(refused), summary=summary, outcome=outcome)


# ---------------------------------------------------------------------------
# Workflow documents
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorkflowBundle:
    """A parsed workflow document, ready to run."""

    name: str
    description: str
    workflow: Specification  # constraints already composed across agents
    chain: PrincipalChain
    principals: Mapping[str, Principal]
    workers: Mapping[str, Worker]
    plan: tuple
    defenses: Defenses
    gateway: Optional[GatewayConfig]
    orchestrator_state: Mapping[str, object]

    def run(self, *, defenses: Optional[Defenses] = None,
            clock: Optional[Clock] = None,
            faults: Optional[FaultModel] = None,
            oracles: Mapping[str, Callable] = {},
            ruling_policy="approve_all") -> TraceTree:
        return orchestrate(
            self.workflow, self.workers, self.plan, chain=self.chain,
            orchestrator_state=self.orchestrator_state,
            defenses=self.defenses if defenses is None else defenses,
            gateway=self.gateway, faults=faults, clock=clock,
            ruling_policy=ruling_policy, oracles=oracles)


def _parse_principal(name: str, node: Mapping) -> Principal:
    return Principal(
        id=node.get("id", name),
        role=node.get("role", "principal"),
        authority=AuthoritySet.of(*node.get("authority", [])))


def _parse_dispatch(node: Mapping, principals: Mapping[str, Principal],
                    where: str) -> Dispatch:
    node = dict(node)
    rule_node = node.pop("rule", "all_of")
    if isinstance(rule_node, str):
        if rule_node == "any_of":
            raise SpecParseError(
                "any_of composition needs its qualifying predicate spelled out",
                where)
        rule = CompositionRule(rule_node)
    else:
        rule = CompositionRule(
            rule_node.get("kind", "all_of"),
            parse_predicate(rule_node["qualifying_predicate"])
            if "qualifying_predicate" in rule_node else None)
    names = node.pop("principals", [])
    try:
        who = tuple(principals[n] for n in names)
    except KeyError as exc:
        raise SpecParseError(f"undeclared principal {exc.args[0]!r}", where)
    imports = []
    for i in node.pop("imports", []):
        tag = None
        if "tag" in i:
            tag_node = i["tag"]
            if "source" not in tag_node or "inside_boundary" not in tag_node:
                raise SpecParseError(
                    "a trust tag names its source and says whether it is "
                    "inside the boundary", where)
            tag = TrustTag(
                source=tag_node["source"],
                authentication_context=tag_node.get("authentication_context", "none"),
                classification=tag_node.get("classification", "unclassified"),
                inside_boundary=bool(tag_node["inside_boundary"]))
        imports.append(ImportedState(path=i["path"], value=i.get("value"), tag=tag))
    imports = tuple(imports)
    return Dispatch(
        sub_task=node.pop("sub_task"),
        worker=node.pop("worker"),
        actions=tuple(Action(a["tool"], a.get("args", {}), i)
                      for i, a in enumerate(node.pop("actions", []))),
        nested=tuple(_parse_dispatch(n, principals, f"{where}.nested")
                     for n in node.pop("nested", [])),
        action_class=node.pop("action_class", "default"),
        rule=rule,
        principals=who,
        stakes=node.pop("stakes", "low"),
        imports=imports)


def workflow_from_tree(tree: Mapping) -> WorkflowBundle:
    tree = dict(tree)
    name = tree.get("workflow", "workflow")
    principals = {n: _parse_principal(n, p)
                  for n, p in tree.get("principals", {}).items()}
    origin_name = tree.get("origin")
    if origin_name not in principals:
        raise SpecParseError(f"origin {origin_name!r} is not a declared principal",
                             "origin")
    defense_node = tree.get("defenses", {})
    defenses = Defenses(
        propagate_constraints=bool(defense_node.get("propagate_constraints", True)),
        intersect_authority=bool(defense_node.get("intersect_authority", True)),
        gateway=bool(defense_node.get("gateway", True)),
        preserve_attribution=bool(defense_node.get("preserve_attribution", True)))

    orch_node = dict(tree.get("orchestrator", {}))
    orch_spec = spec_from_tree(orch_node["spec"])
    workers = {}
    for wname, wnode in tree.get("workers", {}).items():
        workers[wname] = Worker(
            spec=spec_from_tree(wnode["spec"]),
            authority=AuthoritySet.of(*wnode.get("authority", [])),
            state_fields=dict(wnode.get("state", {})),
            role=wnode.get("role", "agent"))

    composed = compose_constraints(
        [orch_spec.constraints] + [w.spec.constraints for w in workers.values()])
    workflow = dataclasses.replace(orch_spec, constraints=composed.constraints)

    gateway = None
    if "gateway" in tree:
        g = tree["gateway"]
        gateway = GatewayConfig(
            constraint_id=g.get("constraint_id", "trust_boundary"),
            trust_pred=parse_predicate(g["trust_pred"]),
            high_stakes_class=ConstraintClass(g.get("high_stakes", "escalation")),
            low_stakes_rule=g.get("low_stakes", "sanitize"))

    plan = tuple(_parse_dispatch(p, principals, f"plan[{i}]")
                 for i, p in enumerate(tree.get("plan", [])))
    return WorkflowBundle(
        name=name,
        description=str(tree.get("description", "")).strip(),
        workflow=workflow,
        chain=PrincipalChain((principals[origin_name],)),
        principals=principals,
        workers=workers,
        plan=plan,
        defenses=defenses,
        gateway=gateway,
        orchestrator_state=dict(orch_node.get("state", {})))


def load_workflow(text: str) -> WorkflowBundle:
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SpecParseError(f"workflow document is not valid YAML: {exc}")
    if not isinstance(tree, Mapping):
        raise SpecParseError("workflow document must be a mapping")
    return workflow_from_tree(tree)


def reference_workflow_text(name: str) -> str:
    path = resources.files("sarc") / "data" / "workflows" / f"{name}.yaml"
    return path.read_text(encoding="utf-8")


def reference_workflow(name: str) -> WorkflowBundle:
    return load_workflow(reference_workflow_text(name))


REFERENCE_WORKFLOWS = ("constraint_laundering", "credential_escalation",
                       "trust_boundary", "attribution_dilution")
