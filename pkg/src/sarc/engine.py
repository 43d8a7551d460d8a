"""The governed agent loop: gate, dispatch, monitor, escalate, trace.

One episode is one plan. Each proposed action passes the pre-action gate
(hard admissibility, then escalation triggers in precedence order), the
wiring assertion for tool- and policy-layer hooks, enforced dispatch
with at-the-model wrapping, and the post-action pass, before a trace
record is appended. Denied, blocked, and aborted attempts emit records
too: governance decisions that leave no trace cannot be audited.

Operator hand-offs go through the escalation router with the declared
reversibility window; a silent operator means the action is denied, and
an operator modification sends the new action back through the gate.
Fault injection (predicate false negatives, skipped enforcement) changes
what the runtime does but never what the trace admits to.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import random
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

from .escalation import (
    EscalationRouter,
    EscalationTicket,
    OperatorPool,
    Ruling,
    RulingKind,
    RulingPolicy,
)
from .predicate import (
    EvalContext,
    EvalOutcome,
    Money,
    eval_predicate,
)
from .spec_model import (
    ConstraintClass,
    ConstraintDef,
    OperatingPointKind,
    ResponseKind,
    SOURCE_SEVERITY,
    Specification,
    VerificationSite,
    guard_tools,
)

__all__ = [
    "TRACE_SCHEMA_VERSION",
    "Action",
    "AgentState",
    "Clock",
    "ConstraintEvent",
    "TraceRecord",
    "EpisodeResult",
    "FaultModel",
    "LatencyModel",
    "ToolResult",
    "ToolRegistry",
    "EnforcementInactive",
    "Planner",
    "ScriptedPlanner",
    "GreedySpendPlanner",
    "PagVerdict",
    "pag_check",
    "dispatch_enforced",
    "paa_check",
    "run_episode",
    "compute_backoff",
    "record_to_json_dict",
    "record_from_json_dict",
    "write_trace_jsonl",
    "read_trace_jsonl",
]

TRACE_SCHEMA_VERSION = "sarc-trace-0.1"

FAULT_PRED_FALSE_NEGATIVE = "predicate_false_negative"
FAULT_ENFORCEMENT_SKIPPED = "enforcement_skipped"


class Clock:
    """Virtual time in seconds; everything that waits advances it."""

    def __init__(self, start: float = 0.0):
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def advance(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("clock cannot run backwards")
        self._now += seconds

    def advance_to(self, t: float) -> None:
        if t > self._now:
            self._now = t


@dataclass(frozen=True)
class Action:
    tool: str
    args: Mapping[str, object]
    plan_index: int = 0

    def with_args(self, **changes) -> "Action":
        return replace(self, args={**self.args, **changes})


class AgentState:
    """Flat mapping of dotted field paths to values, plus step and time."""

    __slots__ = ("fields", "step", "time")

    def __init__(self, fields: Optional[Mapping[str, object]] = None,
                 step: int = 0, time: float = 0.0):
        self.fields = dict(fields or {})
        self.step = step
        self.time = time

    def apply(self, updates: Mapping[str, object], time: float) -> "AgentState":
        merged = dict(self.fields)
        merged.update(updates)
        return AgentState(merged, step=self.step + 1, time=time)

    def advanced(self, time: float) -> "AgentState":
        return AgentState(self.fields, step=self.step + 1, time=time)


@dataclass(frozen=True)
class ConstraintEvent:
    constraint_id: str
    site: str
    outcome: str  # fired | not_fired | undecidable | undecidable_rescued(<site>)
    response_taken: str = "none"
    ruling: Optional[Ruling] = None
    fault: Optional[str] = None
    detail: Mapping[str, object] = field(default_factory=dict)

    @property
    def fired(self) -> bool:
        return self.outcome == "fired"


@dataclass(frozen=True)
class TraceRecord:
    step: int
    time: float
    stage: str  # dispatched | blocked | denied | interrupted | aborted
    action: Action
    pre_state: Mapping[str, object]   # digest + the declared trace fields
    post_state: Mapping[str, object]
    reward: float
    observation: object
    evaluated: tuple
    attribution: Mapping[str, object]
    latency_ms: float

    @property
    def dispatched(self) -> bool:
        return self.stage in ("dispatched", "interrupted")

    def events_for(self, constraint_id: str) -> list:
        return [e for e in self.evaluated if e.constraint_id == constraint_id]


@dataclass(frozen=True)
class EpisodeResult:
    records: tuple
    outcome: str  # completed | aborted
    abort_constraint: Optional[str] = None
    total_reward: float = 0.0
    final_state: Optional[AgentState] = None

    @property
    def aborted(self) -> bool:
        return self.outcome == "aborted"


@dataclass(frozen=True)
class FaultModel:
    """Injected imperfection: predicate misses and skipped enforcement.

    eps_pred suppresses a genuinely fired hard/escalation evaluation
    (a predicate false negative); eps_exec lets a fired block or route
    response fall through unenforced. Both leave an honest, tagged event
    in the trace. Draws come from a dedicated stream so environment
    randomness is unaffected.
    """

    eps_pred: float = 0.0
    eps_exec: float = 0.0
    rng: random.Random = field(default_factory=random.Random, compare=False)

    def __post_init__(self):
        for p in (self.eps_pred, self.eps_exec):
            if not 0.0 <= p <= 1.0:
                raise ValueError("fault probabilities must be in [0, 1]")

    @classmethod
    def none(cls) -> "FaultModel":
        return cls(0.0, 0.0)

    @property
    def active(self) -> bool:
        return self.eps_pred > 0.0 or self.eps_exec > 0.0

    def suppress_predicate(self) -> bool:
        return self.eps_pred > 0.0 and self.rng.random() < self.eps_pred

    def skip_enforcement(self) -> bool:
        return self.eps_exec > 0.0 and self.rng.random() < self.eps_exec


@dataclass(frozen=True)
class LatencyModel:
    """Fixed per-site costs; a step pays only for the sites it traverses."""

    model_ms: float = 0.0
    pag_ms: float = 0.0
    tool_ms: float = 0.0
    atm_ms: float = 0.0
    paa_ms: float = 0.0

    def __post_init__(self):
        if min(self.model_ms, self.pag_ms, self.tool_ms,
               self.atm_ms, self.paa_ms) < 0:
            raise ValueError("latencies must be non-negative")

    @classmethod
    def zero(cls) -> "LatencyModel":
        return cls()

    def step_ms(self, traversed: Iterable[str]) -> float:
        costs = {"model": self.model_ms, "PAG": self.pag_ms,
                 "tool": self.tool_ms, "ATM": self.atm_ms, "PAA": self.paa_ms}
        return sum(costs[site] for site in traversed)


# ---------------------------------------------------------------------------
# Tools
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToolResult:
    updates: Mapping[str, object] = field(default_factory=dict)
    observation: object = None


class EnforcementInactive(RuntimeError):
    """A declared tool/policy hook is not wired in the registry (I1)."""

    def __init__(self, constraint_id: str, action: Action):
        self.constraint_id = constraint_id
        self.action = action
        super().__init__(
            f"constraint {constraint_id!r} must be active for tool "
            f"{action.tool!r} but is not wired in the registry")


@dataclass
class _ToolImpl:
    fn: Callable
    streaming: bool
    hooks: frozenset


class ToolRegistry:
    """Executable tools plus the enforcement hooks wired around them.

    A plain tool fn maps (args, state_fields) to a ToolResult. A
    streaming fn is a generator yielding chunks (optionally (chunk,
    cost) pairs) and returning a ToolResult; the at-the-model wrapper
    sees every chunk and may cut the call short.
    """

    def __init__(self):
        self._tools: dict = {}
        self.policy_hooks: set = set()

    def register(self, name: str, fn: Callable, *, streaming: bool = False,
                 hooks: Iterable[str] = ()) -> None:
        self._tools[name] = _ToolImpl(fn, streaming, frozenset(hooks))

    def wire_policy_hook(self, constraint_id: str) -> None:
        self.policy_hooks.add(constraint_id)

    def tool(self, name: str) -> _ToolImpl:
        if name not in self._tools:
            raise KeyError(f"tool {name!r} is not registered")
        return self._tools[name]

    def wired_for(self, name: str) -> frozenset:
        return self.tool(name).hooks | frozenset(self.policy_hooks)

    @classmethod
    def with_defaults(cls, spec: Specification) -> "ToolRegistry":
        """A registry whose tools record their call and echo an id.

        Enforcement hooks are wired exactly as the specification
        declares them; useful for fixtures and the benchmark harness.
        """
        registry = cls()
        for sig in spec.action_space.tools:
            def fn(args, state, _name=sig.name):
                return ToolResult(
                    updates={f"last_call.{_name}": dict(args)},
                    observation={"tool": _name, "ok": True})
            registry.register(sig.name, fn, hooks=sig.enforcement_hooks)
        return registry


# ---------------------------------------------------------------------------
# Planners
# ---------------------------------------------------------------------------


class Planner:
    """Proposes actions; told what became of each proposal."""

    def propose(self, state: AgentState) -> Optional[Action]:
        raise NotImplementedError

    def feedback(self, action: Action, outcome: str) -> None:
        pass


class ScriptedPlanner(Planner):
    """Replays a fixed list of actions; a resolved action is never retried."""

    def __init__(self, actions: Sequence[Union[Action, Mapping]]):
        self._actions = [
            a if isinstance(a, Action) else Action(a["tool"], dict(a["args"]))
            for a in actions
        ]
        self._cursor = 0

    def propose(self, state: AgentState) -> Optional[Action]:
        if self._cursor >= len(self._actions):
            return None
        return replace(self._actions[self._cursor], plan_index=self._cursor)

    def feedback(self, action: Action, outcome: str) -> None:
        if outcome != "modified":
            self._cursor += 1


class GreedySpendPlanner(Planner):
    """The misaligned proxy: place every order, largest reward is most spend.

    It never self-censors; a denied or blocked order is simply followed
    by the next one. Orders are mappings with at least amount and
    supplier_id; any state_patch entries are folded into the proposal's
    args so the harness can stage per-order context.
    """

    def __init__(self, orders: Sequence[Mapping], tool: str = "erp.create_po"):
        self._orders = list(orders)
        self._tool = tool
        self._cursor = 0

    def propose(self, state: AgentState) -> Optional[Action]:
        if self._cursor >= len(self._orders):
            return None
        order = self._orders[self._cursor]
        args = {"amount": order["amount"], "supplier_id": order["supplier_id"]}
        return Action(self._tool, args, plan_index=self._cursor)

    def feedback(self, action: Action, outcome: str) -> None:
        if outcome != "modified":
            self._cursor += 1


# ---------------------------------------------------------------------------
# Constraint evaluation plumbing
# ---------------------------------------------------------------------------


def _context(state: AgentState, action: Optional[Action], now: float,
             oracles: Mapping[str, Callable]) -> EvalContext:
    return EvalContext(
        state_fields=state.fields,
        action_tool=action.tool if action else None,
        action_args=action.args if action else None,
        clock_now=now,
        rolling_window_oracle=oracles.get("rolling_24h_spend"),
    )


def _applies(constraint: ConstraintDef, action: Action) -> bool:
    guard = guard_tools(constraint.pred)
    return guard is None or action.tool in guard


def _escalation_order(constraints: Iterable[ConstraintDef]) -> list:
    # regulatory before contractual before operational; ids break ties
    return sorted(constraints,
                  key=lambda c: (SOURCE_SEVERITY[c.source_kind], c.id))


def _threshold_basis(constraint: ConstraintDef, ctx: EvalContext):
    """Calibration-basis value for thresholded soft constraints, if any."""
    op = constraint.operating_point
    if op is None or op.kind is not OperatingPointKind.THRESHOLD:
        return None
    basis = op.extra.get("calibration_basis")
    if basis != "rolling_24h_spend" or ctx.rolling_window_oracle is None:
        return None
    actor = ctx.resolve("principal") if "principal" in ctx.available_paths() else None
    value = ctx.rolling_window_oracle(actor)
    return float(value.cents) / 100.0 if isinstance(value, Money) else float(value)


def evaluate_constraint(constraint: ConstraintDef, ctx: EvalContext) -> tuple:
    """(outcome string, detail dict) for one constraint in one context.

    Hard and soft predicates state the condition that must hold, so the
    constraint fires when the predicate is false; escalation predicates
    state the trigger and fire when true. A thresholded soft constraint
    fires from its declared operating point over the calibration basis,
    which sits below the predicate's own cap.
    """
    basis = _threshold_basis(constraint, ctx)
    if basis is not None:
        theta = float(constraint.operating_point.theta)
        if basis >= theta:
            return "fired", {"basis": basis, "overage": basis - theta}
        return "not_fired", {"basis": basis}
    result = eval_predicate(constraint.pred, ctx)
    if result.outcome is EvalOutcome.UNDECIDABLE:
        return "undecidable", {"missing_paths": sorted(result.missing_paths)}
    holds = result.outcome is EvalOutcome.FIRED
    if constraint.constraint_class is ConstraintClass.ESCALATION:
        return ("fired" if holds else "not_fired"), {}
    return ("not_fired" if holds else "fired"), {}


def compute_backoff(formula: str, overage: float) -> float:
    """Evaluate a declared backoff formula over the measured overage.

    Only arithmetic over the name `overage` and the functions exp, log,
    min, and max is accepted; anything else is a specification error.
    """
    import ast

    allowed_funcs = {"exp": math.exp, "log": math.log, "min": min, "max": max}

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id == "overage":
                return float(overage)
            raise ValueError(f"unknown name {node.id!r} in backoff formula")
        if isinstance(node, ast.BinOp):
            ops = {ast.Add: lambda a, b: a + b, ast.Sub: lambda a, b: a - b,
                   ast.Mult: lambda a, b: a * b, ast.Div: lambda a, b: a / b}
            if type(node.op) not in ops:
                raise ValueError("unsupported operator in backoff formula")
            return ops[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            return -ev(node.operand)
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) \
                and node.func.id in allowed_funcs:
            return allowed_funcs[node.func.id](*(ev(a) for a in node.args))
        raise ValueError(f"unsupported expression in backoff formula: {formula!r}")

    return ev(ast.parse(formula, mode="eval"))


# ---------------------------------------------------------------------------
# Pre-action gate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PagVerdict:
    kind: str  # admit | block | escalate
    constraint: Optional[ConstraintDef] = None
    events: tuple = ()
    escalations: tuple = ()  # fired escalation constraints, precedence order


def pag_check(spec: Specification, state: AgentState, action: Action,
              faults: Optional[FaultModel] = None, *,
              oracles: Mapping[str, Callable] = {},
              now: Optional[float] = None) -> PagVerdict:
    """Hard admissibility first, then escalation triggers.

    The first firing hard constraint decides (lowest id when several
    fire at once); an undecidable hard predicate is treated as a block,
    never waved through. Fired escalations are returned for routing in
    precedence order.
    """
    faults = faults or FaultModel.none()
    ctx = _context(state, action, state.time if now is None else now, oracles)
    events = []
    blocking: Optional[ConstraintDef] = None
    hard = sorted(spec.by_class(ConstraintClass.HARD), key=lambda c: c.id)
    for c in hard:
        if c.verif is not VerificationSite.PAG or not _applies(c, action):
            continue
        outcome, detail = evaluate_constraint(c, ctx)
        event, enforced = _faulted_event(c, "PAG", outcome, detail, faults)
        events.append(event)
        if enforced and blocking is None:
            blocking = c
    if blocking is not None:
        return PagVerdict("block", blocking, tuple(events))
    fired = []
    for c in _escalation_order(spec.by_class(ConstraintClass.ESCALATION)):
        if c.verif is not VerificationSite.PAG or not _applies(c, action):
            continue
        outcome, detail = evaluate_constraint(c, ctx)
        if outcome == "undecidable":
            # a trigger that cannot be decided is escalated, not assumed quiet
            outcome = "fired"
            detail = {**detail, "undecidable_trigger": True}
        event, enforced = _faulted_event(c, "PAG", outcome, detail, faults)
        events.append(event)
        if enforced:
            fired.append(c)
    if fired:
        return PagVerdict("escalate", fired[0], tuple(events), tuple(fired))
    return PagVerdict("admit", None, tuple(events))


def _faulted_event(constraint: ConstraintDef, site: str, outcome: str,
                   detail: Mapping, faults: FaultModel) -> tuple:
    """Apply fault draws to one evaluation; returns (event, enforced)."""
    if outcome == "undecidable" and constraint.constraint_class is ConstraintClass.HARD:
        return ConstraintEvent(constraint.id, site, "undecidable",
                               response_taken="block", detail=detail), True
    if outcome != "fired":
        return ConstraintEvent(constraint.id, site, outcome, detail=detail), False
    if faults.suppress_predicate():
        return ConstraintEvent(constraint.id, site, "not_fired",
                               fault=FAULT_PRED_FALSE_NEGATIVE, detail=detail), False
    response = constraint.resp.kind.value
    if constraint.resp.kind in (ResponseKind.BLOCK, ResponseKind.ABORT,
                                ResponseKind.SUSPEND_AND_ROUTE) \
            and faults.skip_enforcement():
        return ConstraintEvent(constraint.id, site, "fired",
                               response_taken="none",
                               fault=FAULT_ENFORCEMENT_SKIPPED, detail=detail), False
    return ConstraintEvent(constraint.id, site, "fired",
                           response_taken=response, detail=detail), True


# ---------------------------------------------------------------------------
# Enforced dispatch
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DispatchResult:
    state: AgentState
    observation: object
    events: tuple
    executed: bool
    interrupted: bool
    blocking: Optional[ConstraintDef] = None


def dispatch_enforced(action: Action, state: AgentState, registry: ToolRegistry,
                      spec: Specification, *,
                      faults: Optional[FaultModel] = None,
                      oracles: Mapping[str, Callable] = {},
                      now: Optional[float] = None) -> DispatchResult:
    """Run the tool inside the active constraint context.

    Before the body executes: every declared tool/policy hook for this
    action must be wired (EnforcementInactive otherwise), and the
    tool- and policy-layer constraints are evaluated with firing hard
    ones refusing execution. During the body: at-the-model constraints
    see each streamed chunk and a firing hard one cuts the call short,
    yielding a partial observation and no state updates.
    """
    faults = faults or FaultModel.none()
    now = state.time if now is None else now
    ctx = _context(state, action, now, oracles)
    events = []

    layer_constraints = [
        c for c in spec.constraints
        if c.verif in (VerificationSite.TOOL_LAYER, VerificationSite.POLICY_LAYER)
        and _applies(c, action)
    ]
    wired = registry.wired_for(action.tool)
    for c in layer_constraints:
        hook_required = (c.verif_tool == action.tool if c.verif_tool is not None
                         else c.verif is VerificationSite.POLICY_LAYER)
        if hook_required and c.id not in wired:
            raise EnforcementInactive(c.id, action)

    blocking = None
    for c in sorted(layer_constraints, key=lambda c: c.id):
        site = (VerificationSite.TOOL_LAYER.value
                if c.verif_tool == action.tool else c.verif.value)
        outcome, detail = evaluate_constraint(c, ctx)
        if c.constraint_class is ConstraintClass.HARD:
            event, enforced = _faulted_event(c, site, outcome, detail, faults)
            events.append(event)
            if enforced and blocking is None:
                blocking = c
        else:
            # soft constraints at these layers observe and log; they never veto
            response = c.resp.kind.value if outcome == "fired" else "none"
            events.append(ConstraintEvent(c.id, site, outcome,
                                          response_taken=response, detail=detail))
    if blocking is not None:
        return DispatchResult(state, None, tuple(events),
                              executed=False, interrupted=False, blocking=blocking)

    atm_constraints = [
        c for c in spec.constraints
        if c.verif is VerificationSite.ATM and _applies(c, action)
    ]

    impl = registry.tool(action.tool)
    if not impl.streaming:
        interrupted_by = None
        for c in atm_constraints:
            outcome, detail = evaluate_constraint(c, ctx)
            if c.constraint_class is ConstraintClass.HARD:
                event, enforced = _faulted_event(c, "ATM", outcome, detail, faults)
                events.append(event)
                if enforced and interrupted_by is None:
                    interrupted_by = c
            else:
                response = c.resp.kind.value if outcome == "fired" else "none"
                events.append(ConstraintEvent(c.id, "ATM", outcome,
                                              response_taken=response, detail=detail))
        if interrupted_by is not None:
            return DispatchResult(state, None, tuple(events), executed=False,
                                  interrupted=False, blocking=interrupted_by)
        result = impl.fn(dict(action.args), dict(state.fields))
        new_state = state.apply(result.updates, time=now)
        return DispatchResult(new_state, result.observation, tuple(events),
                              executed=True, interrupted=False)

    # Streaming path: the wrapper owns the generator and may stop it.
    chunks = []
    cost_total = 0.0
    gen = impl.fn(dict(action.args), dict(state.fields))
    interrupted_by = None
    result = ToolResult()
    while True:
        try:
            item = next(gen)
        except StopIteration as stop:
            if stop.value is not None:
                result = stop.value
            break
        payload, cost = item if isinstance(item, tuple) else (item, 1.0)
        chunks.append(payload)
        cost_total += cost
        chunk_ctx = EvalContext(
            state_fields={**state.fields, "chunk.index": len(chunks),
                          "chunk.cost": cost_total},
            action_tool=action.tool, action_args=action.args,
            clock_now=now, rolling_window_oracle=oracles.get("rolling_24h_spend"))
        for c in atm_constraints:
            outcome, detail = evaluate_constraint(c, chunk_ctx)
            if outcome != "fired":
                continue
            event, enforced = _faulted_event(c, "ATM", outcome, detail, faults)
            events.append(event)
            if enforced:
                interrupted_by = c
                break
        if interrupted_by is not None:
            gen.close()
            break
    if interrupted_by is not None:
        observation = {"chunks": chunks, "interrupted_after": len(chunks)}
        return DispatchResult(state, observation, tuple(events), executed=True,
                              interrupted=True, blocking=interrupted_by)
    for c in atm_constraints:
        # quiet ATM constraints still appear once in the record
        if not any(e.constraint_id == c.id for e in events):
            events.append(ConstraintEvent(c.id, "ATM", "not_fired"))
    observation = result.observation
    if chunks:
        observation = {"chunks": chunks, "result": result.observation}
    new_state = state.apply(result.updates, time=now)
    return DispatchResult(new_state, observation, tuple(events),
                          executed=True, interrupted=False)


# ---------------------------------------------------------------------------
# Post-action pass
# ---------------------------------------------------------------------------


def paa_check(spec: Specification, state: AgentState, post_state: AgentState,
              action: Action, observation: object, *,
              oracles: Mapping[str, Callable] = {},
              now: Optional[float] = None) -> tuple:
    """Evaluate the soft and escalation constraints that watch outcomes.

    Returns (events, delay_s): a throttle response contributes its
    computed backoff, effective before the next loop iteration.
    """
    now = post_state.time if now is None else now
    ctx = _context(post_state, action, now, oracles)
    events = []
    delay_s = 0.0
    watched = [c for c in spec.constraints
               if c.constraint_class in (ConstraintClass.SOFT,
                                         ConstraintClass.ESCALATION)
               and c.verif is VerificationSite.PAA and _applies(c, action)]
    for c in sorted(watched, key=lambda c: c.id):
        outcome, detail = evaluate_constraint(c, ctx)
        response = "none"
        if outcome == "fired":
            response = c.resp.kind.value
            if c.resp.kind is ResponseKind.THROTTLE and c.resp.backoff_formula:
                backoff = compute_backoff(c.resp.backoff_formula,
                                          float(detail.get("overage", 0.0)))
                detail = {**detail, "backoff_s": backoff}
                delay_s += backoff
        events.append(ConstraintEvent(c.id, "PAA", outcome,
                                      response_taken=response, detail=detail))
    return tuple(events), delay_s


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------


def run_episode(spec: Specification, planner: Planner, tools: ToolRegistry,
                horizon: int, attribution_root: Mapping[str, object],
                faults: Optional[FaultModel] = None,
                clock: Optional[Clock] = None, *,
                router: Optional[EscalationRouter] = None,
                ruling_policy: RulingPolicy = "approve_all",
                latency: LatencyModel = LatencyModel.zero(),
                oracles: Mapping[str, Callable] = {},
                reward_fn: Optional[Callable] = None,
                initial_state: Optional[AgentState] = None,
                on_record: Optional[Callable] = None) -> EpisodeResult:
    """One governed plan, at most `horizon` proposals.

    Aborts (a firing hard constraint with an abort response, or an
    escalation timeout) are terminal results carrying the partial trace.
    A denied action is re-planned; a modified one re-enters the gate.
    Every attempt, dispatched or not, appends a record.
    """
    faults = faults or FaultModel.none()
    clock = clock or Clock()
    if router is None:
        router = EscalationRouter(
            OperatorPool.from_group_spec(g) for g in spec.router_groups.values())
    state = initial_state or AgentState(time=clock.now())
    records = []
    total_reward = 0.0

    def emit(stage, action, pre, post, reward, obs, events, extra_sites=()):
        nonlocal total_reward
        sites = {"model"} | set(extra_sites)
        sites.update(_latency_sites(events))
        latency_ms = latency.step_ms(sites)
        clock.advance(latency_ms / 1000.0)
        record = TraceRecord(
            step=len(records), time=clock.now(), stage=stage, action=action,
            pre_state=_digest(pre, events, spec),
            post_state=_digest(post, events, spec),
            reward=reward, observation=obs, evaluated=tuple(events),
            attribution=dict(attribution_root), latency_ms=latency_ms)
        records.append(record)
        total_reward += reward
        if on_record is not None:
            on_record(record)
        return record

    t = 0
    while t < horizon:
        action = planner.propose(state)
        if action is None:
            break
        events = []
        pre = state
        # Pre-action gate; a modify ruling loops back here with the new action.
        pag_rounds = 0
        ruling_events = []
        resolved = None  # set when the gate itself settles the step
        while True:
            pag_rounds += 1
            if pag_rounds > 100:
                raise RuntimeError("modify rulings are not converging")
            verdict = pag_check(spec, state, action, faults,
                                oracles=oracles, now=clock.now())
            events = list(ruling_events) + list(verdict.events)
            if verdict.kind in ("block", "admit"):
                break
            modified = False
            for c in verdict.escalations:
                ticket = EscalationTicket(
                    action=action, constraint_id=c.id,
                    enqueue_time=clock.now(),
                    reversibility_window_s=c.timeout.reversibility_window_s,
                    ruling_policy=ruling_policy)
                ruling = router.route(c.resp.router_group, ticket)
                clock.advance_to(ruling.decided_at)
                events = _attach_ruling(events, c.id, ruling)
                if ruling.kind is RulingKind.TIMEOUT:
                    emit("aborted", action, pre, state, 0.0, None, events)
                    planner.feedback(action, "aborted")
                    return EpisodeResult(tuple(records), "aborted",
                                         abort_constraint=c.id,
                                         total_reward=total_reward,
                                         final_state=state)
                if ruling.kind is RulingKind.DENY:
                    emit("denied", action, pre, state, 0.0, None, events)
                    planner.feedback(action, "denied")
                    resolved = "denied"
                    break
                if ruling.kind is RulingKind.MODIFY:
                    action = ruling.new_action if isinstance(ruling.new_action, Action) \
                        else action.with_args(**dict(ruling.new_action))
                    planner.feedback(action, "modified")
                    modified = True
                    break
            if resolved:
                break
            if modified:
                # keep the pre-modification rulings; re-validate from the top
                ruling_events = [e for e in events if e.ruling is not None]
                continue
            break  # all escalations approved
        if resolved == "denied":
            t += 1
            continue
        if verdict.kind == "block":
            if verdict.constraint.resp.kind is ResponseKind.ABORT:
                emit("aborted", action, pre, state, 0.0, None, events)
                planner.feedback(action, "aborted")
                return EpisodeResult(tuple(records), "aborted",
                                     abort_constraint=verdict.constraint.id,
                                     total_reward=total_reward,
                                     final_state=state)
            emit("blocked", action, pre, state, 0.0, None, events)
            planner.feedback(action, "blocked")
            t += 1
            continue

        dispatch = dispatch_enforced(action, state, tools, spec, faults=faults,
                                     oracles=oracles, now=clock.now())
        events.extend(dispatch.events)
        if dispatch.blocking is not None and not dispatch.interrupted:
            if dispatch.blocking.resp.kind is ResponseKind.ABORT:
                emit("aborted", action, pre, state, 0.0, None, events)
                planner.feedback(action, "aborted")
                return EpisodeResult(tuple(records), "aborted",
                                     abort_constraint=dispatch.blocking.id,
                                     total_reward=total_reward,
                                     final_state=state)
            emit("blocked", action, pre, state, 0.0, None, events)
            planner.feedback(action, "blocked")
            t += 1
            continue
        if dispatch.interrupted:
            emit("interrupted", action, pre, state, 0.0, dispatch.observation,
                 events, extra_sites={"tool", "ATM"})
            planner.feedback(action, "interrupted")
            if dispatch.blocking.resp.kind is ResponseKind.ABORT:
                return EpisodeResult(tuple(records), "aborted",
                                     abort_constraint=dispatch.blocking.id,
                                     total_reward=total_reward,
                                     final_state=state)
            t += 1
            continue

        post = dispatch.state
        paa_events, delay_s = paa_check(spec, state, post, action,
                                        dispatch.observation, oracles=oracles,
                                        now=clock.now())
        events.extend(paa_events)
        reward = reward_fn(state, action, post) if reward_fn else 0.0
        # a completed dispatch always ran under the at-the-model wrapper
        emit("dispatched", action, pre, post, reward, dispatch.observation,
             events, extra_sites={"tool", "ATM"})
        planner.feedback(action, "dispatched")
        if delay_s:
            clock.advance(delay_s)
        state = post.advanced(clock.now())
        t += 1

    return EpisodeResult(tuple(records), "completed", total_reward=total_reward,
                         final_state=state)


def _attach_ruling(events: list, constraint_id: str, ruling: Ruling) -> list:
    out = []
    for e in events:
        if e.constraint_id == constraint_id and e.fired and e.ruling is None:
            out.append(replace(e, ruling=ruling))
        else:
            out.append(e)
    return out


def _latency_sites(events: Iterable[ConstraintEvent]) -> set:
    # tool- and policy-layer checks run on the tool side of the dispatch
    mapping = {"PAG": "PAG", "ATM": "ATM", "PAA": "PAA",
               "tool_layer": "tool", "policy_layer": "tool"}
    return {mapping[e.site] for e in events if e.site in mapping}


def _digest(state: AgentState, events: Iterable[ConstraintEvent],
            spec: Specification) -> Mapping[str, object]:
    """Hash of the full state plus the fields the constraints declare."""
    blob = json.dumps(state.fields, sort_keys=True, default=str).encode()
    wanted = set()
    for e in events:
        try:
            wanted.update(spec.constraint(e.constraint_id).trace_fields)
        except KeyError:
            pass
    fields = {name: state.fields[name] for name in sorted(wanted)
              if name in state.fields}
    return {"digest": hashlib.sha256(blob).hexdigest(), "fields": fields}


# ---------------------------------------------------------------------------
# Trace serialization (JSON lines, one record per line)
# ---------------------------------------------------------------------------


def event_to_json_dict(e: ConstraintEvent) -> dict:
    out = {"constraint_id": e.constraint_id, "site": e.site,
           "outcome": e.outcome, "response_taken": e.response_taken}
    if e.ruling is not None:
        out["ruling"] = {"kind": e.ruling.kind.value,
                         "decided_at": e.ruling.decided_at,
                         "wait_s": e.ruling.wait_s,
                         "group": e.ruling.group}
    if e.fault is not None:
        out["fault"] = e.fault
    if e.detail:
        out["detail"] = dict(e.detail)
    return out


def event_from_json_dict(e: Mapping) -> ConstraintEvent:
    ruling = None
    if "ruling" in e:
        ruling = Ruling(kind=RulingKind(e["ruling"]["kind"]),
                        decided_at=e["ruling"]["decided_at"],
                        wait_s=e["ruling"]["wait_s"],
                        group=e["ruling"].get("group", ""))
    return ConstraintEvent(
        constraint_id=e["constraint_id"], site=e["site"],
        outcome=e["outcome"], response_taken=e.get("response_taken", "none"),
        ruling=ruling, fault=e.get("fault"), detail=e.get("detail", {}))


def record_to_json_dict(record: TraceRecord) -> dict:
    return {
        "schema_version": TRACE_SCHEMA_VERSION,
        "step": record.step,
        "time": record.time,
        "stage": record.stage,
        "action": {"tool": record.action.tool, "args": dict(record.action.args),
                   "plan_index": record.action.plan_index},
        "pre_state": dict(record.pre_state),
        "post_state": dict(record.post_state),
        "reward": record.reward,
        "observation": record.observation,
        "evaluated": [event_to_json_dict(e) for e in record.evaluated],
        "attribution": dict(record.attribution),
        "latency_ms": record.latency_ms,
    }


def record_from_json_dict(data: Mapping) -> TraceRecord:
    action = Action(data["action"]["tool"], data["action"]["args"],
                    data["action"].get("plan_index", 0))
    return TraceRecord(
        step=data["step"], time=data["time"], stage=data["stage"], action=action,
        pre_state=data["pre_state"], post_state=data["post_state"],
        reward=data["reward"], observation=data.get("observation"),
        evaluated=tuple(event_from_json_dict(e) for e in data.get("evaluated", [])),
        attribution=data.get("attribution", {}),
        latency_ms=data.get("latency_ms", 0.0))


def write_trace_jsonl(records: Iterable[TraceRecord], fp) -> None:
    for record in records:
        fp.write(json.dumps(record_to_json_dict(record), sort_keys=True))
        fp.write("\n")


def read_trace_jsonl(fp) -> list:
    records = []
    for line in fp:
        line = line.strip()
        if line:
            records.append(record_from_json_dict(json.loads(line)))
    return records
