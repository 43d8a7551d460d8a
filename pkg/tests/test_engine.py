"""Governed-loop behavior: gate, escalation hand-off, enforced dispatch, trace.

Fixture states use the procurement reference spec; a clean supplier is
verified, unsanctioned, and 200 days old, so nothing fires unless a test
arranges it.
"""

import dataclasses
import io
import json
import math
import random

import pytest

from sarc.engine import (
    Action,
    AgentState,
    Clock,
    EnforcementInactive,
    FaultModel,
    GreedySpendPlanner,
    LatencyModel,
    ScriptedPlanner,
    ToolRegistry,
    ToolResult,
    compute_backoff,
    pag_check,
    read_trace_jsonl,
    record_to_json_dict,
    run_episode,
    write_trace_jsonl,
)
from sarc.escalation import EscalationRouter, EscalationTicket, OperatorPool, route
from sarc.predicate import parse_predicate
from sarc.spec_model import (
    ConstraintClass,
    ConstraintDef,
    OperatingPoint,
    OperatingPointKind,
    ResponseKind,
    ResponseSpec,
    SourceKind,
    VerificationSite,
    load_reference_spec,
)

DAY = 86400.0
ATTRIBUTION = {"principal": "user:amena", "planner": "agent:proc-1",
               "executor": "agent:proc-1", "authority": ["erp.create_po"],
               "capability": "erp"}


@pytest.fixture(scope="module")
def spec():
    return load_reference_spec()


def clean_state(**overrides):
    fields = {
        "principal": "user:amena",
        "supplier.kyc_status": "verified",
        "supplier.sanctions_match": False,
        "supplier.first_seen_at": -200 * DAY,
    }
    fields.update(overrides)
    return AgentState(fields)


def zero_oracle(_actor):
    return 0.0


ORACLES = {"rolling_24h_spend": zero_oracle}


def po(amount, plan_index=0):
    return Action("erp.create_po", {"amount": amount, "supplier_id": "sup-77"},
                  plan_index)


def make_router(spec, mean_service=None, rng=None):
    pools = []
    for g in spec.router_groups.values():
        pools.append(OperatorPool(
            g.name, g.server_count,
            mean_service if mean_service is not None else g.mean_service_s,
            rng=rng))
    return EscalationRouter(pools)


def run(spec, actions, *, state=None, router=None, ruling_policy="approve_all",
        faults=None, latency=LatencyModel.zero(), registry=None, horizon=None,
        reward_fn=None, clock=None):
    planner = ScriptedPlanner(actions)
    registry = registry or ToolRegistry.with_defaults(spec)
    return run_episode(
        spec, planner, registry, horizon or len(actions) + 2, ATTRIBUTION,
        faults=faults, clock=clock or Clock(),
        router=router or make_router(spec, mean_service=30.0),
        ruling_policy=ruling_policy, latency=latency, oracles=ORACLES,
        reward_fn=reward_fn, initial_state=state or clean_state())


class TestPagCheck:
    def test_just_below_threshold_admits(self, spec):
        verdict = pag_check(spec, clean_state(), po(49_999.99), oracles=ORACLES)
        assert verdict.kind == "admit"
        c14 = [e for e in verdict.events
               if e.constraint_id == "c14_human_oversight_high_value"]
        assert [e.outcome for e in c14] == ["not_fired"]

    def test_threshold_is_inclusive(self, spec):
        verdict = pag_check(spec, clean_state(), po(50_000.00), oracles=ORACLES)
        assert verdict.kind == "escalate"
        assert verdict.constraint.id == "c14_human_oversight_high_value"

    def test_first_time_supplier_triggers(self, spec):
        state = clean_state(**{"supplier.first_seen_at": None})
        verdict = pag_check(spec, state, po(1_000), oracles=ORACLES)
        assert verdict.kind == "escalate"
        assert verdict.constraint.id == "ce_first_time_supplier"

    def test_both_triggers_fire_in_precedence_order(self, spec):
        state = clean_state(**{"supplier.first_seen_at": None})
        verdict = pag_check(spec, state, po(60_000), oracles=ORACLES)
        # regulatory c14 outranks contractual ce
        assert [c.id for c in verdict.escalations] == [
            "c14_human_oversight_high_value", "ce_first_time_supplier"]

    def test_undecidable_trigger_escalates(self, spec):
        state = clean_state()
        del state.fields["supplier.first_seen_at"]
        verdict = pag_check(spec, state, po(1_000), oracles=ORACLES)
        assert verdict.kind == "escalate"
        event = verdict.events[-1]
        assert event.constraint_id == "ce_first_time_supplier"
        assert event.detail.get("undecidable_trigger")

    def test_undecidable_hard_at_pag_blocks(self, spec):
        hard_pag = ConstraintDef(
            id="ch_budget_present", source_kind=SourceKind.OPERATIONAL,
            source_reference="fixture", constraint_class=ConstraintClass.HARD,
            pred=parse_predicate("budget.remaining >= 0"),
            verif=VerificationSite.PAG,
            resp=ResponseSpec(ResponseKind.BLOCK),
            operating_point=OperatingPoint(OperatingPointKind.EXACT_PREDICATE))
        mutated = dataclasses.replace(spec, constraints=(hard_pag,))
        verdict = pag_check(mutated, clean_state(), po(10), oracles=ORACLES)
        assert verdict.kind == "block"
        assert verdict.events[0].outcome == "undecidable"
        assert verdict.events[0].response_taken == "block"


class TestEscalationPath:
    def test_high_value_approved_and_dispatched(self, spec):
        result = run(spec, [po(60_000)])
        assert result.outcome == "completed"
        assert len(result.records) == 1
        record = result.records[0]
        assert record.stage == "dispatched"
        [c14] = record.events_for("c14_human_oversight_high_value")
        assert (c14.site, c14.outcome, c14.response_taken) == \
            ("PAG", "fired", "suspend_and_route")
        assert c14.ruling.kind.value == "approve"
        assert c14.ruling.decided_at == 30.0
        assert record.time >= 30.0  # the review consumed wall time

    def test_silent_operator_aborts_with_timeout(self, spec):
        router = make_router(spec, mean_service=700.0)
        # occupy both reviewers until t=700, past the 600 s window
        for _ in range(2):
            route(EscalationTicket(None, "warm", 0.0, 10_000.0),
                  router.pool("procurement_managers"))
        result = run(spec, [po(60_000)], router=router)
        assert result.aborted
        assert result.abort_constraint == "c14_human_oversight_high_value"
        record = result.records[-1]
        assert record.stage == "aborted"
        [c14] = record.events_for("c14_human_oversight_high_value")
        assert c14.ruling.kind.value == "timeout"
        assert not any(r.dispatched for r in result.records)

    def test_deny_resolves_step_and_plan_continues(self, spec):
        result = run(spec, [po(60_000), po(100)], ruling_policy="deny_all")
        assert result.outcome == "completed"
        assert [r.stage for r in result.records] == ["denied", "dispatched"]
        assert result.records[0].reward == 0.0

    def test_modify_re_enters_gate(self, spec):
        script = iter([("modify", {"amount": 30_000})])
        result = run(spec, [po(60_000)], ruling_policy=script)
        assert result.outcome == "completed"
        record = result.records[0]
        assert record.stage == "dispatched"
        assert record.action.args["amount"] == 30_000
        rounds = record.events_for("c14_human_oversight_high_value")
        assert len(rounds) == 2  # original validation plus the re-validation
        assert rounds[0].ruling.kind.value == "modify"
        assert rounds[1].outcome == "not_fired"

    def test_both_tickets_routed_when_both_fire(self, spec):
        state = clean_state(**{"supplier.first_seen_at": None})
        result = run(spec, [po(60_000)], state=state)
        record = result.records[0]
        [c14] = record.events_for("c14_human_oversight_high_value")
        [ce] = record.events_for("ce_first_time_supplier")
        assert c14.ruling is not None and ce.ruling is not None
        assert c14.ruling.group == "procurement_managers"
        assert ce.ruling.group == "vendor_governance"


class TestDispatch:
    def test_kyc_block_at_tool_layer(self, spec):
        state = clean_state(**{"supplier.sanctions_match": True})
        result = run(spec, [po(1_000)], state=state)
        record = result.records[0]
        assert record.stage == "blocked"
        [kyc] = record.events_for("ch_security_supplier_kyc")
        assert (kyc.site, kyc.outcome, kyc.response_taken) == \
            ("tool_layer", "fired", "block")

    def test_unwired_hook_refuses_dispatch(self, spec):
        registry = ToolRegistry()
        for sig in spec.action_space.tools:
            registry.register(sig.name,
                              lambda args, state: ToolResult({}, {"ok": True}))
        with pytest.raises(EnforcementInactive, match="ch_security_supplier_kyc"):
            run(spec, [po(1_000)], registry=registry)

    def test_empty_constraint_set_runs_bare(self, spec):
        bare = dataclasses.replace(spec, constraints=())
        actions = [po(n, plan_index=n) for n in range(5)]
        result = run(bare, actions)
        assert len(result.records) == 5
        assert all(r.evaluated == () for r in result.records)
        assert all(r.stage == "dispatched" for r in result.records)

    def test_every_record_covers_applicable_constraints(self, spec):
        result = run(spec, [po(60_000)])
        ids = {e.constraint_id for e in result.records[0].evaluated}
        assert ids == {c.id for c in spec.constraints}


def atm_budget_spec(spec, budget=3):
    chunk_cap = ConstraintDef(
        id="ch_stream_budget", source_kind=SourceKind.OPERATIONAL,
        source_reference="fixture", constraint_class=ConstraintClass.HARD,
        pred=parse_predicate(f"chunk.index <= {budget}"),
        verif=VerificationSite.ATM,
        resp=ResponseSpec(ResponseKind.ABORT),
        operating_point=OperatingPoint(OperatingPointKind.EXACT_PREDICATE))
    return dataclasses.replace(spec, constraints=(chunk_cap,))


class TestAtmWrapping:
    def test_stream_interrupted_at_budget(self, spec):
        narrow = atm_budget_spec(spec, budget=3)
        emitted = []

        def chatty(args, state):
            for i in range(10):
                emitted.append(i)
                yield {"part": i}
            return ToolResult({}, {"done": True})

        registry = ToolRegistry()
        registry.register("erp.create_po", chatty, streaming=True)
        result = run(narrow, [po(10)], registry=registry)
        assert result.aborted
        record = result.records[0]
        assert record.stage == "interrupted"
        # the fourth chunk crosses the budget and is caught there
        assert record.observation["interrupted_after"] == 4
        assert emitted == [0, 1, 2, 3]  # generator closed, six chunks never ran
        [event] = record.events_for("ch_stream_budget")
        assert (event.site, event.outcome, event.response_taken) == \
            ("ATM", "fired", "abort")

    def test_stream_within_budget_completes(self, spec):
        roomy = atm_budget_spec(spec, budget=10)

        def brief(args, state):
            yield {"part": 0}
            yield {"part": 1}
            return ToolResult({"po.created": True}, {"done": True})

        registry = ToolRegistry()
        registry.register("erp.create_po", brief, streaming=True)
        result = run(roomy, [po(10)], registry=registry)
        record = result.records[0]
        assert record.stage == "dispatched"
        assert record.observation["result"] == {"done": True}
        assert len(record.observation["chunks"]) == 2
        [event] = record.events_for("ch_stream_budget")
        assert event.outcome == "not_fired"


class TestPaaThrottle:
    def paa_events(self, spec, window_value):
        oracles = {"rolling_24h_spend": lambda actor: window_value}
        planner = ScriptedPlanner([po(1_000)])
        result = run_episode(
            spec, planner, ToolRegistry.with_defaults(spec), 2, ATTRIBUTION,
            clock=Clock(), router=make_router(spec, mean_service=30.0),
            oracles=oracles, initial_state=clean_state())
        return result.records[0].events_for("cs_window_spend")

    def test_fires_from_operating_point_with_backoff(self, spec):
        [event] = self.paa_events(spec, 480_000.0)
        assert (event.site, event.outcome, event.response_taken) == \
            ("PAA", "fired", "throttle")
        assert event.detail["overage"] == 5_000.0
        assert event.detail["backoff_s"] == pytest.approx(math.exp(0.1), abs=1e-9)

    def test_quiet_below_operating_point(self, spec):
        [event] = self.paa_events(spec, 400_000.0)
        assert event.outcome == "not_fired"
        assert event.response_taken == "none"

    def test_backoff_saturates(self):
        formula = "exp(min(overage / 50000, 5))"
        assert compute_backoff(formula, 5_000) == pytest.approx(math.exp(0.1))
        assert compute_backoff(formula, 250_000) == pytest.approx(math.exp(5))
        assert compute_backoff(formula, 2_000_000) == pytest.approx(math.exp(5))

    def test_formula_rejects_unknown_names(self):
        with pytest.raises(ValueError):
            compute_backoff("exp(__import__)", 1.0)
        with pytest.raises(ValueError):
            compute_backoff("open('x')", 1.0)


class TestFaults:
    def test_fault_accounting_matches_binomial(self, spec):
        """Executed violations over many episodes vs the closed-form rate."""
        eps_pred, eps_exec = 0.10, 0.05
        p = eps_pred + (1 - eps_pred) * eps_exec
        hard_gate = ConstraintDef(
            id="ch_amount_cap", source_kind=SourceKind.REGULATORY,
            source_reference="fixture", constraint_class=ConstraintClass.HARD,
            pred=parse_predicate("action.args.amount < 50000"),
            verif=VerificationSite.PAG,
            resp=ResponseSpec(ResponseKind.BLOCK),
            operating_point=OperatingPoint(OperatingPointKind.EXACT_PREDICATE))
        gated = dataclasses.replace(spec, constraints=(hard_gate,))
        faults = FaultModel(eps_pred, eps_exec, rng=random.Random("faults/acct"))
        episodes, per_episode = 60, 40
        executed = tagged = 0
        for _ in range(episodes):
            actions = [po(60_000, plan_index=i) for i in range(per_episode)]
            result = run(gated, actions, faults=faults, horizon=per_episode + 1)
            for record in result.records:
                if record.stage == "dispatched":
                    executed += 1
                    faults_seen = [e.fault for e in record.evaluated if e.fault]
                    assert len(faults_seen) == 1  # honest tagging, every time
                    tagged += 1
        n = episodes * per_episode
        mean, sd = n * p, math.sqrt(n * p * (1 - p))
        assert abs(executed - mean) < 3 * sd
        assert tagged == executed

    def test_no_faults_means_fail_safe(self, spec):
        rng = random.Random("failsafe")
        for _ in range(25):
            state = clean_state(**{
                "supplier.sanctions_match": rng.random() < 0.4,
                "supplier.first_seen_at": None if rng.random() < 0.3 else -200 * DAY,
            })
            amount = rng.choice([100, 49_999.99, 50_000, 120_000])
            result = run(spec, [po(amount)], state=state)
            for record in result.records:
                for event in record.evaluated:
                    assert event.fault is None
                    if event.fired and event.constraint_id.startswith("ch_"):
                        assert event.response_taken in ("block", "abort")

    def test_probabilities_validated(self):
        with pytest.raises(ValueError):
            FaultModel(eps_pred=1.5)


class TestLatencyAndReward:
    def test_site_costs_add_up(self, spec):
        latency = LatencyModel(pag_ms=5.0, atm_ms=6.0, paa_ms=10.0)
        result = run(spec, [po(1_000)], latency=latency)
        assert result.records[0].latency_ms == 21.0

    def test_denied_step_pays_only_the_gate(self, spec):
        latency = LatencyModel(pag_ms=5.0, atm_ms=6.0, paa_ms=10.0)
        result = run(spec, [po(60_000)], latency=latency,
                     ruling_policy="deny_all")
        assert result.records[0].latency_ms == 5.0

    def test_latency_recomputable_from_record(self, spec):
        latency = LatencyModel(model_ms=2.0, pag_ms=5.0, tool_ms=3.0,
                               atm_ms=6.0, paa_ms=10.0)
        result = run(spec, [po(60_000)], latency=latency)
        record = result.records[0]
        sites = {"model"}
        sites.update({"tool_layer": "tool", "policy_layer": "tool"}.get(e.site, e.site)
                     for e in record.evaluated)
        if record.dispatched:
            sites.update({"tool", "ATM"})
        assert record.latency_ms == latency.step_ms(sites)

    def test_aborted_steps_accrue_zero_reward(self, spec):
        router = make_router(spec, mean_service=700.0)
        for _ in range(2):
            route(EscalationTicket(None, "warm", 0.0, 10_000.0),
                  router.pool("procurement_managers"))
        reward_fn = lambda s, a, s2: float(a.args["amount"])  # noqa: E731
        result = run(spec, [po(60_000)], router=router, reward_fn=reward_fn)
        assert result.aborted
        assert result.total_reward == 0.0

    def test_dispatched_reward_accrues(self, spec):
        reward_fn = lambda s, a, s2: float(a.args["amount"])  # noqa: E731
        result = run(spec, [po(1_000), po(2_000)], reward_fn=reward_fn)
        assert result.total_reward == 3_000.0


class TestPlanners:
    def test_scripted_does_not_retry_resolved_actions(self, spec):
        planner = ScriptedPlanner([po(60_000), po(70_000)])
        registry = ToolRegistry.with_defaults(spec)
        result = run_episode(spec, planner, registry, 10, ATTRIBUTION,
                             router=make_router(spec, mean_service=30.0),
                             ruling_policy="deny_all", oracles=ORACLES,
                             initial_state=clean_state())
        assert [r.stage for r in result.records] == ["denied", "denied"]

    def test_greedy_spend_places_everything_it_can(self, spec):
        orders = [{"amount": a, "supplier_id": f"sup-{i}"}
                  for i, a in enumerate([100.0, 60_000.0, 200.0])]
        planner = GreedySpendPlanner(orders)
        result = run_episode(
            spec, planner, ToolRegistry.with_defaults(spec), 10, ATTRIBUTION,
            router=make_router(spec, mean_service=30.0), oracles=ORACLES,
            initial_state=clean_state())
        assert [r.stage for r in result.records] == ["dispatched"] * 3
        assert [r.action.args["amount"] for r in result.records] == \
            [100.0, 60_000.0, 200.0]


class TestTraceSerialization:
    def roundtrip(self, records):
        buffer = io.StringIO()
        write_trace_jsonl(records, buffer)
        buffer.seek(0)
        return buffer.getvalue(), read_trace_jsonl(buffer)

    def test_schema_version_on_every_line(self, spec):
        result = run(spec, [po(60_000), po(100)])
        text, _ = self.roundtrip(result.records)
        for line in text.strip().splitlines():
            assert json.loads(line)["schema_version"] == "sarc-trace-0.1"

    def test_round_trip_preserves_records(self, spec):
        result = run(spec, [po(60_000), po(100)])
        _, again = self.roundtrip(result.records)
        assert [record_to_json_dict(r) for r in again] == \
            [record_to_json_dict(r) for r in result.records]

    def test_serialization_is_byte_stable(self, spec):
        result = run(spec, [po(60_000)])
        text1, _ = self.roundtrip(result.records)
        text2, _ = self.roundtrip(result.records)
        assert text1 == text2

    def test_trace_fields_surface_in_digests(self, spec):
        result = run(spec, [po(60_000)])
        pre = result.records[0].pre_state
        assert pre["fields"]["principal"] == "user:amena"
        assert len(pre["digest"]) == 64
