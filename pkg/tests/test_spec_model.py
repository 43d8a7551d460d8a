"""Specification parsing, lints, and round-trip serialization."""

import dataclasses

import pytest
import yaml
from hypothesis import given, strategies as st

from sarc.predicate import free_oracles, parse_predicate, to_source
from sarc.spec_model import (
    COMPATIBLE_SITES,
    ConstraintClass,
    LintFinding,
    OperatingPointKind,
    ResponseKind,
    SourceKind,
    SpecParseError,
    VerificationSite,
    guard_tools,
    load_reference_spec,
    parse_duration,
    format_duration,
    parse_spec,
    reference_spec_text,
    serialize_spec,
    spec_to_tree,
    validate_spec,
)

ALL_SITES = [s.value for s in VerificationSite if s is not VerificationSite.PROMPT_LAYER]


def full_dispatch_graph(spec):
    return {t.name: set(ALL_SITES) for t in spec.action_space.tools}


@pytest.fixture(scope="module")
def spec():
    return load_reference_spec()


class TestParsing:
    def test_reference_document_shape(self, spec):
        assert spec.spec_version == "sarc-0.1"
        assert spec.agent_name == "procurement-approver"
        assert len(spec.constraints) == 4
        assert set(spec.router_groups) == {"procurement_managers", "vendor_governance"}
        assert spec.audit_schema_version == "sarc-trace-0.1"

    def test_constraint_quintuples(self, spec):
        c14 = spec.constraint("c14_human_oversight_high_value")
        assert c14.source_kind is SourceKind.REGULATORY
        assert c14.constraint_class is ConstraintClass.ESCALATION
        assert c14.verif is VerificationSite.PAG
        assert c14.resp.kind is ResponseKind.SUSPEND_AND_ROUTE
        assert c14.resp.router_group == "procurement_managers"
        assert c14.operating_point.kind is OperatingPointKind.DETERMINISTIC_THRESHOLD
        assert c14.operating_point.theta == 50000
        assert c14.timeout.reversibility_window_s == 600
        assert c14.timeout.on_timeout == "deny"

        kyc = spec.constraint("ch_security_supplier_kyc")
        assert kyc.constraint_class is ConstraintClass.HARD
        assert kyc.verif is VerificationSite.TOOL_LAYER
        assert kyc.verif_tool == "erp.create_po"
        assert kyc.resp.kind is ResponseKind.BLOCK
        assert kyc.operating_point.fp_tolerance == 0.0

        window = spec.constraint("cs_window_spend")
        assert window.constraint_class is ConstraintClass.SOFT
        assert window.resp.kind is ResponseKind.THROTTLE
        assert window.resp.backoff_formula == "exp(min(overage / 50000, 5))"
        assert free_oracles(window.pred) == {"rolling_24h_spend"}
        assert window.operating_point.theta == 475000

        first = spec.constraint("ce_first_time_supplier")
        assert first.source_kind is SourceKind.CONTRACTUAL
        assert first.timeout.reversibility_window_s == 14400

    def test_class_partition(self, spec):
        by_class = {cls: spec.by_class(cls) for cls in ConstraintClass}
        assert sum(len(v) for v in by_class.values()) == len(spec.constraints)
        assert {c.id for c in by_class[ConstraintClass.HARD]} == {"ch_security_supplier_kyc"}
        assert {c.id for c in by_class[ConstraintClass.SOFT]} == {"cs_window_spend"}
        assert {c.id for c in by_class[ConstraintClass.ESCALATION]} == {
            "c14_human_oversight_high_value", "ce_first_time_supplier"}

    def test_state_and_action_space(self, spec):
        assert spec.state_spec.memory_kind.value == "episodic"
        assert spec.state_spec.freshness_default_s == 300
        freshness = {r.source: r.freshness_max_s
                     for r in spec.state_spec.retrieval_sources}
        assert freshness == {"erp.purchase_orders": 60, "kyc.supplier_registry": 86400}
        create_po = spec.action_space.tool("erp.create_po")
        assert [(p.name, p.semantic_type) for p in create_po.params] == [
            ("amount", "money-eur"), ("supplier_id", "text-id")]
        assert create_po.returns == "text-id"
        assert create_po.enforcement_hooks == {"ch_security_supplier_kyc"}
        assert spec.action_space.tool("kyc.lookup_supplier").returns == "record"
        assert spec.action_space.max_plan_length == 8

    def test_reward(self, spec):
        assert [c.weight for c in spec.reward_spec.components] == [0.6, 0.4]
        assert spec.reward_spec.fn_cost == 50.0
        assert spec.reward_spec.goodhart_note["threshold"] == 0.7

    def test_router_groups(self, spec):
        managers = spec.router_groups["procurement_managers"]
        assert (managers.server_count, managers.mean_service_s) == (2, 360.0)
        vendor = spec.router_groups["vendor_governance"]
        assert (vendor.server_count, vendor.mean_service_s) == (1, 1800.0)

    def test_empty_constraints_parse(self, spec):
        tree = spec_to_tree(spec)
        tree["constraints"] = []
        bare = parse_spec(yaml.safe_dump(tree))
        assert bare.constraints == ()
        assert validate_spec(bare, full_dispatch_graph(bare)) == []

    def test_json_is_accepted(self, spec):
        import json
        tree = spec_to_tree(spec)
        again = parse_spec(json.dumps(tree))
        assert again == parse_spec(yaml.safe_dump(tree))

    def test_missing_operating_point_names_constraint(self):
        tree = yaml.safe_load(reference_spec_text())
        del tree["constraints"][2]["operating_point"]
        with pytest.raises(SpecParseError) as err:
            parse_spec(yaml.safe_dump(tree))
        assert "cs_window_spend" in str(err.value)
        assert "operating_point" in str(err.value)

    def test_wrong_version_rejected(self):
        with pytest.raises(SpecParseError, match="spec_version"):
            parse_spec(reference_spec_text().replace("sarc-0.1", "sarc-9.9", 1))

    def test_duplicate_ids_rejected(self):
        tree = yaml.safe_load(reference_spec_text())
        tree["constraints"][1]["id"] = tree["constraints"][0]["id"]
        with pytest.raises(SpecParseError, match="duplicate"):
            parse_spec(yaml.safe_dump(tree))

    def test_unknown_enum_rejected(self):
        tree = yaml.safe_load(reference_spec_text())
        tree["constraints"][0]["class"] = "firm"
        with pytest.raises(SpecParseError, match="hard, soft, escalation"):
            parse_spec(yaml.safe_dump(tree))

    def test_yaml_syntax_error_reports_position(self):
        with pytest.raises(SpecParseError, match="line"):
            parse_spec("spec_version: [unclosed\nagent: x\n  bad")

    def test_unknown_fields_preserved(self, spec):
        tree = yaml.safe_load(reference_spec_text())
        tree["x_future_field"] = {"nested": [1, 2]}
        tree["constraints"][0]["x_annotation"] = "keep me"
        parsed = parse_spec(yaml.safe_dump(tree))
        assert parsed.extra["x_future_field"] == {"nested": [1, 2]}
        assert parsed.constraints[0].extra["x_annotation"] == "keep me"
        again = parse_spec(serialize_spec(parsed))
        assert again == parsed


class TestDurations:
    @pytest.mark.parametrize("text,seconds", [
        ("60s", 60), ("5m", 300), ("24h", 86400), ("90d", 7776000), (42, 42.0),
    ])
    def test_parse(self, text, seconds):
        assert parse_duration(text) == seconds

    def test_format_round_trip(self):
        for seconds in (1, 60, 90, 300, 3600, 86400, 7776000, 600, 14400):
            assert parse_duration(format_duration(seconds)) == seconds

    def test_bad_duration(self):
        with pytest.raises(SpecParseError):
            parse_duration("90x")


class TestValidation:
    def test_reference_spec_is_clean(self, spec):
        assert validate_spec(spec, full_dispatch_graph(spec)) == []

    def test_hard_at_prompt_layer(self, spec):
        mutated = _with_constraint(spec, "ch_security_supplier_kyc",
                                   verif=VerificationSite.PROMPT_LAYER)
        findings = validate_spec(mutated, full_dispatch_graph(mutated))
        assert [f.lint for f in findings] == ["I6-layer-class"]
        assert findings[0].constraint_id == "ch_security_supplier_kyc"

    def test_bypassing_tool_named(self, spec):
        graph = full_dispatch_graph(spec)
        graph["erp.create_po"] = set()
        findings = validate_spec(spec, graph)
        assert {f.lint for f in findings} == {"I7-no-bypass"}
        assert {f.tool for f in findings} == {"erp.create_po"}
        assert {f.constraint_id for f in findings} == {c.id for c in spec.constraints}

    def test_guarded_constraint_skips_other_tools(self, spec):
        graph = full_dispatch_graph(spec)
        graph["kyc.lookup_supplier"] = set()
        findings = validate_spec(spec, graph)
        flagged = {f.constraint_id for f in findings}
        # c14 is guarded on erp.create_po, so an unenforced kyc tool cannot bypass it
        assert "c14_human_oversight_high_value" not in flagged
        assert flagged == {"ch_security_supplier_kyc", "cs_window_spend",
                           "ce_first_time_supplier"}

    def test_missing_escalation_timeout(self, spec):
        mutated = _with_constraint(spec, "ce_first_time_supplier", timeout=None)
        findings = validate_spec(mutated, full_dispatch_graph(mutated))
        assert [f.lint for f in findings] == ["escalation-timeout"]

    def test_undeclared_router_group(self, spec):
        c14 = spec.constraint("c14_human_oversight_high_value")
        mutated = _with_constraint(
            spec, "c14_human_oversight_high_value",
            resp=dataclasses.replace(c14.resp, router_group="night_shift"))
        findings = validate_spec(mutated, full_dispatch_graph(mutated))
        assert [f.lint for f in findings] == ["router-capacity"]
        assert "night_shift" in findings[0].detail

    def test_missing_operating_point_is_i2(self, spec):
        mutated = _with_constraint(spec, "cs_window_spend", operating_point=None)
        findings = validate_spec(mutated, full_dispatch_graph(mutated))
        assert [f.lint for f in findings] == ["I2-completeness"]

    def test_incompatible_site_only(self, spec):
        # a tool whose calls traverse the prompt layer alone enforces nothing
        graph = full_dispatch_graph(spec)
        graph["erp.send_to_approver"] = {"prompt_layer"}
        findings = validate_spec(spec, graph)
        assert all(f.lint == "I7-no-bypass" for f in findings)
        assert {f.tool for f in findings} == {"erp.send_to_approver"}

    def test_compatibility_table(self):
        assert VerificationSite.PROMPT_LAYER not in COMPATIBLE_SITES[ConstraintClass.HARD]
        assert COMPATIBLE_SITES[ConstraintClass.ESCALATION] == {
            VerificationSite.PAG, VerificationSite.PAA}
        assert VerificationSite.PAG not in COMPATIBLE_SITES[ConstraintClass.SOFT]


MUTATIONS = ["drop_operating_point", "hard_to_prompt", "drop_timeout",
             "unknown_group", "bypass_tool"]


@given(st.sampled_from(MUTATIONS), st.randoms(use_true_random=False))
def test_each_mutation_yields_exactly_its_finding(mutation, rng):
    spec = load_reference_spec()
    graph = full_dispatch_graph(spec)
    if mutation == "drop_operating_point":
        victim = rng.choice([c.id for c in spec.constraints])
        spec = _with_constraint(spec, victim, operating_point=None)
        expected = ("I2-completeness", victim)
    elif mutation == "hard_to_prompt":
        spec = _with_constraint(spec, "ch_security_supplier_kyc",
                                verif=VerificationSite.PROMPT_LAYER)
        expected = ("I6-layer-class", "ch_security_supplier_kyc")
    elif mutation == "drop_timeout":
        victim = rng.choice(["c14_human_oversight_high_value", "ce_first_time_supplier"])
        spec = _with_constraint(spec, victim, timeout=None)
        expected = ("escalation-timeout", victim)
    elif mutation == "unknown_group":
        victim = rng.choice(["c14_human_oversight_high_value", "ce_first_time_supplier"])
        resp = dataclasses.replace(spec.constraint(victim).resp, router_group="ghost")
        spec = _with_constraint(spec, victim, resp=resp)
        expected = ("router-capacity", victim)
    else:
        tool = rng.choice(sorted(graph))
        graph[tool] = set()
        expected = ("I7-no-bypass", None)
    findings = validate_spec(spec, graph)
    assert findings, f"mutation {mutation} produced no finding"
    assert {f.lint for f in findings} == {expected[0]}
    if expected[1] is not None:
        assert [f.constraint_id for f in findings] == [expected[1]]


class TestRoundTrip:
    def test_reference_round_trip(self, spec):
        text = serialize_spec(spec)
        assert parse_spec(text) == spec

    def test_canonical_form_is_stable(self, spec):
        once = serialize_spec(spec)
        assert serialize_spec(parse_spec(once)) == once

    def test_predicates_normalized(self, spec):
        text = serialize_spec(spec)
        assert "actor=" not in text  # named-argument sugar does not survive
        assert "rolling_24h_spend(principal)" in text

    def test_unicode_agent_name(self, spec):
        tree = spec_to_tree(spec)
        tree["agent"] = "approbateur-achats-électronique"
        parsed = parse_spec(yaml.safe_dump(tree, allow_unicode=True))
        assert parse_spec(serialize_spec(parsed)) == parsed

    def test_empty_constraints_round_trip(self, spec):
        tree = spec_to_tree(spec)
        tree["constraints"] = []
        parsed = parse_spec(yaml.safe_dump(tree))
        assert "constraints: []" in serialize_spec(parsed)
        assert parse_spec(serialize_spec(parsed)) == parsed


class TestGuardExtraction:
    def test_tool_guard_found(self):
        pred = parse_predicate(
            "action.tool == 'erp.create_po' && action.args.amount >= 50000")
        assert guard_tools(pred) == {"erp.create_po"}

    def test_tool_call_form(self):
        assert guard_tools(parse_predicate("tool(action) == 'kyc.lookup_supplier'")) \
            == {"kyc.lookup_supplier"}

    def test_disjunctive_guard_unions(self):
        pred = parse_predicate(
            "(action.tool == 'a.x' || action.tool == 'b.y') && amount(action) > 0")
        assert guard_tools(pred) == {"a.x", "b.y"}

    def test_guardless(self):
        assert guard_tools(parse_predicate(
            "supplier.kyc_status == 'verified' && !supplier.sanctions_match")) is None

    def test_mixed_disjunction_is_guardless(self):
        # a tool equality OR an unrelated clause constrains nothing
        assert guard_tools(parse_predicate(
            "action.tool == 'a.x' || supplier.trusted")) is None


def _with_constraint(spec, constraint_id, **changes):
    constraints = tuple(
        dataclasses.replace(c, **changes) if c.id == constraint_id else c
        for c in spec.constraints
    )
    return dataclasses.replace(spec, constraints=constraints)
