"""Declarative episode scenarios: the environment around one agent, as data.

A scenario file names the scripted plan, the state facts the predicates
will read, constant values for oracle calls, the operator ruling policy,
and the attribution tuple stamped on every record. Together with a
specification it pins a complete, replayable episode, which is how the
command line runs one-off traces and how fixtures stay out of code.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from importlib import resources
from numbers import Real
from typing import Mapping, Optional

import yaml

from .engine import (
    Action,
    AgentState,
    Clock,
    EpisodeResult,
    FaultModel,
    ScriptedPlanner,
    ToolRegistry,
    run_episode,
)
from .escalation import EscalationRouter, OperatorPool
from .spec_model import Specification

__all__ = [
    "Scenario",
    "ScenarioError",
    "parse_scenario",
    "run_scenario",
    "reference_scenario_text",
    "load_reference_scenario",
    "REFERENCE_SCENARIOS",
]

RULING_POLICIES = ("approve_all", "deny_all")

_FIELDS = ("scenario", "description", "attribution", "state", "oracles",
           "rulings", "start_time", "horizon", "actions")
_ATTRIBUTION_KEYS = ("principal", "planner", "executor", "authority",
                     "capability")


class ScenarioError(ValueError):
    """The scenario document cannot be used as written."""


@dataclass(frozen=True)
class Scenario:
    name: str
    description: str
    attribution: Mapping[str, object]
    state_facts: Mapping[str, object]
    oracles: Mapping[str, float]
    ruling_policy: str
    start_time: float
    horizon: Optional[int]
    actions: tuple


def parse_scenario(document: str) -> Scenario:
    try:
        tree = yaml.safe_load(document)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"scenario document is not valid YAML: {exc}")
    if not isinstance(tree, Mapping):
        raise ScenarioError("scenario document must be a mapping")
    unknown = sorted(set(tree) - set(_FIELDS))
    if unknown:
        raise ScenarioError(f"unknown scenario fields: {', '.join(unknown)}")

    name = tree.get("scenario")
    if not isinstance(name, str) or not name:
        raise ScenarioError("scenario must carry a non-empty name")

    attribution = tree.get("attribution")
    if not isinstance(attribution, Mapping):
        raise ScenarioError("attribution block is required")
    missing = [k for k in _ATTRIBUTION_KEYS if k not in attribution]
    if missing:
        raise ScenarioError(f"attribution is missing {', '.join(missing)}")
    if not isinstance(attribution["authority"], list):
        raise ScenarioError("attribution.authority must be a list")

    actions_node = tree.get("actions")
    if not isinstance(actions_node, list) or not actions_node:
        raise ScenarioError("actions must be a non-empty list")
    actions = []
    for i, node in enumerate(actions_node):
        if not isinstance(node, Mapping) or not isinstance(node.get("tool"), str):
            raise ScenarioError(f"actions[{i}] must name a tool")
        args = node.get("args", {})
        if not isinstance(args, Mapping):
            raise ScenarioError(f"actions[{i}].args must be a mapping")
        extra = sorted(set(node) - {"tool", "args"})
        if extra:
            raise ScenarioError(f"actions[{i}] has unknown keys: {', '.join(extra)}")
        actions.append(Action(node["tool"], dict(args), i))

    rulings = tree.get("rulings", "approve_all")
    if rulings not in RULING_POLICIES:
        raise ScenarioError(
            f"rulings must be one of {', '.join(RULING_POLICIES)}")

    oracles = tree.get("oracles", {})
    if not isinstance(oracles, Mapping) or not all(
            isinstance(v, Real) for v in oracles.values()):
        raise ScenarioError("oracles must map names to numbers")

    state = tree.get("state", {})
    if not isinstance(state, Mapping):
        raise ScenarioError("state must be a mapping of facts")

    start_time = tree.get("start_time", 0.0)
    if not isinstance(start_time, Real) or start_time < 0:
        raise ScenarioError("start_time must be a non-negative number")

    horizon = tree.get("horizon")
    if horizon is not None and (not isinstance(horizon, int) or horizon < 1):
        raise ScenarioError("horizon must be a positive integer")

    return Scenario(
        name=name,
        description=str(tree.get("description", "")),
        attribution=dict(attribution),
        state_facts=dict(state),
        oracles={str(k): float(v) for k, v in oracles.items()},
        ruling_policy=rulings,
        start_time=float(start_time),
        horizon=horizon,
        actions=tuple(actions),
    )


def run_scenario(spec: Specification, scenario: Scenario, *, seed: int = 0,
                 eps_pred: float = 0.0, eps_exec: float = 0.0) -> EpisodeResult:
    """Replay the scenario against the specification.

    Operator pools serve at exactly their declared means, so rulings and
    timeouts are a pure function of the document; the seed feeds fault
    injection only.
    """
    router = EscalationRouter([
        OperatorPool(g.name, g.server_count, g.mean_service_s)
        for g in spec.router_groups.values()])
    faults = (FaultModel(eps_pred, eps_exec,
                         rng=random.Random(f"faults-{seed}"))
              if eps_pred or eps_exec else None)
    facts = {"principal": scenario.attribution.get("principal")}
    facts.update(scenario.state_facts)
    oracles = {name: (lambda actor, value=value: value)
               for name, value in scenario.oracles.items()}
    horizon = scenario.horizon or len(scenario.actions) + 2
    return run_episode(
        spec, ScriptedPlanner(list(scenario.actions)),
        ToolRegistry.with_defaults(spec), horizon, dict(scenario.attribution),
        clock=Clock(scenario.start_time), router=router,
        ruling_policy=scenario.ruling_policy, faults=faults, oracles=oracles,
        initial_state=AgentState(facts, time=scenario.start_time))


def reference_scenario_text(name: str) -> str:
    path = resources.files("sarc") / "data" / "scenarios" / f"{name}.yaml"
    return path.read_text(encoding="utf-8")


def load_reference_scenario(name: str) -> Scenario:
    return parse_scenario(reference_scenario_text(name))


REFERENCE_SCENARIOS = ("routine_purchase", "high_value_escalation",
                       "blocked_sanctions", "echo_note")
