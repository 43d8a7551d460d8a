"""Specification-trace correspondence: did the run honor its declaration?

The checker is a decision procedure over exactly two artifacts, the
specification and the trace. It never consults the planner, the tools, or
the clock that produced the run, so a verdict here is one an outside
auditor could reach from the archived files alone.

Four passes per record:

i.   coverage - every constraint applicable to the action appears among
     the recorded evaluations, or carries a recorded upstream rescue;
ii.  class placement - each recorded evaluation happened at a site
     compatible with the constraint's declared class;
iii. outcome consistency - each firing took the declared response;
iv.  attribution - the record resolves to a non-empty principal chain
     whose intersected authority is non-empty (and, for dispatch trees,
     the tree structure itself: verbatim folds and properly nested
     chains are reported under this pass).

Coverage is stage-aware. A step that was stopped early never traversed
the later sites, so a blocked record owes evaluations only up to the
point that stopped it; the stopping constraint must itself be visible,
otherwise the early stop is unexplained and flagged. Work is bounded by
one visit per record-constraint and record-event pair, linear in
|trace| x |constraints|.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

from .engine import (
    TRACE_SCHEMA_VERSION,
    ConstraintEvent,
    TraceRecord,
    record_from_json_dict,
)
from .multiagent import TraceTree
from .spec_model import (
    COMPATIBLE_SITES,
    ConstraintClass,
    ConstraintDef,
    ResponseKind,
    Specification,
    VerificationSite,
    guard_tools,
)

__all__ = [
    "PASSES", "SchemaMismatch", "Discrepancy", "AuditReport",
    "discrepancy_to_json_dict", "report_to_json_dict",
    "applicability", "check_correspondence",
]

PASSES = ("coverage", "class_placement", "outcome_consistency", "attribution")

# Traversal phases in loop order; a record's stage bounds how far the
# step got, and only constraints at reached phases are owed coverage.
_PAG_HARD, _PAG_ESC, _LAYER, _ATM, _PAA = range(5)
_NOTHING_REACHED = -1


class SchemaMismatch(ValueError):
    """Trace written under a different schema than this checker reads."""


@dataclass(frozen=True)
class Discrepancy:
    record_index: int  # -1 for tree-structural findings not tied to one record
    constraint_id: Optional[str]
    pass_name: str  # one of PASSES
    detail: str


@dataclass(frozen=True)
class AuditReport:
    holds: bool
    discrepancies: tuple
    records_checked: int
    constraints_checked: int
    visits: int
    elapsed_s: float


def discrepancy_to_json_dict(d: Discrepancy) -> dict:
    return {"record_index": d.record_index, "constraint_id": d.constraint_id,
            "pass": d.pass_name, "detail": d.detail}


def report_to_json_dict(report: AuditReport) -> dict:
    # elapsed varies run to run and is deliberately left out
    return {
        "holds": report.holds,
        "discrepancies": [discrepancy_to_json_dict(d) for d in report.discrepancies],
        "records_checked": report.records_checked,
        "constraints_checked": report.constraints_checked,
        "visits": report.visits,
    }


def _constraint_phase(c: ConstraintDef) -> Optional[int]:
    """Loop phase at which the engine evaluates this constraint.

    None means the declared site never evaluates this class (a prompt
    layer placement, or a class-site mismatch): nothing to owe.
    """
    if c.verif is VerificationSite.PAG:
        if c.constraint_class is ConstraintClass.HARD:
            return _PAG_HARD
        if c.constraint_class is ConstraintClass.ESCALATION:
            return _PAG_ESC
        return None
    if c.verif in (VerificationSite.TOOL_LAYER, VerificationSite.POLICY_LAYER):
        return _LAYER
    if c.verif is VerificationSite.ATM:
        return _ATM
    if c.verif is VerificationSite.PAA:
        if c.constraint_class in (ConstraintClass.SOFT, ConstraintClass.ESCALATION):
            return _PAA
        return None
    return None


def applicability(spec: Specification, record: TraceRecord) -> frozenset:
    """Constraint ids applicable to the record's action.

    A constraint applies when its predicate carries no tool guard, or
    when a top-level guard conjunct names the action's tool.
    """
    tool = record.action.tool
    out = set()
    for c in spec.constraints:
        guard = guard_tools(c.pred)
        if guard is None or tool in guard:
            out.add(c.id)
    return frozenset(out)


def _ruling_kind(event: ConstraintEvent) -> Optional[str]:
    if event.ruling is None:
        return None
    kind = event.ruling.kind
    return kind.value if hasattr(kind, "value") else str(kind)


class _Checker:
    def __init__(self, spec: Specification):
        self.by_id = {c.id: c for c in spec.constraints}
        self.guards = {c.id: guard_tools(c.pred) for c in spec.constraints}
        self.phases = {c.id: _constraint_phase(c) for c in spec.constraints}
        self.constraints = tuple(spec.constraints)
        self.visits = 0
        self.discrepancies: list = []

    def flag(self, index: int, constraint_id: Optional[str], pass_name: str,
             detail: str) -> None:
        self.discrepancies.append(Discrepancy(index, constraint_id, pass_name, detail))

    # -- stage reconstruction -------------------------------------------------

    def _declared_response(self, constraint_id: str) -> Optional[ResponseKind]:
        c = self.by_id.get(constraint_id)
        return c.resp.kind if c is not None else None

    def _stopper_phase(self, event: ConstraintEvent) -> Optional[int]:
        site = {"PAG": _PAG_HARD, "tool_layer": _LAYER,
                "policy_layer": _LAYER, "ATM": _ATM}.get(event.site)
        return site

    def _reached(self, index: int, record: TraceRecord) -> tuple:
        """(deepest phase owed coverage, whether ATM coverage is fired-only).

        Early-stopped stages must exhibit their stopper; the stopper is
        recognized from the constraint's declared response, so a record
        that mis-states the response taken still localizes correctly and
        fails pass iii rather than cascading here.
        """
        stage = record.stage
        if stage == "dispatched":
            return _PAA, False
        if stage == "interrupted":
            # a streamed call cut short: the monitor records firings only,
            # and the post-action pass never ran
            ok = any(e.site == "ATM" and e.outcome == "fired"
                     and self._declared_response(e.constraint_id)
                     in (ResponseKind.BLOCK, ResponseKind.ABORT)
                     for e in record.evaluated)
            if not ok:
                self.flag(index, None, "coverage",
                          "stage 'interrupted' but no at-the-model evaluation "
                          "shows an interrupting constraint")
            return _ATM, True
        if stage == "denied":
            if not any(_ruling_kind(e) == "deny" for e in record.evaluated):
                self.flag(index, None, "coverage",
                          "stage 'denied' but no evaluation carries a deny ruling")
            return _PAG_ESC, False
        if stage == "aborted":
            if any(_ruling_kind(e) == "timeout" for e in record.evaluated):
                return _PAG_ESC, False
            phases = [self._stopper_phase(e) for e in record.evaluated
                      if e.outcome in ("fired", "undecidable")
                      and self._declared_response(e.constraint_id) is ResponseKind.ABORT]
            phases = [p for p in phases if p is not None]
            if phases:
                return max(phases), False
            self.flag(index, None, "coverage",
                      "stage 'aborted' but no evaluation shows a timeout ruling "
                      "or an abort-response constraint")
            return _NOTHING_REACHED, False
        if stage == "blocked":
            phases = []
            for e in record.evaluated:
                declared = self._declared_response(e.constraint_id)
                c = self.by_id.get(e.constraint_id)
                blocking = (
                    (e.outcome == "fired" and declared is ResponseKind.BLOCK)
                    # an undecidable hard predicate blocks regardless of its
                    # declared response: default-deny
                    or (e.outcome == "undecidable" and c is not None
                        and c.constraint_class is ConstraintClass.HARD))
                if blocking:
                    phase = self._stopper_phase(e)
                    if phase is not None:
                        phases.append(phase)
            if phases:
                return max(phases), False
            self.flag(index, None, "coverage",
                      "stage 'blocked' but no evaluation shows a blocking constraint")
            return _NOTHING_REACHED, False
        self.flag(index, None, "coverage", f"unknown stage {stage!r}")
        return _NOTHING_REACHED, False

    # -- the four passes ------------------------------------------------------

    def check_record(self, index: int, record: TraceRecord,
                     rescued: frozenset = frozenset(),
                     expected_chain: Optional[tuple] = None) -> None:
        self.visits += 1
        self._check_attribution(index, record.attribution, expected_chain)
        reached, atm_fired_only = self._reached(index, record)

        covered = set()
        for event in record.evaluated:
            self.visits += 1
            covered.add(event.constraint_id)
            self._check_event(index, event)

        tool = record.action.tool
        for c in self.constraints:
            self.visits += 1
            guard = self.guards[c.id]
            if guard is not None and tool not in guard:
                continue
            phase = self.phases[c.id]
            if phase is None or phase > reached:
                continue
            if phase == _ATM and atm_fired_only:
                continue
            if c.id in covered or c.id in rescued:
                continue
            self.flag(index, c.id, "coverage",
                      f"applicable constraint {c.id!r} has no recorded "
                      "evaluation and no recorded rescue")

    def _check_event(self, index: int, event: ConstraintEvent) -> None:
        c = self.by_id.get(event.constraint_id)
        if c is None:
            self.flag(index, event.constraint_id, "class_placement",
                      f"evaluation names {event.constraint_id!r}, which the "
                      "specification does not declare")
            return
        try:
            site = VerificationSite(event.site)
        except ValueError:
            self.flag(index, c.id, "class_placement",
                      f"evaluation recorded at unknown site {event.site!r}")
            return
        if site not in COMPATIBLE_SITES[c.constraint_class]:
            self.flag(index, c.id, "class_placement",
                      f"{c.constraint_class.value} constraint evaluated at "
                      f"{site.value}, which cannot enforce that class")
        if event.outcome == "fired":
            declared = c.resp.kind.value
            if event.response_taken != declared:
                note = " (a recorded enforcement fault)" if event.fault else ""
                self.flag(index, c.id, "outcome_consistency",
                          f"fired constraint responded {event.response_taken!r}, "
                          f"declared response is {declared!r}{note}")

    def _check_attribution(self, index: int, attr, expected_chain) -> None:
        if not isinstance(attr, Mapping) or not attr:
            self.flag(index, None, "attribution", "record carries no attribution")
            return
        if "chain" in attr:
            chain = attr["chain"]
            if not isinstance(chain, Sequence) or not chain:
                self.flag(index, None, "attribution", "empty principal chain")
                return
            ids = []
            for entry in chain:
                entry_id = entry.get("id") if isinstance(entry, Mapping) else None
                if not entry_id:
                    self.flag(index, None, "attribution",
                              "chain entry without a principal id")
                    return
                ids.append(entry_id)
            if expected_chain is not None and tuple(ids) != expected_chain:
                self.flag(index, None, "attribution",
                          f"record chain {ids} diverges from its dispatch "
                          f"node {list(expected_chain)}")
            authorities = [entry.get("authority") for entry in chain]
            intersected = None
            if all(isinstance(a, Sequence) and not isinstance(a, str)
                   for a in authorities):
                intersected = set(authorities[0])
                for a in authorities[1:]:
                    intersected &= set(a)
                if not intersected:
                    self.flag(index, None, "attribution",
                              "chain intersects to an empty authority")
            claimed = attr.get("auth")
            if claimed is not None:
                if not claimed:
                    self.flag(index, None, "attribution",
                              "record claims an empty working authority")
                elif intersected is not None and not set(claimed) <= intersected:
                    extra = sorted(set(claimed) - intersected)
                    self.flag(index, None, "attribution",
                              f"working authority exceeds the chain "
                              f"intersection by {extra}")
            return
        principal = attr.get("principal")
        if not principal:
            self.flag(index, None, "attribution",
                      "attribution names no principal and no chain")
        authority = attr.get("authority")
        if not authority:
            self.flag(index, None, "attribution",
                      "attribution carries an empty authority set")

    # -- trace tree -----------------------------------------------------------

    def check_tree(self, tree: TraceTree) -> int:
        """Flatten leaf records in dispatch order; structure checks go to pass iv."""
        counter = {"index": 0}

        def visit(node: TraceTree, parent_ids: Optional[tuple],
                  rescued: frozenset) -> None:
            self.visits += 1
            ids = tuple(p.id for p in node.attribution.chain.entries)
            if parent_ids is not None and ids != parent_ids + (node.worker_id,):
                self.flag(-1, None, "attribution",
                          f"dispatch to {node.worker_id!r} does not extend its "
                          f"parent chain {list(parent_ids)} by itself")
            if node.summary is not None and not node.records:
                self.flag(-1, None, "attribution",
                          f"dispatch of {node.sub_task!r} folded worker records "
                          "into a summary; the trace is not attribution-preserving")
            rescued = rescued | frozenset(
                e.constraint_id for e in node.attribution.evaluated)
            for record in node.records:
                self.check_record(counter["index"], record, rescued=rescued,
                                  expected_chain=ids)
                counter["index"] += 1
            for child in node.children:
                visit(child, ids, rescued)

        visit(tree, None, frozenset())
        return counter["index"]


def check_correspondence(spec: Specification,
                         trace: Union[TraceTree, Sequence]) -> AuditReport:
    """Decide T |= Sigma; discrepancies are data, holds means none found.

    Accepts a dispatch tree, a sequence of in-memory records, or a
    sequence of parsed JSON record objects (each carrying the schema
    version it was written under). A record that cannot be interpreted
    is itself a discrepancy and checking continues; a schema mismatch is
    an error, because silently reading a different schema would make
    every later verdict unreliable.
    """
    started = time.perf_counter()
    checker = _Checker(spec)
    if isinstance(trace, TraceTree):
        checked = checker.check_tree(trace)
    else:
        checked = 0
        for index, item in enumerate(trace):
            checked += 1
            record = item
            if isinstance(item, Mapping):
                version = item.get("schema_version")
                if version != TRACE_SCHEMA_VERSION:
                    raise SchemaMismatch(
                        f"trace record {index} written under schema "
                        f"{version!r}, checker reads {TRACE_SCHEMA_VERSION!r}")
                try:
                    record = record_from_json_dict(item)
                except Exception as exc:
                    checker.flag(index, None, "coverage",
                                 f"malformed record: {exc}")
                    continue
            if not isinstance(record, TraceRecord):
                checker.flag(index, None, "coverage",
                             f"malformed record: expected a trace record, "
                             f"got {type(record).__name__}")
                continue
            checker.check_record(index, record)
    discrepancies = tuple(sorted(checker.discrepancies,
                                 key=lambda d: d.record_index))
    return AuditReport(
        holds=not discrepancies,
        discrepancies=discrepancies,
        records_checked=checked,
        constraints_checked=len(spec.constraints),
        visits=checker.visits,
        elapsed_s=time.perf_counter() - started)
