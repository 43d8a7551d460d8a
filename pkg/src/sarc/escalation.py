"""Escalation routing: operator pools, default-deny timeouts, M/M/c analytics.

Suspended actions queue FIFO for a pool of human operators. A ticket
whose service would begin after its reversibility window closes is
denied by default; an operator who does reach it rules approve, deny,
or modify. The closed-form Erlang-C analytics answer the staffing
question ahead of deployment: given c operators and a mean review time,
what escalation arrival rate keeps the expected wait inside the window?
"""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

from .spec_model import OperatorGroupSpec

__all__ = [
    "OperatorPool",
    "EscalationTicket",
    "RulingKind",
    "Ruling",
    "RulingPolicy",
    "QueueAnalytics",
    "EscalationRouter",
    "route",
    "erlang_c",
    "admissible_region",
    "QUEUE_CSV_COLUMNS",
]


class OperatorPool:
    """A group of interchangeable reviewers with an event calendar.

    Service times are exponential with the declared mean when an rng is
    supplied; without one, service takes exactly the mean, which keeps
    fixtures deterministic. `available=False` models the after-hours
    fallback: tickets are denied immediately instead of queueing.
    """

    def __init__(self, name: str, server_count: int, mean_service_s: float,
                 hours: str = "", rng: Optional[random.Random] = None,
                 available: bool = True):
        if server_count < 1:
            raise ValueError("server_count must be >= 1")
        if mean_service_s <= 0:
            raise ValueError("mean_service_s must be positive")
        self.name = name
        self.server_count = server_count
        self.mean_service_s = mean_service_s
        self.hours = hours
        self.rng = rng
        self.available = available
        self._server_free = [0.0] * server_count

    @classmethod
    def from_group_spec(cls, group: OperatorGroupSpec,
                        rng: Optional[random.Random] = None) -> "OperatorPool":
        return cls(group.name, group.server_count, group.mean_service_s,
                   hours=group.hours, rng=rng)

    @property
    def mu(self) -> float:
        return 1.0 / self.mean_service_s

    def draw_service_time(self) -> float:
        if self.rng is None:
            return self.mean_service_s
        return self.rng.expovariate(self.mu)

    def next_free_at(self) -> float:
        return min(self._server_free)

    def reset(self) -> None:
        self._server_free = [0.0] * self.server_count


class RulingKind(enum.Enum):
    APPROVE = "approve"
    DENY = "deny"
    MODIFY = "modify"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class Ruling:
    kind: RulingKind
    decided_at: float
    wait_s: float
    new_action: object = None  # populated for modify rulings only
    group: str = ""


# approve_all / deny_all, an explicit callable, or an iterator of
# (kind, new_action) pairs consumed one ticket at a time.
RulingPolicy = Union[str, Callable[["EscalationTicket"], tuple], Iterator[tuple]]


@dataclass(frozen=True)
class EscalationTicket:
    action: object
    constraint_id: str
    enqueue_time: float
    reversibility_window_s: float
    ruling_policy: RulingPolicy = "approve_all"

    def __post_init__(self):
        if self.reversibility_window_s <= 0:
            raise ValueError("reversibility window must be positive")


def _decide(policy: RulingPolicy, ticket: EscalationTicket) -> tuple:
    if policy == "approve_all":
        return (RulingKind.APPROVE, None)
    if policy == "deny_all":
        return (RulingKind.DENY, None)
    if callable(policy):
        kind, new_action = policy(ticket)
    else:
        kind, new_action = next(policy)
    if isinstance(kind, str):
        kind = RulingKind(kind)
    return (kind, new_action)


def route(ticket: EscalationTicket, pool: OperatorPool,
          clock: Optional[float] = None) -> Ruling:
    """Queue a ticket and produce exactly one ruling.

    Default-deny: when the earliest possible service start falls outside
    the reversibility window, the ticket times out at the window edge
    without occupying an operator. The window is never extended under
    load; a late approval of an already-finalized action would not be
    reversible.
    """
    enqueue = ticket.enqueue_time if clock is None else float(clock)
    if not pool.available:
        return Ruling(RulingKind.DENY, decided_at=enqueue, wait_s=0.0,
                      group=pool.name)
    start = max(enqueue, pool.next_free_at())
    wait = start - enqueue
    if wait > ticket.reversibility_window_s:
        deadline = enqueue + ticket.reversibility_window_s
        return Ruling(RulingKind.TIMEOUT, decided_at=deadline,
                      wait_s=ticket.reversibility_window_s, group=pool.name)
    server = min(range(pool.server_count), key=pool._server_free.__getitem__)
    service = pool.draw_service_time()
    pool._server_free[server] = start + service
    kind, new_action = _decide(ticket.ruling_policy, ticket)
    return Ruling(kind, decided_at=start + service, wait_s=wait,
                  new_action=new_action, group=pool.name)


class EscalationRouter:
    """Maps router-group names to pools; unknown groups are hard errors."""

    def __init__(self, pools: Iterable[OperatorPool]):
        self._pools = {p.name: p for p in pools}

    def pool(self, group: str) -> OperatorPool:
        if group not in self._pools:
            raise LookupError(
                f"escalation routed to undeclared group {group!r}; "
                f"declared: {sorted(self._pools)}")
        return self._pools[group]

    def route(self, group: str, ticket: EscalationTicket,
              clock: Optional[float] = None) -> Ruling:
        return route(ticket, self.pool(group), clock)

    def reset(self) -> None:
        for pool in self._pools.values():
            pool.reset()


# ---------------------------------------------------------------------------
# Closed-form M/M/c analytics
# ---------------------------------------------------------------------------

QUEUE_CSV_COLUMNS = ("c", "lambda", "mu", "rho", "p_wait", "w_q_s", "admissible")


@dataclass(frozen=True)
class QueueAnalytics:
    server_count: int
    lambda_e: float
    mu: float
    rho: float
    p_wait: float
    w_q: float  # math.inf marks divergence at rho >= 1
    admissible: bool

    def tail_wait_probability(self, t_s: float) -> float:
        """P(queue wait > t): Erlang-C tail, exponential beyond p_wait."""
        if self.rho >= 1.0:
            return 1.0
        rate = self.server_count * self.mu - self.lambda_e
        return self.p_wait * math.exp(-rate * t_s)

    def as_row(self) -> tuple:
        return (self.server_count, self.lambda_e, self.mu, self.rho,
                self.p_wait, self.w_q, self.admissible)


def erlang_c(c: int, lam: float, mu: float,
             tau_rev_s: Optional[float] = None) -> QueueAnalytics:
    """Waiting probability and expected queue wait for an M/M/c pool.

    With offered load a = lam/mu and utilization rho = a/c:

        P_wait = (a^c / c!) / (1 - rho)
                 -----------------------------------------
                 sum_{k<c} a^k / k!  +  (a^c / c!) / (1 - rho)

        W_q = P_wait / (c mu - lam)

    At rho >= 1 the queue has no steady state; W_q is reported as
    divergent and the point is inadmissible for any window.
    """
    if c < 1:
        raise ValueError("c must be >= 1")
    if lam <= 0 or mu <= 0:
        raise ValueError("rates must be positive")
    a = lam / mu
    rho = a / c
    if rho >= 1.0:
        return QueueAnalytics(c, lam, mu, rho, p_wait=1.0, w_q=math.inf,
                              admissible=False)
    tail = (a ** c / math.factorial(c)) / (1.0 - rho)
    p_wait = tail / (sum(a ** k / math.factorial(k) for k in range(c)) + tail)
    w_q = p_wait / (c * mu - lam)
    admissible = w_q < tau_rev_s if tau_rev_s is not None else True
    return QueueAnalytics(c, lam, mu, rho, p_wait, w_q, admissible)


def admissible_region(pool: OperatorPool, lambda_grid: Sequence[float],
                      tau_rev_s: float) -> list:
    """Analytics at each arrival rate; the admissible flag marks W_q < tau."""
    if not lambda_grid:
        raise ValueError("lambda grid must be non-empty")
    return [erlang_c(pool.server_count, lam, pool.mu, tau_rev_s=tau_rev_s)
            for lam in lambda_grid]
