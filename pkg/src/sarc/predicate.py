"""SPEL-mini: a deterministic, bounded-time constraint predicate language.

Grammar (EBNF)::

    expr  := or
    or    := and ("||" and)*
    and   := cmp ("&&" cmp)*
    cmp   := sum (("==" | "!=" | "<" | "<=" | ">" | ">=") sum)?
    sum   := term (("+" | "-") term)*
    term  := unary (("*" | "/") unary)*
    unary := "!" unary | atom
    atom  := literal | path | builtin "(" args ")" | "(" expr ")"

Literals are numbers, single- or double-quoted text, durations
(``<int>s|m|h|d``), ``true``/``false`` and ``null``.  Builtins are
``tool(a)``, ``amount(a)``, ``rolling_24h_spend(actor)``,
``age(timestamp)`` and ``is_null(x)``; there are no user-defined
functions, quantifiers or loops, so evaluation visits each AST node at
most once and is therefore bounded.

Money values are integer euro cents internally.  A bare numeric literal
that meets a money value in a comparison or arithmetic position is read
as euros, so ``action.args.amount >= 50000`` means "at least fifty
thousand euros" and 49,999.99 EUR (4,999,999 cents) stays below it.

``null`` equals only an absent-but-declared optional field.  A path the
context never declared is not null; it makes the whole predicate
*undecidable*, which callers receive as a distinct third outcome rather
than a boolean.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

__all__ = [
    "Money",
    "Duration",
    "PredicateExpr",
    "EvalContext",
    "EvalOutcome",
    "EvalResult",
    "PredicateError",
    "PredicateSyntaxError",
    "PredicateTypeError",
    "parse_predicate",
    "eval_predicate",
    "free_paths",
    "free_oracles",
    "to_source",
]

BUILTINS = ("tool", "amount", "rolling_24h_spend", "age", "is_null")

_DURATION_UNIT_S = {"s": 1, "m": 60, "h": 3600, "d": 86400}


class PredicateError(Exception):
    """Base class for SPEL-mini errors."""


class PredicateSyntaxError(PredicateError):
    def __init__(self, message: str, pos: int, line: int, col: int):
        super().__init__(f"{message} at line {line}, column {col}")
        self.pos = pos
        self.line = line
        self.col = col


class PredicateTypeError(PredicateError):
    """Operand kinds do not combine; a spec authoring bug, not undecidability."""


class Money:
    """Integer euro cents. Exact at thresholds, immune to float drift."""

    __slots__ = ("cents",)

    def __init__(self, cents: int):
        self.cents = int(cents)

    @classmethod
    def from_euros(cls, euros: Union[int, float]) -> "Money":
        return cls(round(euros * 100))

    @property
    def euros(self) -> float:
        return self.cents / 100.0

    def __repr__(self) -> str:
        return f"Money({self.cents})"

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Money) and self.cents == other.cents

    def __hash__(self) -> int:
        return hash(("Money", self.cents))


class Duration:
    """A span of seconds, produced by duration literals and ``age``."""

    __slots__ = ("seconds",)

    def __init__(self, seconds: float):
        self.seconds = seconds

    def __repr__(self) -> str:
        return f"Duration({self.seconds})"

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Duration) and self.seconds == other.seconds

    def __hash__(self) -> int:
        return hash(("Duration", self.seconds))


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------
# Node positions aid error reporting but never participate in equality,
# so structurally identical predicates compare equal regardless of the
# whitespace they were parsed from.


@dataclass(frozen=True)
class Literal:
    value: object
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Path:
    parts: tuple
    pos: int = field(default=0, compare=False)

    @property
    def dotted(self) -> str:
        return ".".join(self.parts)


@dataclass(frozen=True)
class Unary:
    op: str
    operand: "Node"
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Node"
    right: "Node"
    pos: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple
    pos: int = field(default=0, compare=False)


Node = Union[Literal, Path, Unary, Binary, Call]


@dataclass(frozen=True)
class PredicateExpr:
    """A parsed predicate: the AST plus the source it came from."""

    root: Node
    source: str = field(default="", compare=False)

    def __str__(self) -> str:
        return to_source(self.root)


# ---------------------------------------------------------------------------
# Tokenizer / parser
# ---------------------------------------------------------------------------

_COMPARE_OPS = ("==", "!=", "<=", ">=", "<", ">")
_TWO_CHAR = ("&&", "||", "==", "!=", "<=", ">=")


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.pos = 0
        self.line = 1
        self.col = 1

    def error(self, message: str) -> PredicateSyntaxError:
        return PredicateSyntaxError(message, self.pos, self.line, self.col)

    def _advance(self, n: int = 1) -> None:
        for _ in range(n):
            if self.pos < len(self.source) and self.source[self.pos] == "\n":
                self.line += 1
                self.col = 1
            else:
                self.col += 1
            self.pos += 1

    def _skip_ws(self) -> None:
        while self.pos < len(self.source) and self.source[self.pos] in " \t\r\n":
            self._advance()

    def _peek(self, text: str) -> bool:
        return self.source.startswith(text, self.pos)

    def _accept(self, text: str) -> bool:
        self._skip_ws()
        if self._peek(text):
            self._advance(len(text))
            return True
        return False

    def _expect(self, text: str) -> None:
        if not self._accept(text):
            raise self.error(f"expected '{text}'")

    def parse(self) -> Node:
        node = self.parse_or()
        self._skip_ws()
        if self.pos < len(self.source):
            raise self.error(f"unexpected trailing input {self.source[self.pos:]!r}")
        return node

    def parse_or(self) -> Node:
        node = self.parse_and()
        while self._accept("||"):
            node = Binary("||", node, self.parse_and(), pos=self.pos)
        return node

    def parse_and(self) -> Node:
        node = self.parse_cmp()
        while self._accept("&&"):
            node = Binary("&&", node, self.parse_cmp(), pos=self.pos)
        return node

    def parse_cmp(self) -> Node:
        node = self.parse_sum()
        self._skip_ws()
        for op in _COMPARE_OPS:
            # '<' must not swallow the '<' of '<='; ordered probe handles it.
            if self._peek(op):
                self._advance(len(op))
                return Binary(op, node, self.parse_sum(), pos=self.pos)
        return node

    def parse_sum(self) -> Node:
        node = self.parse_term()
        while True:
            self._skip_ws()
            if self._peek("+"):
                self._advance()
                node = Binary("+", node, self.parse_term(), pos=self.pos)
            elif self._peek("-"):
                self._advance()
                node = Binary("-", node, self.parse_term(), pos=self.pos)
            else:
                return node

    def parse_term(self) -> Node:
        node = self.parse_unary()
        while True:
            self._skip_ws()
            if self._peek("*"):
                self._advance()
                node = Binary("*", node, self.parse_unary(), pos=self.pos)
            elif self._peek("/"):
                self._advance()
                node = Binary("/", node, self.parse_unary(), pos=self.pos)
            else:
                return node

    def parse_unary(self) -> Node:
        self._skip_ws()
        # '!' binds tighter than any binary op but must not eat '!='.
        if self._peek("!") and not self._peek("!="):
            start = self.pos
            self._advance()
            return Unary("!", self.parse_unary(), pos=start)
        return self.parse_atom()

    def parse_atom(self) -> Node:
        self._skip_ws()
        if self.pos >= len(self.source):
            raise self.error("unexpected end of input")
        ch = self.source[self.pos]
        if ch == "(":
            self._advance()
            node = self.parse_or()
            self._expect(")")
            return node
        if ch in "'\"":
            return self._parse_string(ch)
        if ch.isdigit():
            return self._parse_number()
        if ch.isalpha() or ch == "_":
            return self._parse_ident()
        raise self.error(f"unexpected character {ch!r}")

    def _parse_string(self, quote: str) -> Literal:
        start = self.pos
        self._advance()
        chars = []
        while self.pos < len(self.source) and self.source[self.pos] != quote:
            chars.append(self.source[self.pos])
            self._advance()
        if self.pos >= len(self.source):
            raise self.error("unterminated string literal")
        self._advance()
        return Literal("".join(chars), pos=start)

    def _parse_number(self) -> Literal:
        start = self.pos
        while self.pos < len(self.source) and self.source[self.pos].isdigit():
            self._advance()
        is_float = False
        if self.pos < len(self.source) and self.source[self.pos] == ".":
            nxt = self.source[self.pos + 1 : self.pos + 2]
            if nxt.isdigit():
                is_float = True
                self._advance()
                while self.pos < len(self.source) and self.source[self.pos].isdigit():
                    self._advance()
        text = self.source[start : self.pos]
        if not is_float and self.pos < len(self.source) and self.source[self.pos] in "smhd":
            unit = self.source[self.pos]
            after = self.source[self.pos + 1 : self.pos + 2]
            if not (after.isalnum() or after == "_" or after == "."):
                self._advance()
                return Literal(Duration(int(text) * _DURATION_UNIT_S[unit]), pos=start)
        value: Union[int, float] = float(text) if is_float else int(text)
        return Literal(value, pos=start)

    def _parse_ident(self) -> Node:
        start = self.pos
        word = self._read_word()
        if word == "true":
            return Literal(True, pos=start)
        if word == "false":
            return Literal(False, pos=start)
        if word == "null":
            return Literal(None, pos=start)
        self._skip_ws()
        if self._peek("("):
            if word not in BUILTINS:
                raise self.error(f"unknown builtin {word!r}")
            self._advance()
            args = self._parse_args()
            return Call(word, tuple(args), pos=start)
        parts = [word]
        while self._peek("."):
            self._advance()
            if self.pos >= len(self.source) or not (
                self.source[self.pos].isalpha() or self.source[self.pos] == "_"
            ):
                raise self.error("expected identifier after '.'")
            parts.append(self._read_word())
        return Path(tuple(parts), pos=start)

    def _read_word(self) -> str:
        start = self.pos
        while self.pos < len(self.source) and (
            self.source[self.pos].isalnum() or self.source[self.pos] == "_"
        ):
            self._advance()
        return self.source[start : self.pos]

    def _parse_args(self) -> list:
        args = []
        self._skip_ws()
        if self._accept(")"):
            return args
        while True:
            args.append(self._parse_arg())
            self._skip_ws()
            if self._accept(")"):
                return args
            self._expect(",")

    def _parse_arg(self) -> Node:
        # Accept `name=value` argument sugar and keep only the value; the
        # grammar proper is positional and canonical output drops the name.
        self._skip_ws()
        mark = (self.pos, self.line, self.col)
        if self.pos < len(self.source) and (
            self.source[self.pos].isalpha() or self.source[self.pos] == "_"
        ):
            word = self._read_word()
            self._skip_ws()
            if self._peek("=") and not self._peek("=="):
                self._advance()
                return self.parse_or()
            self.pos, self.line, self.col = mark
        return self.parse_or()


def parse_predicate(source: str) -> PredicateExpr:
    """Parse SPEL-mini source into a PredicateExpr.

    Raises PredicateSyntaxError (with position) on malformed input and on
    calls to builtins outside the fixed set.
    """
    if not source or not source.strip():
        raise PredicateSyntaxError("empty predicate", 0, 1, 1)
    return PredicateExpr(root=_Parser(source).parse(), source=source)


# ---------------------------------------------------------------------------
# Static analysis
# ---------------------------------------------------------------------------


def _walk(node: Node):
    yield node
    if isinstance(node, Unary):
        yield from _walk(node.operand)
    elif isinstance(node, Binary):
        yield from _walk(node.left)
        yield from _walk(node.right)
    elif isinstance(node, Call):
        for arg in node.args:
            yield from _walk(arg)


def _node_count(node: Node) -> int:
    return sum(1 for _ in _walk(node))


def free_paths(expr: Union[PredicateExpr, Node]) -> frozenset:
    """The exact set of field paths the predicate reads.

    Builtins contribute the paths of their arguments; ``tool``/``amount``
    over the action record additionally read ``action.tool`` /
    ``action.args.amount``.  A predicate is decidable at a layer exactly
    when this set is covered by the paths available there.
    """
    root = expr.root if isinstance(expr, PredicateExpr) else expr
    paths = set()
    for node in _walk(root):
        if isinstance(node, Path):
            paths.add(node.dotted)
        elif isinstance(node, Call):
            if node.name == "tool" and _is_action_path(node.args):
                paths.add("action.tool")
            elif node.name == "amount" and _is_action_path(node.args):
                paths.add("action.args.amount")
    # The record path 'action' alone carries no data; its projections do.
    paths.discard("action")
    return frozenset(paths)


def _is_action_path(args: tuple) -> bool:
    return len(args) == 1 and isinstance(args[0], Path) and args[0].parts == ("action",)


def free_oracles(expr: Union[PredicateExpr, Node]) -> frozenset:
    """Names of context oracles the predicate depends on beyond plain paths."""
    root = expr.root if isinstance(expr, PredicateExpr) else expr
    return frozenset(
        node.name
        for node in _walk(root)
        if isinstance(node, Call) and node.name == "rolling_24h_spend"
    )


def to_source(node: Union[PredicateExpr, Node]) -> str:
    """Canonical source form: single spaces, positional arguments."""
    if isinstance(node, PredicateExpr):
        node = node.root
    if isinstance(node, Literal):
        v = node.value
        if v is None:
            return "null"
        if v is True:
            return "true"
        if v is False:
            return "false"
        if isinstance(v, str):
            return "'" + v + "'"
        if isinstance(v, Duration):
            s = int(v.seconds)
            for unit in ("d", "h", "m", "s"):
                size = _DURATION_UNIT_S[unit]
                if s % size == 0 and s // size > 0:
                    return f"{s // size}{unit}"
            return f"{s}s"
        return repr(v)
    if isinstance(node, Path):
        return node.dotted
    if isinstance(node, Unary):
        return "!" + _maybe_paren(node.operand, node)
    if isinstance(node, Binary):
        left = _maybe_paren(node.left, node)
        right = _maybe_paren(node.right, node)
        return f"{left} {node.op} {right}"
    if isinstance(node, Call):
        return node.name + "(" + ", ".join(to_source(a) for a in node.args) + ")"
    raise TypeError(f"not an AST node: {node!r}")


_PRECEDENCE = {"||": 1, "&&": 2, "==": 3, "!=": 3, "<": 3, "<=": 3, ">": 3, ">=": 3,
               "+": 4, "-": 4, "*": 5, "/": 5}


def _maybe_paren(child: Node, parent: Node) -> str:
    text = to_source(child)
    if isinstance(child, Binary):
        child_prec = _PRECEDENCE[child.op]
        parent_prec = _PRECEDENCE[parent.op] if isinstance(parent, Binary) else 6
        # Comparisons are non-associative (cmp takes at most one operator),
        # so a comparison nested in a comparison always needs parentheses.
        both_cmp = (
            isinstance(parent, Binary)
            and parent.op in _COMPARE_OPS
            and child.op in _COMPARE_OPS
        )
        if child_prec < parent_prec or both_cmp or (
            isinstance(parent, Binary) and child_prec == parent_prec and child is parent.right
        ):
            return "(" + text + ")"
    return text


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


class EvalOutcome(enum.Enum):
    FIRED = "fired"
    NOT_FIRED = "not_fired"
    UNDECIDABLE = "undecidable"


@dataclass(frozen=True)
class EvalResult:
    outcome: EvalOutcome
    missing_paths: frozenset = frozenset()
    # Node touches in the value pass; short-circuiting keeps this at or
    # below the AST node count, which is the boundedness guarantee.
    visits: int = 0

    @property
    def fired(self) -> bool:
        return self.outcome is EvalOutcome.FIRED


@dataclass(frozen=True)
class EvalContext:
    """Everything a predicate may read.

    state_fields maps dotted paths to values; a declared-but-absent
    optional field is present with value None.  Paths under ``action.``
    resolve into the action mapping instead.
    """

    state_fields: Mapping[str, object]
    action_tool: Optional[str] = None
    action_args: Mapping[str, object] = field(default_factory=dict)
    clock_now: float = 0.0
    rolling_window_oracle: Optional[Callable[[str], Money]] = None

    def available_paths(self) -> frozenset:
        paths = set(self.state_fields)
        if self.action_tool is not None:
            paths.add("action.tool")
            paths.add("action.plan_index")
            for arg in self.action_args:
                paths.add(f"action.args.{arg}")
        return frozenset(paths)

    def resolve(self, dotted: str) -> object:
        if dotted == "action.tool":
            return self.action_tool
        if dotted.startswith("action.args."):
            return self.action_args[dotted[len("action.args."):]]
        return self.state_fields[dotted]


_ORACLE_MARKERS = {"rolling_24h_spend": "rolling_24h_spend()"}


def eval_predicate(expr: PredicateExpr, ctx: EvalContext) -> EvalResult:
    """Tri-state evaluation: fired, not fired, or undecidable.

    Decidability is a static property: the result is undecidable exactly
    when some referenced path (or required oracle) is not declared in the
    context, independent of the values present.  Decidable predicates then
    evaluate with short-circuit boolean semantics, so a true left disjunct
    shields a right disjunct that would be a type error (the null-guard
    idiom ``x == null || age(x) < 90d`` relies on this).
    """
    missing = set(free_paths(expr) - ctx.available_paths())
    if "rolling_24h_spend" in free_oracles(expr) and ctx.rolling_window_oracle is None:
        missing.add(_ORACLE_MARKERS["rolling_24h_spend"])
    if missing:
        return EvalResult(EvalOutcome.UNDECIDABLE, frozenset(missing))
    evaluator = _Evaluator(ctx)
    value = evaluator.eval(expr.root)
    if not isinstance(value, bool):
        raise PredicateTypeError(
            f"predicate evaluated to {type(value).__name__}, expected boolean"
        )
    outcome = EvalOutcome.FIRED if value else EvalOutcome.NOT_FIRED
    return EvalResult(outcome, frozenset(), visits=evaluator.visits)


class _Evaluator:
    def __init__(self, ctx: EvalContext):
        self.ctx = ctx
        self.visits = 0

    def eval(self, node: Node):
        self.visits += 1
        if isinstance(node, Literal):
            return node.value
        if isinstance(node, Path):
            return self.ctx.resolve(node.dotted)
        if isinstance(node, Unary):
            operand = self.eval(node.operand)
            if not isinstance(operand, bool):
                raise PredicateTypeError("'!' needs a boolean operand")
            return not operand
        if isinstance(node, Binary):
            return self._binary(node)
        if isinstance(node, Call):
            return self._call(node)
        raise TypeError(f"not an AST node: {node!r}")

    def _binary(self, node: Binary):
        op = node.op
        if op == "&&":
            left = self._as_bool(self.eval(node.left), "&&")
            if not left:
                return False
            return self._as_bool(self.eval(node.right), "&&")
        if op == "||":
            left = self._as_bool(self.eval(node.left), "||")
            if left:
                return True
            return self._as_bool(self.eval(node.right), "||")
        left = self.eval(node.left)
        right = self.eval(node.right)
        if op in ("==", "!="):
            equal = _equals(left, right)
            return equal if op == "==" else not equal
        if op in ("<", "<=", ">", ">="):
            return _order(op, left, right)
        return _arith(op, left, right)

    @staticmethod
    def _as_bool(value, op: str) -> bool:
        if not isinstance(value, bool):
            raise PredicateTypeError(f"'{op}' needs boolean operands")
        return value

    def _call(self, node: Call):
        name = node.name
        if name == "tool":
            self._require_action_arg(node)
            self.visits += 1
            return self.ctx.action_tool
        if name == "amount":
            self._require_action_arg(node)
            self.visits += 1
            value = self.ctx.action_args.get("amount")
            if not isinstance(value, Money):
                raise PredicateTypeError("amount() found a non-money argument value")
            return value
        if name == "rolling_24h_spend":
            self._require_arity(node, 1)
            actor = self.eval(node.args[0])
            if not isinstance(actor, str):
                raise PredicateTypeError("rolling_24h_spend() needs a principal id")
            return self.ctx.rolling_window_oracle(actor)
        if name == "age":
            self._require_arity(node, 1)
            ts = self.eval(node.args[0])
            if not isinstance(ts, (int, float)) or isinstance(ts, bool):
                raise PredicateTypeError("age() needs a timestamp")
            return Duration(self.ctx.clock_now - ts)
        if name == "is_null":
            self._require_arity(node, 1)
            return self.eval(node.args[0]) is None
        raise PredicateError(f"unknown builtin {name!r}")

    @staticmethod
    def _require_arity(node: Call, n: int) -> None:
        if len(node.args) != n:
            raise PredicateTypeError(f"{node.name}() takes {n} argument(s)")

    def _require_action_arg(self, node: Call) -> None:
        self._require_arity(node, 1)
        if not _is_action_path(node.args):
            raise PredicateTypeError(f"{node.name}() takes the action record")


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _coerce_money_pair(left, right):
    if isinstance(left, Money) and isinstance(right, Money):
        return left, right
    if isinstance(left, Money) and _is_number(right):
        return left, Money.from_euros(right)
    if _is_number(left) and isinstance(right, Money):
        return Money.from_euros(left), right
    return None


def _equals(left, right) -> bool:
    if left is None or right is None:
        return left is None and right is None
    pair = _coerce_money_pair(left, right)
    if pair:
        return pair[0].cents == pair[1].cents
    if isinstance(left, Duration) and isinstance(right, Duration):
        return left.seconds == right.seconds
    if _is_number(left) and _is_number(right):
        return left == right
    if isinstance(left, str) and isinstance(right, str):
        return left == right
    if isinstance(left, bool) and isinstance(right, bool):
        return left == right
    raise PredicateTypeError(
        f"cannot compare {type(left).__name__} with {type(right).__name__}"
    )


def _order(op: str, left, right) -> bool:
    pair = _coerce_money_pair(left, right)
    if pair:
        a, b = pair[0].cents, pair[1].cents
    elif isinstance(left, Duration) and isinstance(right, Duration):
        a, b = left.seconds, right.seconds
    elif _is_number(left) and _is_number(right):
        a, b = left, right
    else:
        raise PredicateTypeError(
            f"cannot order {type(left).__name__} against {type(right).__name__}"
        )
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    return a >= b


def _arith(op: str, left, right):
    pair = _coerce_money_pair(left, right)
    if pair is not None and op in ("+", "-"):
        a, b = pair
        cents = a.cents + b.cents if op == "+" else a.cents - b.cents
        return Money(cents)
    if isinstance(left, Money) and _is_number(right) and op in ("*", "/"):
        cents = left.cents * right if op == "*" else left.cents / right
        return Money(round(cents))
    if isinstance(left, Money) and isinstance(right, Money) and op == "/":
        return left.cents / right.cents
    if isinstance(left, Duration) and isinstance(right, Duration) and op in ("+", "-"):
        s = left.seconds + right.seconds if op == "+" else left.seconds - right.seconds
        return Duration(s)
    if _is_number(left) and _is_number(right):
        if op == "+":
            return left + right
        if op == "-":
            return left - right
        if op == "*":
            return left * right
        if right == 0:
            raise PredicateTypeError("division by zero")
        return left / right
    raise PredicateTypeError(
        f"cannot apply '{op}' to {type(left).__name__} and {type(right).__name__}"
    )


def node_count(expr: Union[PredicateExpr, Node]) -> int:
    """Size of the AST; the static bound on evaluation work."""
    root = expr.root if isinstance(expr, PredicateExpr) else expr
    return _node_count(root)
