"""
Expression trees of the query language: typing and evaluation.

Evaluation happens in the engine's value domain, where timestamps and
intervals are integer epoch milliseconds. NULL is ``None`` and boolean
operators follow three-valued logic.
"""

import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

from odf_desk.content_store import INT64_MAX, INT64_MIN
from odf_desk.errors import (
    AmbiguousColumn,
    ArithmeticOverflow,
    QueryAnalysisError,
    QueryTypeError,
    UnknownColumn,
    UnknownInputAlias,
)
from odf_desk.timestamps import format_timestamp, to_millis

INTERVAL_UNITS = {
    "SECOND": 1_000,
    "MINUTE": 60_000,
    "HOUR": 3_600_000,
    "DAY": 86_400_000,
    "WEEK": 604_800_000,
}

AGGREGATE_FUNCTIONS = ("COUNT", "SUM", "MIN", "MAX", "AVG")

COMPARISON_OPS = ("=", "<>", "<", "<=", ">", ">=")
ARITHMETIC_OPS = ("+", "-", "*", "/")
NUMERIC_TYPES = ("int64", "float64")


class TypeInfo(NamedTuple):
    type: str
    nullable: bool


class Expr:
    """Base of all expression nodes."""

    def evaluate(self, row: Dict[str, Any]) -> Any:
        raise NotImplementedError

    def to_sql(self) -> str:
        raise NotImplementedError

    def children(self) -> Tuple["Expr", ...]:
        return ()

    def contains_aggregate(self) -> bool:
        return isinstance(self, Aggregate) or any(child.contains_aggregate() for child in self.children())


@dataclass(frozen=True)
class ColumnRef(Expr):
    name: str
    qualifier: Optional[str] = None
    key: Optional[str] = field(default=None, compare=False)

    def evaluate(self, row):
        return row.get(self.key if self.key is not None else self.name)

    def to_sql(self):
        return f"{self.qualifier}.{self.name}" if self.qualifier else self.name


@dataclass(frozen=True)
class Literal(Expr):
    value: Any
    type: str

    def evaluate(self, row):
        if self.type == "timestamp":
            return to_millis(self.value)
        return self.value

    def to_sql(self):
        if self.value is None:
            return "NULL"
        if self.type == "bool":
            return "TRUE" if self.value else "FALSE"
        if self.type == "string":
            return "'" + self.value.replace("'", "''") + "'"
        if self.type == "timestamp":
            return f"TIMESTAMP '{format_timestamp(self.value)}'"
        return repr(self.value)


@dataclass(frozen=True)
class IntervalLiteral(Expr):
    amount: int
    unit: str

    @property
    def millis(self) -> int:
        return self.amount * INTERVAL_UNITS[self.unit]

    def evaluate(self, row):
        return self.millis

    def to_sql(self):
        return f"INTERVAL '{self.amount}' {self.unit}"


@dataclass(frozen=True)
class Unary(Expr):
    op: str
    operand: Expr

    def children(self):
        return (self.operand,)

    def evaluate(self, row):
        value = self.operand.evaluate(row)
        if value is None:
            return None
        if self.op == "NOT":
            return not value
        return _checked(-value)

    def to_sql(self):
        if self.op == "NOT":
            return f"(NOT {self.operand.to_sql()})"
        return f"(-{self.operand.to_sql()})"


@dataclass(frozen=True)
class Binary(Expr):
    op: str
    left: Expr
    right: Expr

    def children(self):
        return (self.left, self.right)

    def evaluate(self, row):
        if self.op == "AND":
            return _and(self.left.evaluate(row), self.right.evaluate(row))
        if self.op == "OR":
            return _or(self.left.evaluate(row), self.right.evaluate(row))
        left = self.left.evaluate(row)
        right = self.right.evaluate(row)
        if left is None or right is None:
            return None
        if self.op in COMPARISON_OPS:
            return _compare(self.op, left, right)
        return _arithmetic(self.op, left, right)

    def to_sql(self):
        return f"({self.left.to_sql()} {self.op} {self.right.to_sql()})"


@dataclass(frozen=True)
class IsNull(Expr):
    operand: Expr
    negated: bool = False

    def children(self):
        return (self.operand,)

    def evaluate(self, row):
        is_null = self.operand.evaluate(row) is None
        return not is_null if self.negated else is_null

    def to_sql(self):
        return f"({self.operand.to_sql()} IS {'NOT ' if self.negated else ''}NULL)"


@dataclass(frozen=True)
class Between(Expr):
    operand: Expr
    low: Expr
    high: Expr

    def children(self):
        return (self.operand, self.low, self.high)

    def evaluate(self, row):
        value = self.operand.evaluate(row)
        low = self.low.evaluate(row)
        high = self.high.evaluate(row)
        lower = None if value is None or low is None else low <= value
        upper = None if value is None or high is None else value <= high
        return _and(lower, upper)

    def to_sql(self):
        return f"({self.operand.to_sql()} BETWEEN {self.low.to_sql()} AND {self.high.to_sql()})"


@dataclass(frozen=True)
class Aggregate(Expr):
    func: str
    argument: Optional[Expr] = None

    def children(self):
        return () if self.argument is None else (self.argument,)

    def evaluate(self, row):
        raise QueryAnalysisError(f"{self.func} cannot be evaluated per row")

    def to_sql(self):
        return f"{self.func}({'*' if self.argument is None else self.argument.to_sql()})"


def _and(left: Optional[bool], right: Optional[bool]) -> Optional[bool]:
    if left is False or right is False:
        return False
    if left is None or right is None:
        return None
    return True


def _or(left: Optional[bool], right: Optional[bool]) -> Optional[bool]:
    if left is True or right is True:
        return True
    if left is None or right is None:
        return None
    return False


def _compare(op: str, left: Any, right: Any) -> bool:
    if op == "=":
        return left == right
    if op == "<>":
        return left != right
    if op == "<":
        return left < right
    if op == "<=":
        return left <= right
    if op == ">":
        return left > right
    return left >= right


def _checked(value: Any) -> Any:
    if isinstance(value, bool):
        return value
    if isinstance(value, int) and not INT64_MIN <= value <= INT64_MAX:
        raise ArithmeticOverflow(f"integer result {value} overflows int64")
    if isinstance(value, float) and not math.isfinite(value):
        raise ArithmeticOverflow("floating point result is not finite")
    return value


def _arithmetic(op: str, left: Any, right: Any) -> Any:
    if op == "+":
        return _checked(left + right)
    if op == "-":
        return _checked(left - right)
    if op == "*":
        return _checked(left * right)
    if right == 0:
        return None
    if isinstance(left, int) and isinstance(right, int):
        quotient = abs(left) // abs(right)
        return _checked(quotient if (left >= 0) == (right > 0) else -quotient)
    return _checked(left / right)


@dataclass(frozen=True)
class ScopeColumn:
    alias: str
    name: str
    type: str
    nullable: bool
    key: str


class Scope:
    """Columns visible to expressions, addressable by name or ``alias.name``."""

    def __init__(self, aliases: Sequence[str], columns: Sequence[ScopeColumn]):
        self.aliases = tuple(aliases)
        self.columns = list(columns)

    def resolve(self, ref: ColumnRef) -> ScopeColumn:
        if ref.qualifier is not None and ref.qualifier not in self.aliases:
            raise UnknownInputAlias(f"unknown input alias {ref.qualifier!r}")
        matches = [
            column
            for column in self.columns
            if column.name == ref.name and (ref.qualifier is None or column.alias == ref.qualifier)
        ]
        if not matches:
            raise UnknownColumn(f"unknown column {ref.to_sql()!r}")
        if len(matches) > 1:
            raise AmbiguousColumn(f"column {ref.name!r} exists in inputs {sorted(c.alias for c in matches)}")
        return matches[0]


def _require(info: TypeInfo, expected: Sequence[str], what: str) -> None:
    if info.type not in expected:
        raise QueryTypeError(f"{what} expects {' or '.join(expected)}, got {info.type}")


def _reject_null_literal(expr: Expr, context: str) -> None:
    if isinstance(expr, Literal) and expr.value is None:
        hint = "; use IS NULL / IS NOT NULL" if context == "a comparison" else ""
        raise QueryTypeError(f"NULL literal is not allowed in {context}{hint}")


def _comparable(left: TypeInfo, right: TypeInfo, op: str) -> None:
    if left.type in NUMERIC_TYPES and right.type in NUMERIC_TYPES:
        return
    if left.type != right.type or left.type == "interval":
        raise QueryTypeError(f"cannot compare {left.type} with {right.type}")
    if left.type == "bool" and op not in ("=", "<>"):
        raise QueryTypeError(f"operator {op} is not defined for bool")


def _arithmetic_type(op: str, left: TypeInfo, right: TypeInfo) -> str:
    if left.type in NUMERIC_TYPES and right.type in NUMERIC_TYPES:
        return "int64" if left.type == right.type == "int64" else "float64"
    if op in ("+", "-") and left.type == "timestamp" and right.type == "interval":
        return "timestamp"
    if op == "+" and left.type == "interval" and right.type == "timestamp":
        return "timestamp"
    raise QueryTypeError(f"operator {op} is not defined for {left.type} and {right.type}")


def _aggregate_type(func: str, argument: Optional[TypeInfo]) -> TypeInfo:
    if func == "COUNT":
        return TypeInfo("int64", False)
    if func in ("SUM", "AVG"):
        _require(argument, NUMERIC_TYPES, func)
        return TypeInfo("float64" if func == "AVG" else argument.type, argument.nullable)
    _require(argument, ("string", "int64", "float64", "timestamp"), func)
    return TypeInfo(argument.type, argument.nullable)


def analyze_expr(expr: Expr, scope: Scope, allow_aggregates: bool = False) -> Tuple[Expr, TypeInfo]:
    """Resolve column references and infer the type of ``expr``."""
    if isinstance(expr, ColumnRef):
        column = scope.resolve(expr)
        return replace(expr, key=column.key), TypeInfo(column.type, column.nullable)
    if isinstance(expr, Literal):
        if expr.value is None:
            _reject_null_literal(expr, "this position")
        return expr, TypeInfo(expr.type, False)
    if isinstance(expr, IntervalLiteral):
        return expr, TypeInfo("interval", False)
    if isinstance(expr, Aggregate):
        if not allow_aggregates:
            raise QueryAnalysisError(f"aggregate {expr.func} is only allowed in windowed select lists")
        if expr.argument is None:
            if expr.func != "COUNT":
                raise QueryAnalysisError(f"{expr.func}(*) is not supported")
            return expr, _aggregate_type("COUNT", None)
        if expr.argument.contains_aggregate():
            raise QueryAnalysisError("aggregates cannot be nested")
        argument, info = analyze_expr(expr.argument, scope)
        return replace(expr, argument=argument), _aggregate_type(expr.func, info)
    if isinstance(expr, Unary):
        operand, info = analyze_expr(expr.operand, scope, allow_aggregates)
        if expr.op == "NOT":
            _require(info, ("bool",), "NOT")
            return replace(expr, operand=operand), TypeInfo("bool", info.nullable)
        _require(info, NUMERIC_TYPES, "unary minus")
        return replace(expr, operand=operand), info
    if isinstance(expr, IsNull):
        operand, _ = analyze_expr(expr.operand, scope, allow_aggregates)
        return replace(expr, operand=operand), TypeInfo("bool", False)
    if isinstance(expr, Between):
        for part in (expr.operand, expr.low, expr.high):
            _reject_null_literal(part, "a comparison")
        operand, value = analyze_expr(expr.operand, scope, allow_aggregates)
        low, low_info = analyze_expr(expr.low, scope, allow_aggregates)
        high, high_info = analyze_expr(expr.high, scope, allow_aggregates)
        _comparable(value, low_info, "<=")
        _comparable(value, high_info, "<=")
        nullable = value.nullable or low_info.nullable or high_info.nullable
        return Between(operand, low, high), TypeInfo("bool", nullable)
    if isinstance(expr, Binary):
        if expr.op in COMPARISON_OPS or expr.op in ARITHMETIC_OPS:
            context = "a comparison" if expr.op in COMPARISON_OPS else "an arithmetic expression"
            _reject_null_literal(expr.left, context)
            _reject_null_literal(expr.right, context)
        left, left_info = analyze_expr(expr.left, scope, allow_aggregates)
        right, right_info = analyze_expr(expr.right, scope, allow_aggregates)
        nullable = left_info.nullable or right_info.nullable
        resolved = replace(expr, left=left, right=right)
        if expr.op in ("AND", "OR"):
            _require(left_info, ("bool",), expr.op)
            _require(right_info, ("bool",), expr.op)
            return resolved, TypeInfo("bool", nullable)
        if expr.op in COMPARISON_OPS:
            _comparable(left_info, right_info, expr.op)
            return resolved, TypeInfo("bool", nullable)
        result = _arithmetic_type(expr.op, left_info, right_info)
        return resolved, TypeInfo(result, nullable or expr.op == "/")
    raise QueryAnalysisError(f"unsupported expression {type(expr).__name__}")


def collect_aggregates(expr: Expr) -> List[Aggregate]:
    if isinstance(expr, Aggregate):
        return [expr]
    found = []
    for child in expr.children():
        found.extend(collect_aggregates(child))
    return found


def conjuncts(expr: Expr) -> List[Expr]:
    """Flatten a tree of ANDs into its operands, left to right."""
    found, pending = [], [expr]
    while pending:
        current = pending.pop()
        if isinstance(current, Binary) and current.op == "AND":
            pending.append(current.right)
            pending.append(current.left)
        else:
            found.append(current)
    return found


def timestamp_literal(value: datetime) -> Literal:
    return Literal(value, "timestamp")
