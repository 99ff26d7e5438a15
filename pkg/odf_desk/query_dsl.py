"""
The transform query language.

A deliberately small streaming SQL dialect::

    SELECT list
    FROM name [[AS] alias]
    [[INNER | LEFT] JOIN name [[AS] alias]
        ON l.k = r.k [AND ...] AND r.t BETWEEN l.t AND l.t + INTERVAL 'n' UNIT]
    [WHERE expr]
    [GROUP BY TUMBLE(t, INTERVAL 'n' UNIT) [, col ...]]

``parse`` builds an operator tree, ``analyze`` resolves and types it
against input schemas and derives the output schema.
"""

import re
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

from odf_desk.data_slices import RESERVED_COLUMNS, ColumnDef, SchemaDef
from odf_desk.errors import QueryAnalysisError, QuerySyntaxError, QueryTypeError, UnknownInputAlias
from odf_desk.expressions import (
    AGGREGATE_FUNCTIONS,
    INTERVAL_UNITS,
    Aggregate,
    Between,
    Binary,
    ColumnRef,
    Expr,
    IntervalLiteral,
    IsNull,
    Literal,
    Scope,
    ScopeColumn,
    TypeInfo,
    Unary,
    analyze_expr,
    conjuncts,
    timestamp_literal,
)
from odf_desk.timestamps import parse_timestamp

KEYWORDS = {
    "SELECT",
    "FROM",
    "WHERE",
    "GROUP",
    "BY",
    "AS",
    "LEFT",
    "INNER",
    "JOIN",
    "ON",
    "AND",
    "OR",
    "NOT",
    "IS",
    "NULL",
    "BETWEEN",
    "TRUE",
    "FALSE",
    "TIMESTAMP",
    "INTERVAL",
    "TUMBLE",
}

SYSTEM_COLUMNS = (
    ("offset", "int64", False),
    ("system_time", "timestamp", False),
    ("event_time", "timestamp", False),
    ("observed", "string", True),
)

OUTPUT_TYPES = ("string", "int64", "float64", "bool", "timestamp")

# Parenthesized, negated and aggregated sub-expressions may nest this deep.
MAX_NESTING = 64
# Longest operator path from an expression root to a leaf.
MAX_EXPRESSION_DEPTH = 200


class Token(NamedTuple):
    kind: str
    value: object
    line: int
    column: int
    text: str


_TOKEN_RE = re.compile(
    r"""
    (?P<space>\s+)
    |(?P<comment>--[^\n]*)
    |(?P<number>\d+\.\d*(?:[eE][+-]?\d+)?|\d+[eE][+-]?\d+|\d+)
    |(?P<ident>[A-Za-z_][A-Za-z0-9_]*)
    |(?P<string>'(?:[^']|'')*')
    |(?P<op><>|!=|<=|>=|[=<>+\-*/(),.])
    """,
    re.VERBOSE,
)


def tokenize(text: str) -> List[Token]:
    tokens = []
    position = 0
    line, line_start = 1, 0
    while position < len(text):
        match = _TOKEN_RE.match(text, position)
        column = position - line_start + 1
        if match is None:
            if text[position] == "'":
                raise QuerySyntaxError("unterminated string literal", line, column)
            raise QuerySyntaxError(f"unexpected character {text[position]!r}", line, column)
        kind = match.lastgroup
        raw = match.group()
        if kind == "number":
            if re.fullmatch(r"\d+", raw):
                value = int(raw) if len(raw) <= 19 else 2**63
                if value > 2**63 - 1:
                    raise QuerySyntaxError("integer literal overflows int64", line, column)
                tokens.append(Token("int", value, line, column, raw))
            else:
                value = float(raw)
                if value in (float("inf"), float("-inf")):
                    raise QuerySyntaxError("float literal is out of range", line, column)
                tokens.append(Token("float", value, line, column, raw))
        elif kind == "ident":
            upper = raw.upper()
            if upper in KEYWORDS:
                tokens.append(Token("keyword", upper, line, column, raw))
            else:
                tokens.append(Token("ident", raw, line, column, raw))
        elif kind == "string":
            tokens.append(Token("string", raw[1:-1].replace("''", "'"), line, column, raw))
        elif kind == "op":
            tokens.append(Token("op", "<>" if raw == "!=" else raw, line, column, raw))
        for offset, char in enumerate(raw):
            if char == "\n":
                line += 1
                line_start = position + offset + 1
        position = match.end()
    tokens.append(Token("eof", None, line, len(text) - line_start + 1, "end of input"))
    return tokens


class PlanNode:
    def inputs(self) -> List["Scan"]:
        raise NotImplementedError


@dataclass(frozen=True)
class Scan(PlanNode):
    name: str
    alias: str

    def inputs(self):
        return [self]


@dataclass(frozen=True)
class Filter(PlanNode):
    child: PlanNode
    predicate: Expr

    def inputs(self):
        return self.child.inputs()


@dataclass(frozen=True)
class SelectItem:
    expr: Expr
    alias: Optional[str] = None


@dataclass(frozen=True)
class Project(PlanNode):
    child: PlanNode
    items: Tuple[SelectItem, ...]

    def inputs(self):
        return self.child.inputs()


@dataclass(frozen=True)
class TumbleAggregate(PlanNode):
    child: PlanNode
    time_column: ColumnRef
    window: IntervalLiteral
    group_by: Tuple[ColumnRef, ...]
    items: Tuple[SelectItem, ...]

    @property
    def window_size_ms(self) -> int:
        return self.window.millis

    def inputs(self):
        return self.child.inputs()


@dataclass(frozen=True)
class IntervalJoin(PlanNode):
    """Right event time constrained to ``[left time, left time + upper_bound]``."""

    kind: str
    left: Scan
    right: Scan
    keys: Tuple[Tuple[ColumnRef, ColumnRef], ...]
    left_time: ColumnRef
    right_time: ColumnRef
    upper_bound: IntervalLiteral

    @property
    def upper_bound_ms(self) -> int:
        return self.upper_bound.millis

    def inputs(self):
        return [self.left, self.right]


QueryPlan = PlanNode


class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.index = 0
        self.nesting = 0
        self.heights: Dict[int, int] = {}

    @property
    def current(self) -> Token:
        return self.tokens[self.index]

    def advance(self) -> Token:
        token = self.current
        if token.kind != "eof":
            self.index += 1
        return token

    def fail(self, expected: Sequence[str], token: Optional[Token] = None):
        token = token or self.current
        raise QuerySyntaxError(f"unexpected {token.text}", token.line, token.column, expected)

    def at_keyword(self, *words: str) -> bool:
        return self.current.kind == "keyword" and self.current.value in words

    def at_op(self, *ops: str) -> bool:
        return self.current.kind == "op" and self.current.value in ops

    def keyword(self, word: str) -> Token:
        if not self.at_keyword(word):
            self.fail([word])
        return self.advance()

    def op(self, symbol: str) -> Token:
        if not self.at_op(symbol):
            self.fail([repr(symbol)])
        return self.advance()

    def identifier(self, what: str = "identifier") -> str:
        if self.current.kind != "ident":
            self.fail([what])
        return self.advance().value

    @contextmanager
    def nested(self, token: Token):
        self.nesting += 1
        if self.nesting > MAX_NESTING:
            raise QuerySyntaxError(f"expression nests deeper than {MAX_NESTING} levels", token.line, token.column)
        try:
            yield
        finally:
            self.nesting -= 1

    def built(self, expr: Expr, token: Token) -> Expr:
        """Record the height of a freshly built node, rejecting overly deep trees."""
        height = 1 + max((self.heights.get(id(child), 1) for child in expr.children()), default=0)
        if height > MAX_EXPRESSION_DEPTH:
            raise QuerySyntaxError(
                f"expression is deeper than {MAX_EXPRESSION_DEPTH} operators", token.line, token.column
            )
        self.heights[id(expr)] = height
        return expr

    # query structure

    def query(self) -> PlanNode:
        self.keyword("SELECT")
        items = self.select_list()
        self.keyword("FROM")
        source: PlanNode = self.table()
        if self.at_keyword("LEFT", "INNER", "JOIN"):
            source = self.join(source)
        if self.at_keyword("WHERE"):
            self.advance()
            source = Filter(source, self.expression())
        plan: PlanNode
        if self.at_keyword("GROUP"):
            group_token = self.advance()
            self.keyword("BY")
            if isinstance(source, IntervalJoin) or (isinstance(source, Filter) and isinstance(source.child, IntervalJoin)):
                raise QuerySyntaxError(
                    "a query may not combine a join with windowed aggregation", group_token.line, group_token.column
                )
            plan = self.tumble(source, items)
        else:
            plan = Project(source, items)
        if self.current.kind != "eof":
            expected = ["end of input", "WHERE", "GROUP"]
            if isinstance(source, Scan):
                expected += ["JOIN", "LEFT", "INNER"]
            self.fail(expected)
        return plan

    def select_list(self) -> Tuple[SelectItem, ...]:
        items = [self.select_item()]
        while self.at_op(","):
            self.advance()
            items.append(self.select_item())
        return tuple(items)

    def select_item(self) -> SelectItem:
        expr = self.expression()
        alias = None
        if self.at_keyword("AS"):
            self.advance()
            alias = self.identifier("column alias")
        return SelectItem(expr, alias)

    def table(self) -> Scan:
        name = self.identifier("input name")
        alias = name
        if self.at_keyword("AS"):
            self.advance()
            alias = self.identifier("input alias")
        elif self.current.kind == "ident":
            alias = self.advance().value
        return Scan(name, alias)

    def join(self, left: Scan) -> IntervalJoin:
        kind = "inner"
        if self.at_keyword("LEFT", "INNER"):
            kind = self.advance().value.lower()
        self.keyword("JOIN")
        right = self.table()
        on_token = self.keyword("ON")
        condition = self.expression()
        return _decompose_join(kind, left, right, condition, on_token)

    def tumble(self, source: PlanNode, items: Tuple[SelectItem, ...]) -> TumbleAggregate:
        self.keyword("TUMBLE")
        self.op("(")
        time_column = self.column_ref()
        self.op(",")
        window = self.interval()
        if window.millis <= 0:
            token = self.tokens[self.index - 1]
            raise QuerySyntaxError("window size must be positive", token.line, token.column)
        self.op(")")
        group_by = []
        while self.at_op(","):
            self.advance()
            group_by.append(self.column_ref())
        return TumbleAggregate(source, time_column, window, tuple(group_by), items)

    def column_ref(self) -> ColumnRef:
        first = self.identifier("column")
        if self.at_op("."):
            self.advance()
            return ColumnRef(self.identifier("column"), first)
        return ColumnRef(first)

    def interval(self) -> IntervalLiteral:
        self.keyword("INTERVAL")
        token = self.current
        if token.kind != "string" or not re.fullmatch(r"\d+", token.value):
            self.fail(["interval amount such as '7'"])
        if len(token.value) > 15:
            raise QuerySyntaxError("interval amount is too large", token.line, token.column)
        self.advance()
        unit_token = self.current
        unit = str(unit_token.value).upper() if unit_token.kind == "ident" else None
        if unit not in INTERVAL_UNITS:
            self.fail(list(INTERVAL_UNITS))
        self.advance()
        return IntervalLiteral(int(token.value), unit)

    # expressions, lowest precedence first

    def expression(self) -> Expr:
        left = self.conjunction()
        while self.at_keyword("OR"):
            token = self.advance()
            left = self.built(Binary("OR", left, self.conjunction()), token)
        return left

    def conjunction(self) -> Expr:
        left = self.negation()
        while self.at_keyword("AND"):
            token = self.advance()
            left = self.built(Binary("AND", left, self.negation()), token)
        return left

    def negation(self) -> Expr:
        if self.at_keyword("NOT"):
            token = self.advance()
            with self.nested(token):
                return self.built(Unary("NOT", self.negation()), token)
        return self.comparison()

    def comparison(self) -> Expr:
        left = self.additive()
        token = self.current
        if self.at_op("=", "<>", "<", "<=", ">", ">="):
            op = self.advance().value
            return self.built(Binary(op, left, self.additive()), token)
        if self.at_keyword("IS"):
            self.advance()
            negated = False
            if self.at_keyword("NOT"):
                self.advance()
                negated = True
            self.keyword("NULL")
            return self.built(IsNull(left, negated), token)
        if self.at_keyword("BETWEEN"):
            self.advance()
            low = self.additive()
            self.keyword("AND")
            return self.built(Between(left, low, self.additive()), token)
        return left

    def additive(self) -> Expr:
        left = self.multiplicative()
        while self.at_op("+", "-"):
            token = self.advance()
            left = self.built(Binary(token.value, left, self.multiplicative()), token)
        return left

    def multiplicative(self) -> Expr:
        left = self.unary()
        while self.at_op("*", "/"):
            token = self.advance()
            left = self.built(Binary(token.value, left, self.unary()), token)
        return left

    def unary(self) -> Expr:
        if self.at_op("-"):
            token = self.advance()
            with self.nested(token):
                return self.built(Unary("-", self.unary()), token)
        return self.primary()

    def primary(self) -> Expr:
        token = self.current
        if token.kind == "int":
            self.advance()
            return Literal(token.value, "int64")
        if token.kind == "float":
            self.advance()
            return Literal(token.value, "float64")
        if token.kind == "string":
            self.advance()
            return Literal(token.value, "string")
        if self.at_keyword("TRUE", "FALSE"):
            self.advance()
            return Literal(token.value == "TRUE", "bool")
        if self.at_keyword("NULL"):
            self.advance()
            return Literal(None, "null")
        if self.at_keyword("TIMESTAMP"):
            self.advance()
            text = self.current
            if text.kind != "string":
                self.fail(["timestamp string"])
            try:
                value = parse_timestamp(text.value)
            except ValueError:
                raise QuerySyntaxError(f"invalid timestamp {text.value!r}", text.line, text.column)
            self.advance()
            return timestamp_literal(value)
        if self.at_keyword("INTERVAL"):
            return self.interval()
        if self.at_op("("):
            self.advance()
            with self.nested(token):
                inner = self.expression()
            self.op(")")
            return inner
        if token.kind == "ident":
            if self.tokens[self.index + 1].kind == "op" and self.tokens[self.index + 1].value == "(":
                return self.function_call()
            return self.column_ref()
        self.fail(["expression"])

    def function_call(self) -> Aggregate:
        token = self.advance()
        func = token.value.upper()
        if func not in AGGREGATE_FUNCTIONS:
            raise QuerySyntaxError(f"unknown function {token.value}", token.line, token.column, AGGREGATE_FUNCTIONS)
        self.op("(")
        if self.at_op("*"):
            star = self.advance()
            if func != "COUNT":
                raise QuerySyntaxError(f"{func}(*) is not supported", star.line, star.column)
            self.op(")")
            return Aggregate(func)
        with self.nested(token):
            argument = self.expression()
        self.op(")")
        return self.built(Aggregate(func, argument), token)


def _decompose_join(kind: str, left: Scan, right: Scan, condition: Expr, on_token: Token) -> IntervalJoin:
    def fail(message: str):
        raise QuerySyntaxError(message, on_token.line, on_token.column)

    if left.alias == right.alias:
        fail(f"both join inputs use the alias {left.alias!r}")
    aliases = {left.alias, right.alias}
    keys = []
    interval = None
    for part in conjuncts(condition):
        if isinstance(part, Binary) and part.op == "=":
            a, b = part.left, part.right
            if not (isinstance(a, ColumnRef) and isinstance(b, ColumnRef)):
                fail("join keys must compare two columns")
            if {a.qualifier, b.qualifier} != aliases:
                fail("join keys must compare an alias-qualified column of each input")
            keys.append((a, b) if a.qualifier == left.alias else (b, a))
        elif isinstance(part, Between):
            if interval is not None:
                fail("a join takes exactly one BETWEEN time constraint")
            high = part.high
            if not (
                isinstance(part.operand, ColumnRef)
                and part.operand.qualifier == right.alias
                and isinstance(part.low, ColumnRef)
                and part.low.qualifier == left.alias
                and isinstance(high, Binary)
                and high.op == "+"
                and high.left == part.low
                and isinstance(high.right, IntervalLiteral)
            ):
                fail(
                    f"the time constraint must read {right.alias}.t BETWEEN {left.alias}.t "
                    f"AND {left.alias}.t + INTERVAL 'n' UNIT"
                )
            interval = (part.low, part.operand, high.right)
        else:
            fail("join conditions may only contain key equalities and one BETWEEN")
    if interval is None:
        fail("a join needs a BETWEEN time constraint")
    left_time, right_time, upper_bound = interval
    return IntervalJoin(kind, left, right, tuple(keys), left_time, right_time, upper_bound)


def parse(text: str) -> QueryPlan:
    """Parse query text into an unanalyzed plan."""
    return _Parser(text).query()


def _select_sql(items: Sequence[SelectItem]) -> str:
    return ", ".join(item.expr.to_sql() + (f" AS {item.alias}" if item.alias else "") for item in items)


def _scan_sql(scan: Scan) -> str:
    return scan.name if scan.alias == scan.name else f"{scan.name} AS {scan.alias}"


def _source_sql(node: PlanNode) -> str:
    if isinstance(node, Filter):
        return f"{_source_sql(node.child)} WHERE {node.predicate.to_sql()}"
    if isinstance(node, Scan):
        return _scan_sql(node)
    if isinstance(node, IntervalJoin):
        conditions = [f"{l.to_sql()} = {r.to_sql()}" for l, r in node.keys]
        window = Binary("+", node.left_time, node.upper_bound)
        conditions.append(Between(node.right_time, node.left_time, window).to_sql())
        join = "LEFT JOIN" if node.kind == "left" else "JOIN"
        return f"{_scan_sql(node.left)} {join} {_scan_sql(node.right)} ON {' AND '.join(conditions)}"
    raise QueryAnalysisError(f"unexpected plan node {type(node).__name__}")


def to_sql(plan: Union[QueryPlan, "AnalyzedQuery"]) -> str:
    """Render a plan as query text that parses back to the same plan."""
    if isinstance(plan, AnalyzedQuery):
        plan = plan.plan
    if isinstance(plan, TumbleAggregate):
        group = ", ".join([f"TUMBLE({plan.time_column.to_sql()}, {plan.window.to_sql()})"] + [c.to_sql() for c in plan.group_by])
        return f"SELECT {_select_sql(plan.items)} FROM {_source_sql(plan.child)} GROUP BY {group}"
    if isinstance(plan, Project):
        return f"SELECT {_select_sql(plan.items)} FROM {_source_sql(plan.child)}"
    raise QueryAnalysisError(f"unexpected plan root {type(plan).__name__}")


@dataclass(frozen=True)
class AnalyzedQuery:
    """A resolved, typed plan plus everything the engine needs to run it."""

    plan: PlanNode
    kind: str
    inputs: Tuple[Tuple[str, str], ...]
    input_schemas: Mapping[str, SchemaDef] = field(compare=False)
    output_schema: SchemaDef
    predicate: Optional[Expr] = None
    outputs: Tuple[Tuple[str, Expr], ...] = ()
    window_size_ms: int = 0
    group_by: Tuple[ColumnRef, ...] = ()
    aggregates: Tuple[Aggregate, ...] = ()
    join: Optional[IntervalJoin] = None

    @property
    def aliases(self) -> Tuple[str, ...]:
        return tuple(alias for alias, _ in self.inputs)


def _schema_for(scan: Scan, input_schemas: Mapping[str, SchemaDef]) -> SchemaDef:
    for key in (scan.alias, scan.name):
        if key in input_schemas:
            return input_schemas[key]
    raise UnknownInputAlias(f"no schema for input {scan.name!r} (alias {scan.alias!r})")


def _event_time_column(scan: Scan, event_time_columns: Optional[Mapping[str, Optional[str]]]) -> Optional[str]:
    if not event_time_columns:
        return None
    for key in (scan.alias, scan.name):
        if key in event_time_columns:
            return event_time_columns[key]
    return None


def _scope(scans: Sequence[Scan], input_schemas, nullable_aliases=()) -> Scope:
    qualified = len(scans) > 1
    columns = []
    for scan in scans:
        schema = _schema_for(scan, input_schemas)
        definitions = list(SYSTEM_COLUMNS) + [(c.name, c.type, c.nullable) for c in schema.columns]
        for name, kind, nullable in definitions:
            key = f"{scan.alias}.{name}" if qualified else name
            columns.append(ScopeColumn(scan.alias, name, kind, nullable or scan.alias in nullable_aliases, key))
    return Scope([scan.alias for scan in scans], columns)


def _check_time_column(ref: ColumnRef, scope: Scope, scan: Scan, declared: Optional[str]) -> ColumnRef:
    column = scope.resolve(ref)
    allowed = {"event_time"} | ({declared} if declared else set())
    if column.alias != scan.alias or column.name not in allowed:
        raise QueryAnalysisError(
            f"{ref.to_sql()} is not the event time of {scan.alias!r}; use {' or '.join(sorted(allowed))}"
        )
    return replace(ref, key=column.key)


def _output_name(item: SelectItem) -> str:
    if item.alias:
        return item.alias
    if isinstance(item.expr, ColumnRef):
        return item.expr.name
    if isinstance(item.expr, Aggregate):
        if item.expr.argument is None:
            return item.expr.func.lower()
        if isinstance(item.expr.argument, ColumnRef):
            return f"{item.expr.func.lower()}_{item.expr.argument.name}"
    raise QueryAnalysisError(f"expression {item.expr.to_sql()} needs an alias (AS name)")


def _output_column(name: str, info: TypeInfo, seen: set) -> ColumnDef:
    if name in RESERVED_COLUMNS:
        raise QueryAnalysisError(f"output column name {name!r} is reserved; rename it with AS")
    if name in seen:
        raise QueryAnalysisError(f"duplicate output column {name!r}")
    if info.type not in OUTPUT_TYPES:
        raise QueryTypeError(f"output column {name!r} has type {info.type}, which cannot be stored")
    seen.add(name)
    return ColumnDef(name=name, type=info.type, nullable=info.nullable)


def _analyze_predicate(node: PlanNode, scope: Scope) -> Tuple[PlanNode, Optional[Expr]]:
    if not isinstance(node, Filter):
        return node, None
    if node.predicate.contains_aggregate():
        raise QueryAnalysisError("aggregates are not allowed in WHERE")
    predicate, info = analyze_expr(node.predicate, scope)
    if info.type != "bool":
        raise QueryTypeError(f"WHERE expects bool, got {info.type}")
    return node.child, predicate


def analyze(
    plan: QueryPlan,
    input_schemas: Mapping[str, SchemaDef],
    event_time_columns: Optional[Mapping[str, Optional[str]]] = None,
) -> AnalyzedQuery:
    """
    Resolve columns and types of ``plan``.

    Args:
        plan: A parsed plan.
        input_schemas: Schemas keyed by input alias (or input name).
        event_time_columns: Declared event time column per input, if any.

    Returns:
        AnalyzedQuery: The typed plan with its output schema.
    """
    scans = plan.inputs()
    if len({scan.name for scan in scans}) != len(scans):
        raise QueryAnalysisError("an input dataset may appear only once per query")
    inputs = tuple((scan.alias, scan.name) for scan in scans)
    schemas = {scan.alias: _schema_for(scan, input_schemas) for scan in scans}
    seen: set = set()

    if isinstance(plan, TumbleAggregate):
        scope = _scope(scans, input_schemas)
        source, predicate = _analyze_predicate(plan.child, scope)
        time_column = _check_time_column(plan.time_column, scope, scans[0], _event_time_column(scans[0], event_time_columns))
        group_by = []
        for ref in plan.group_by:
            resolved, _ = analyze_expr(ref, scope)
            group_by.append(resolved)
        group_keys = [ref.key for ref in group_by]
        if len(set(group_keys)) != len(group_keys):
            raise QueryAnalysisError("duplicate GROUP BY column")
        aggregates: List[Aggregate] = []
        outputs = []
        columns = []
        for item in plan.items:
            name = _output_name(item)
            expr, info = analyze_expr(item.expr, scope, allow_aggregates=True)
            if isinstance(expr, Aggregate):
                if expr not in aggregates:
                    aggregates.append(expr)
            elif not (isinstance(expr, ColumnRef) and expr.key in group_keys):
                raise QueryAnalysisError(
                    f"{item.expr.to_sql()} must be a GROUP BY column or an aggregate in a windowed query"
                )
            outputs.append((name, expr))
            columns.append(_output_column(name, info, seen))
        resolved = replace(plan, time_column=time_column, group_by=tuple(group_by))
        return AnalyzedQuery(
            plan=resolved,
            kind="windowed",
            inputs=inputs,
            input_schemas=schemas,
            output_schema=SchemaDef(columns=tuple(columns)),
            predicate=predicate,
            outputs=tuple(outputs),
            window_size_ms=plan.window_size_ms,
            group_by=tuple(group_by),
            aggregates=tuple(aggregates),
        )

    if not isinstance(plan, Project):
        raise QueryAnalysisError(f"unexpected plan root {type(plan).__name__}")
    child = plan.child.child if isinstance(plan.child, Filter) else plan.child
    join = child if isinstance(child, IntervalJoin) else None
    nullable = (join.right.alias,) if join is not None and join.kind == "left" else ()
    scope = _scope(scans, input_schemas, nullable)
    source, predicate = _analyze_predicate(plan.child, scope)
    if join is not None:
        keys = []
        for left_ref, right_ref in join.keys:
            left_key, left_info = analyze_expr(left_ref, scope)
            right_key, right_info = analyze_expr(right_ref, scope)
            if left_info.type != right_info.type:
                raise QueryTypeError(
                    f"join key {left_ref.to_sql()} ({left_info.type}) does not match "
                    f"{right_ref.to_sql()} ({right_info.type})"
                )
            keys.append((left_key, right_key))
        join = replace(
            join,
            keys=tuple(keys),
            left_time=_check_time_column(join.left_time, scope, join.left, _event_time_column(join.left, event_time_columns)),
            right_time=_check_time_column(
                join.right_time, scope, join.right, _event_time_column(join.right, event_time_columns)
            ),
        )
    outputs = []
    columns = []
    for item in plan.items:
        name = _output_name(item)
        if item.expr.contains_aggregate():
            raise QueryAnalysisError("aggregates require GROUP BY TUMBLE(...)")
        expr, info = analyze_expr(item.expr, scope)
        outputs.append((name, expr))
        columns.append(_output_column(name, info, seen))
    return AnalyzedQuery(
        plan=plan,
        kind="joined" if join is not None else "stateless",
        inputs=inputs,
        input_schemas=schemas,
        output_schema=SchemaDef(columns=tuple(columns)),
        predicate=predicate,
        outputs=tuple(outputs),
        join=join,
    )


def _root(plan: Union[QueryPlan, AnalyzedQuery]) -> PlanNode:
    return plan.plan if isinstance(plan, AnalyzedQuery) else plan


def classify(plan: Union[QueryPlan, AnalyzedQuery]) -> str:
    """``stateless``, ``windowed`` or ``joined``."""
    if isinstance(plan, AnalyzedQuery):
        return plan.kind
    root = _root(plan)
    if isinstance(root, TumbleAggregate):
        return "windowed"
    child = root.child.child if isinstance(root.child, Filter) else root.child
    return "joined" if isinstance(child, IntervalJoin) else "stateless"


def temporal_reach(plan: Union[QueryPlan, AnalyzedQuery]) -> int:
    """How far, in event-time milliseconds, the plan's output lags its inputs."""
    root = _root(plan)
    if isinstance(root, TumbleAggregate):
        return root.window_size_ms
    child = root.child.child if isinstance(root.child, Filter) else root.child
    if isinstance(child, IntervalJoin):
        return child.upper_bound_ms
    return 0


def compile_query(
    text: str,
    input_schemas: Mapping[str, SchemaDef],
    event_time_columns: Optional[Mapping[str, Optional[str]]] = None,
) -> AnalyzedQuery:
    return analyze(parse(text), input_schemas, event_time_columns)
