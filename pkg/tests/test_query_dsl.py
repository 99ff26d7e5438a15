import random
from datetime import datetime, timezone

import pytest

from odf_desk.errors import (
    QueryAnalysisError,
    QuerySyntaxError,
    QueryTypeError,
    UnknownColumn,
    UnknownInputAlias,
)
from odf_desk.expressions import timestamp_literal
from odf_desk.query_dsl import (
    IntervalJoin,
    MAX_NESTING,
    PlanNode,
    Project,
    TumbleAggregate,
    classify,
    compile_query,
    parse,
    temporal_reach,
    to_sql,
    tokenize,
)
from support import LATE_SHIPMENTS_QUERY, ORDERS_SCHEMA, SHIPMENTS_SCHEMA, schema

SCHEMAS = {"orders": ORDERS_SCHEMA, "shipments": SHIPMENTS_SCHEMA}
EVENT_TIMES = {"orders": "order_time", "shipments": "shipment_time"}
READINGS = schema(("sensor", "string"), ("value", "int64"), ("note", "string", True))

WINDOWED = (
    "SELECT sensor, COUNT(*) AS n, SUM(value), AVG(value) AS mean "
    "FROM readings GROUP BY TUMBLE(event_time, INTERVAL '10' SECOND), sensor"
)


def test_missing_select_list_points_at_the_from_token():
    with pytest.raises(QuerySyntaxError) as excinfo:
        parse("SELECT FROM a")
    assert (excinfo.value.line, excinfo.value.column) == (1, 8)
    assert "expression" in excinfo.value.expected


def test_error_positions_count_lines_and_columns():
    with pytest.raises(QuerySyntaxError) as excinfo:
        parse("SELECT x\nFROM a\nWHERE")
    assert (excinfo.value.line, excinfo.value.column) == (3, 6)


def test_trailing_tokens_are_rejected():
    with pytest.raises(QuerySyntaxError) as excinfo:
        parse("SELECT x FROM a b c")
    assert excinfo.value.column == 19


def test_late_shipments_query_is_an_interval_anti_join():
    query = compile_query(LATE_SHIPMENTS_QUERY, SCHEMAS, EVENT_TIMES)
    assert query.kind == "joined"
    assert query.inputs == (("o", "orders"), ("s", "shipments"))
    assert temporal_reach(query) == 604_800_000
    assert [(c.name, c.type, c.nullable) for c in query.output_schema.columns] == [
        ("order_time", "timestamp", False),
        ("order_id", "int64", False),
    ]
    assert query.join.kind == "left"
    assert [(left.key, right.key) for left, right in query.join.keys] == [("o.order_id", "s.order_id")]
    assert query.join.upper_bound_ms == 7 * 86_400_000


def test_right_side_of_a_left_join_is_nullable():
    query = compile_query(
        "SELECT o.order_id, s.shipment_id FROM orders o LEFT JOIN shipments s "
        "ON o.order_id = s.order_id AND s.event_time BETWEEN o.event_time AND o.event_time + INTERVAL '2' DAY",
        SCHEMAS,
    )
    assert query.output_schema.column("shipment_id").nullable
    assert temporal_reach(query) == 2 * 86_400_000


def test_join_time_columns_must_be_event_times():
    text = LATE_SHIPMENTS_QUERY.replace("s.shipment_time BETWEEN", "s.shipment_id BETWEEN")
    with pytest.raises((QueryAnalysisError, QueryTypeError)):
        compile_query(text, SCHEMAS, EVENT_TIMES)


def test_join_needs_a_time_bound():
    with pytest.raises(QuerySyntaxError, match="BETWEEN"):
        parse("SELECT o.order_id FROM orders o JOIN shipments s ON o.order_id = s.order_id")


def test_join_cannot_be_combined_with_windowing():
    with pytest.raises(QuerySyntaxError, match="join"):
        parse(
            "SELECT COUNT(*) AS n FROM orders o JOIN shipments s ON o.order_id = s.order_id "
            "AND s.event_time BETWEEN o.event_time AND o.event_time + INTERVAL '1' DAY "
            "GROUP BY TUMBLE(o.event_time, INTERVAL '1' DAY)"
        )


def test_windowed_query_output_schema():
    query = compile_query(WINDOWED, {"readings": READINGS})
    assert query.kind == "windowed"
    assert query.window_size_ms == 10_000
    assert [(c.name, c.type) for c in query.output_schema.columns] == [
        ("sensor", "string"),
        ("n", "int64"),
        ("sum_value", "int64"),
        ("mean", "float64"),
    ]
    assert temporal_reach(query) == 10_000


def test_windowed_select_items_must_be_grouped_or_aggregated():
    with pytest.raises(QueryAnalysisError, match="GROUP BY"):
        compile_query(
            "SELECT value, COUNT(*) AS n FROM readings GROUP BY TUMBLE(event_time, INTERVAL '1' MINUTE)",
            {"readings": READINGS},
        )


def test_aggregates_need_a_window():
    with pytest.raises(QueryAnalysisError):
        compile_query("SELECT COUNT(*) AS n FROM readings", {"readings": READINGS})


def test_window_must_be_positive():
    with pytest.raises(QuerySyntaxError):
        parse("SELECT COUNT(*) AS n FROM r GROUP BY TUMBLE(event_time, INTERVAL '0' HOUR)")


def test_equals_null_is_rejected_with_a_hint():
    with pytest.raises(QueryTypeError, match="IS NULL"):
        compile_query("SELECT sensor FROM readings WHERE note = NULL", {"readings": READINGS})


def test_stateless_query():
    query = compile_query("SELECT sensor, value * 2 AS doubled FROM readings WHERE value > 3", {"readings": READINGS})
    assert classify(query) == "stateless"
    assert temporal_reach(query) == 0
    assert query.output_schema.column("doubled").type == "int64"


def test_computed_columns_need_an_alias():
    with pytest.raises(QueryAnalysisError, match="alias"):
        compile_query("SELECT value + 1 FROM readings", {"readings": READINGS})


def test_reserved_output_names_are_rejected():
    with pytest.raises(QueryAnalysisError, match="reserved"):
        compile_query("SELECT event_time FROM readings", {"readings": READINGS})


def test_unknown_input_and_column():
    with pytest.raises(UnknownInputAlias):
        compile_query("SELECT x FROM nowhere", {"readings": READINGS})
    with pytest.raises(UnknownColumn):
        compile_query("SELECT price FROM readings", {"readings": READINGS})


@pytest.mark.parametrize(
    "text",
    [
        LATE_SHIPMENTS_QUERY,
        WINDOWED,
        "SELECT sensor FROM readings AS r WHERE NOT (r.value BETWEEN -3 AND 7) OR r.note IS NOT NULL",
        "SELECT sensor, 'it''s' AS quoted FROM readings WHERE event_time >= TIMESTAMP '2024-01-01T00:00:00Z'",
    ],
)
def test_rendered_sql_parses_back_to_the_same_plan(text):
    plan = parse(text)
    assert parse(to_sql(plan)) == plan


def test_timestamp_literals_are_normalized_to_utc():
    plan = parse("SELECT sensor FROM readings WHERE event_time < TIMESTAMP '2024-01-01T01:00:00.500+01:00'")

    assert plan.child.predicate.right == timestamp_literal(datetime(2024, 1, 1, 0, 0, 0, 500000, tzinfo=timezone.utc))
    assert plan.child.predicate.right.type == "timestamp"


def test_parse_builds_operator_trees():
    assert isinstance(parse(WINDOWED), TumbleAggregate)
    plan = parse(LATE_SHIPMENTS_QUERY)
    assert isinstance(plan, Project)
    assert isinstance(plan.child.child, IntervalJoin)
    assert classify(plan) == "joined"


def test_tokenizer_handles_comments_and_escapes():
    tokens = tokenize("SELECT 'a''b' -- trailing comment\nFROM t")
    assert [token.kind for token in tokens] == ["keyword", "string", "keyword", "ident", "eof"]
    assert tokens[1].value == "a'b"
    assert (tokens[2].line, tokens[2].column) == (2, 1)


def test_unterminated_string():
    with pytest.raises(QuerySyntaxError, match="unterminated"):
        tokenize("SELECT 'oops")


CORPUS = [
    LATE_SHIPMENTS_QUERY,
    WINDOWED,
    "SELECT sensor FROM readings AS r WHERE NOT (r.value BETWEEN -3 AND 7) OR r.note IS NOT NULL",
    "SELECT o.order_id, s.shipment_id FROM orders o JOIN shipments s ON o.order_id = s.order_id "
    "AND s.shipment_time BETWEEN o.order_time AND o.order_time + INTERVAL '2' DAY",
    "SELECT -value * (2 + 3) / 4 AS v, 'x''y' AS s FROM readings WHERE value <> 1.5e3",
]

VOCABULARY = [
    "SELECT", "FROM", "WHERE", "GROUP", "BY", "AS", "LEFT", "INNER", "JOIN", "ON", "AND", "OR", "NOT",
    "IS", "NULL", "BETWEEN", "TRUE", "FALSE", "TIMESTAMP", "INTERVAL", "TUMBLE", "COUNT", "SUM",
    "(", ")", ",", ".", "*", "/", "+", "-", "=", "<>", "!=", "<", "<=", ">", ">=",
    "a", "b", "value", "event_time", "1", "0", "2.5", "1e400", "99999999999999999999",
    "'7'", "'it''s'", "'2024-01-01T00:00:00Z'", "'unterminated", "WEEK", "SECOND", "--note\n", "\n", "?", ";",
]


def _assert_parses_or_fails_at_a_position(text):
    try:
        plan = parse(text)
    except QuerySyntaxError as exc:
        assert exc.line >= 1 and exc.column >= 1
    else:
        assert isinstance(plan, PlanNode)


def _mutate(rng, text):
    chars = list(text)
    for _ in range(rng.randint(1, 4)):
        position = rng.randrange(len(chars) + 1)
        action = rng.choice(("delete", "insert", "duplicate"))
        if action == "delete" and position < len(chars):
            del chars[position]
        elif action == "insert":
            chars[position:position] = rng.choice(VOCABULARY) + " "
        else:
            chars[position:position] = chars[position : position + rng.randint(1, 12)]
    return "".join(chars)


@pytest.mark.parametrize("seed", range(40))
def test_parse_is_total_on_random_tokens(seed):
    rng = random.Random(seed)
    for _ in range(50):
        tokens = [rng.choice(VOCABULARY) for _ in range(rng.randint(0, 30))]
        if rng.random() < 0.5:
            tokens = ["SELECT"] + tokens
        _assert_parses_or_fails_at_a_position(" ".join(tokens))


@pytest.mark.parametrize("seed", range(40))
def test_parse_is_total_on_mutated_queries(seed):
    rng = random.Random(seed)
    for _ in range(50):
        _assert_parses_or_fails_at_a_position(_mutate(rng, rng.choice(CORPUS)))


@pytest.mark.parametrize("depth", [150, 300, 1000])
@pytest.mark.parametrize(
    "build",
    [
        lambda n: "SELECT " + "(" * n + "1" + ")" * n + " AS x FROM a",
        lambda n: "SELECT x FROM a WHERE " + "NOT " * n + "TRUE",
        lambda n: "SELECT " + "- " * n + "1 AS x FROM a",
        lambda n: "SELECT COUNT(" * n + "1" + ")" * n + " FROM a",
        lambda n: "SELECT x FROM a WHERE " + " AND ".join(["TRUE"] * (2 * n)),
        lambda n: "SELECT " + " + ".join(["1"] * (2 * n)) + " AS x FROM a",
    ],
    ids=["parentheses", "not", "minus", "aggregates", "and-chain", "plus-chain"],
)
def test_deep_expressions_are_rejected_at_a_position(build, depth):
    with pytest.raises(QuerySyntaxError) as excinfo:
        parse(build(depth))
    assert excinfo.value.line == 1 and excinfo.value.column > 1


def test_nesting_limit_points_at_the_first_parenthesis_too_many():
    text = "SELECT " + "(" * (MAX_NESTING + 1) + "1" + ")" * (MAX_NESTING + 1) + " AS x FROM a"

    with pytest.raises(QuerySyntaxError, match="nests deeper") as excinfo:
        parse(text)
    assert excinfo.value.column == len("SELECT ") + MAX_NESTING + 1


def test_moderate_nesting_still_parses():
    plan = parse("SELECT " + "(" * 50 + "1" + ")" * 50 + " AS x FROM a")
    assert isinstance(plan, Project)
    assert parse("SELECT x FROM a WHERE " + " AND ".join(["TRUE"] * 150)).child.predicate.op == "AND"
