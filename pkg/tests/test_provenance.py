import pytest

from odf_desk.engine import CLOSE_WATERMARK, InputBatch, TransformRequest, execute
from odf_desk.errors import OffsetNotFound
from odf_desk.provenance import lineage, render_tree, trace
from support import ORDERS_SCHEMA, add_late_shipments, day, ledger_source, write_csv

DAILY = "SELECT COUNT(*) AS placed FROM orders GROUP BY TUMBLE(order_time, INTERVAL '1' DAY)"
SHIPPED = (
    "SELECT o.order_id, s.shipment_id FROM orders AS o JOIN shipments AS s "
    "ON o.order_id = s.order_id AND s.shipment_time BETWEEN o.order_time AND o.order_time + INTERVAL '1' WEEK"
)
LATE_PER_DAY = "SELECT COUNT(*) AS late FROM late_shipments GROUP BY TUMBLE(event_time, INTERVAL '1' DAY)"


@pytest.fixture
def daily_orders(coordinator, data_dir):
    """A day-1 window that only closes in the second run, so its inputs span two ingests."""
    path = write_csv(data_dir / "orders.csv", ORDERS_SCHEMA.names, [(1, day(1)), (2, day(1))])
    coordinator.add_root("orders", ledger_source(ORDERS_SCHEMA, "order_time", ["order_id"]), path)
    coordinator.add_derivative("daily_orders", ["orders"], DAILY)
    coordinator.pull("daily_orders")
    write_csv(path, ORDERS_SCHEMA.names, [(1, day(1)), (2, day(1)), (3, day(1)), (4, day(3))])
    coordinator.pull("daily_orders")
    return coordinator


def test_window_output_traces_to_records_of_several_blocks(daily_orders):
    node = trace(daily_orders, "daily_orders", [0])
    assert node.name == "daily_orders"
    assert node.block_sequences == [3]
    (orders,) = node.children
    assert orders.name == "orders"
    assert orders.kind == "root"
    assert orders.offsets == [0, 1, 2]
    assert orders.block_sequences == [2, 3]
    assert orders.children == []


def test_rendered_tree_indents_inputs(daily_orders):
    lines = render_tree(trace(daily_orders, "daily_orders", [0]))
    assert lines == [
        "daily_orders [derivative] offsets 0 (blocks 3)",
        "  orders [root] offsets 0, 1, 2 (blocks 2, 3)",
    ]


def test_offsets_outside_the_dataset_are_rejected(daily_orders):
    with pytest.raises(OffsetNotFound):
        trace(daily_orders, "daily_orders", [5])


def test_join_output_traces_to_both_inputs(coordinator, data_dir):
    add_late_shipments(coordinator, data_dir, [(1, day(1)), (2, day(2))], [(10, 2, day(3)), (11, 1, day(12))])
    coordinator.add_derivative("shipped", ["orders", "shipments"], SHIPPED)
    coordinator.set_watermark("shipments", day(30))
    coordinator.set_watermark("orders", day(30))
    coordinator.pull("shipped")
    assert [row["order_id"] for row in coordinator.project("shipped")] == [2]

    node = trace(coordinator, "shipped", [0])
    children = {child.name: child.offsets for child in node.children}
    assert children == {"orders": [1], "shipments": [0]}
    records = coordinator.chain("orders").records(1, 2)
    assert records[0].payload["order_id"] == 2


def test_anti_join_output_traces_to_the_unmatched_order(coordinator, data_dir):
    add_late_shipments(coordinator, data_dir, [(1, day(1)), (2, day(2))], [(10, 2, day(3))])
    coordinator.set_watermark("shipments", day(30))
    coordinator.pull("late_shipments")
    node = trace(coordinator, "late_shipments", [0])
    assert [(child.name, child.offsets) for child in node.children] == [("orders", [0])]


def test_lineage_lists_inputs_with_edges(coordinator, data_dir):
    add_late_shipments(coordinator, data_dir, [(1, day(1))], [])
    graph = lineage(coordinator, "late_shipments")
    ids = {node.name: node.dataset_id for node in graph.nodes}
    assert set(ids) == {"late_shipments", "orders", "shipments"}
    assert graph.nodes[0].name == "late_shipments"
    assert sorted(graph.edges) == sorted(
        [(ids["orders"], ids["late_shipments"]), (ids["shipments"], ids["late_shipments"])]
    )


def _records_at(coordinator, dataset_id, offsets):
    return [record for record in coordinator.workspace.chain(dataset_id).records() if record.offset in offsets]


def _assert_traced_records_reproduce(coordinator, node):
    """Re-run each derivative's query over only the records the trace names and expect the traced output back."""
    if node.kind != "derivative":
        return
    transform = coordinator.workspace.chain(node.dataset_id).summary().transform
    query = coordinator.compile_transform(transform)
    traced = {child.name: _records_at(coordinator, child.dataset_id, set(child.offsets)) for child in node.children}
    batches = {alias: InputBatch(traced.get(name, []), CLOSE_WATERMARK) for alias, name in query.inputs}

    rerun = execute(TransformRequest(query, batches)).records

    expected = _records_at(coordinator, node.dataset_id, set(node.offsets))
    assert [(r.event_time, r.payload) for r in rerun] == [(r.event_time, r.payload) for r in expected]
    for child in node.children:
        _assert_traced_records_reproduce(coordinator, child)


def test_traced_records_alone_reproduce_a_window(daily_orders):
    for offset in range(daily_orders.chain("daily_orders").summary().offset_end):
        _assert_traced_records_reproduce(daily_orders, trace(daily_orders, "daily_orders", [offset]))


def test_traced_records_alone_reproduce_join_outputs(coordinator, data_dir):
    add_late_shipments(
        coordinator,
        data_dir,
        [(1, day(1)), (2, day(2)), (3, day(2)), (4, day(6))],
        [(10, 2, day(3)), (11, 1, day(12)), (12, 3, day(4)), (13, 3, day(5)), (14, 4, day(6))],
    )
    coordinator.add_derivative("shipped", ["orders", "shipments"], SHIPPED)
    coordinator.set_watermark("shipments", day(30))
    coordinator.set_watermark("orders", day(30))
    coordinator.pull("shipped")
    coordinator.pull("late_shipments")
    assert [row["shipment_id"] for row in coordinator.project("shipped")] == [10, 12, 13, 14]
    assert [row["order_id"] for row in coordinator.project("late_shipments")] == [1]

    for name in ("shipped", "late_shipments"):
        for offset in range(coordinator.chain(name).summary().offset_end):
            _assert_traced_records_reproduce(coordinator, trace(coordinator, name, [offset]))


@pytest.fixture
def late_per_day(coordinator, data_dir):
    """Daily counts of late orders: a derivative whose input is itself a derivative."""
    add_late_shipments(
        coordinator, data_dir, [(1, day(1)), (2, day(1)), (3, day(1)), (4, day(4))], [(10, 2, day(3))]
    )
    coordinator.add_derivative("late_per_day", ["late_shipments"], LATE_PER_DAY)
    coordinator.set_watermark("orders", day(30))
    coordinator.set_watermark("shipments", day(30))
    coordinator.pull("late_per_day")
    return coordinator


def test_trace_descends_through_a_derivative_of_a_derivative(late_per_day):
    assert [row["late"] for row in late_per_day.project("late_per_day")] == [2, 1]

    node = trace(late_per_day, "late_per_day", [0])

    (late,) = node.children
    assert (late.name, late.kind, late.offsets) == ("late_shipments", "derivative", [0, 1])
    (orders,) = late.children
    assert (orders.name, orders.kind, orders.offsets) == ("orders", "root", [0, 2])
    assert [r.payload["order_id"] for r in _records_at(late_per_day, orders.dataset_id, {0, 2})] == [1, 3]
    assert render_tree(node) == [
        f"late_per_day [derivative] offsets 0 (blocks {node.block_sequences[0]})",
        f"  late_shipments [derivative] offsets 0, 1 (blocks {late.block_sequences[0]})",
        f"    orders [root] offsets 0, 2 (blocks {orders.block_sequences[0]})",
    ]


def test_multi_level_trace_is_sound_at_every_level(late_per_day):
    for offset in (0, 1):
        _assert_traced_records_reproduce(late_per_day, trace(late_per_day, "late_per_day", [offset]))
