import pytest

from odf_desk.errors import CycleDetected, DatasetExists, IncompatibleSchemaChange, UserError
from odf_desk.metadata_chain import ExecuteTransform, with_event
from support import (
    LATE_SHIPMENTS_QUERY,
    ORDERS_SCHEMA,
    SHIPMENTS_SCHEMA,
    add_late_shipments,
    day,
    ledger_source,
    write_csv,
)

ORDERS = [(1, day(1)), (2, day(2)), (3, day(20))]
SHIPMENTS = [(10, 2, day(3))]


@pytest.fixture
def late_shipments(coordinator, data_dir):
    orders_csv, shipments_csv = add_late_shipments(coordinator, data_dir, ORDERS, SHIPMENTS)
    return orders_csv, shipments_csv


def _ship_order_three(shipments_csv):
    write_csv(shipments_csv, SHIPMENTS_SCHEMA.names, SHIPMENTS + [(11, 3, day(25))])


def _executions(coordinator, name="late_shipments"):
    return [block for _, block in coordinator.chain(name).blocks() if isinstance(block.event, ExecuteTransform)]


def test_pull_ingests_roots_then_runs_the_derivative(coordinator, late_shipments):
    report = coordinator.pull("late_shipments")
    assert report.ok
    assert [(action.name, action.action) for action in report.actions][-1] == ("late_shipments", "transformed")
    assert {action.name for action in report.actions} == {"orders", "shipments", "late_shipments"}
    # shipments only reach day 3, so no order can be declared late yet
    assert coordinator.project("late_shipments") == []
    (execution,) = _executions(coordinator)
    assert execution.event.output_slice is None
    assert execution.event.output_watermark == day(-4)


def test_late_order_appears_once_the_shipment_watermark_passes_its_week(coordinator, late_shipments):
    _, shipments_csv = late_shipments
    coordinator.pull("late_shipments")
    _ship_order_three(shipments_csv)
    coordinator.pull("late_shipments")
    rows = coordinator.project("late_shipments")
    assert [(row["order_id"], row["order_time"], row["event_time"]) for row in rows] == [(1, day(1), day(1))]
    assert rows[0]["offset"] == 0


def test_second_pull_without_new_data_is_a_no_op(coordinator, late_shipments):
    coordinator.pull("late_shipments")
    head = coordinator.chain("late_shipments").head_hash()
    report = coordinator.pull("late_shipments")
    assert report.actions == []
    assert coordinator.chain("late_shipments").head_hash() == head
    assert coordinator.run_transform("late_shipments") is None


def test_set_watermark_releases_pending_orders(coordinator, late_shipments):
    coordinator.pull("late_shipments")
    coordinator.set_watermark("shipments", day(30))
    coordinator.pull("late_shipments")
    assert [row["order_id"] for row in coordinator.project("late_shipments")] == [1, 3]


def test_execution_records_inputs_and_checkpoints(coordinator, late_shipments):
    _, shipments_csv = late_shipments
    coordinator.pull("late_shipments")
    _ship_order_three(shipments_csv)
    coordinator.pull("late_shipments")
    first, second = _executions(coordinator)
    assert first.event.prior_checkpoint is None
    assert second.event.prior_checkpoint == first.event.new_checkpoint
    offsets = {entry.dataset_id: (entry.offset_start, entry.offset_end) for entry in second.event.input_slices}
    shipments_id = coordinator.workspace.resolve("shipments")
    orders_id = coordinator.workspace.resolve("orders")
    assert offsets == {orders_id: (3, 3), shipments_id: (1, 2)}
    assert coordinator.verify_integrity("late_shipments", recursive=True).valid


def test_replay_reproduces_every_execution(coordinator, late_shipments):
    _, shipments_csv = late_shipments
    coordinator.pull("late_shipments")
    _ship_order_three(shipments_csv)
    coordinator.pull("late_shipments")
    report = coordinator.verify_reproducibility("late_shipments")
    assert report.valid
    assert report.blocks_verified == 2


def test_forged_execution_is_caught_by_replay(coordinator, late_shipments):
    coordinator.pull("late_shipments")
    chain = coordinator.chain("late_shipments")
    forged = with_event(chain.head(), late_records_ignored=5)
    chain.head_path.write_text(coordinator.store.put(forged.canonical_bytes()) + "\n")
    report = coordinator.verify_reproducibility("late_shipments")
    assert not report.valid
    assert report.divergences[0].field == "late_records_ignored"
    assert report.divergences[0].sequence_number == forged.sequence_number


def test_restore_recreates_identical_slices_and_checkpoints(coordinator, late_shipments):
    _, shipments_csv = late_shipments
    coordinator.pull("late_shipments")
    _ship_order_three(shipments_csv)
    coordinator.pull("late_shipments")
    chain = coordinator.chain("late_shipments")
    head = chain.head().event
    objects = {head.output_slice.slice_hash, head.new_checkpoint}
    originals = {object_hash: coordinator.store.get(object_hash) for object_hash in objects}
    for object_hash in objects:
        coordinator.store.delete(object_hash)
    assert set(coordinator.missing_objects(chain)) == objects

    assert coordinator.restore("late_shipments") == 2
    assert {object_hash: coordinator.store.get(object_hash) for object_hash in objects} == originals
    assert coordinator.missing_objects(chain) == []


def test_pull_restores_missing_derivative_objects(coordinator, late_shipments):
    coordinator.pull("late_shipments")
    checkpoint = coordinator.chain("late_shipments").head().event.new_checkpoint
    coordinator.store.delete(checkpoint)
    report = coordinator.pull("late_shipments")
    assert [action.action for action in report.actions] == ["restored"]
    assert coordinator.store.contains(checkpoint)


def test_stable_reference_ignores_later_blocks(coordinator, data_dir):
    path = write_csv(data_dir / "orders.csv", ORDERS_SCHEMA.names, ORDERS[:1])
    coordinator.add_root("orders", ledger_source(ORDERS_SCHEMA, "order_time", ["order_id"]), path)
    coordinator.ingest("orders")
    as_of = coordinator.workspace.now()
    write_csv(path, ORDERS_SCHEMA.names, ORDERS)
    coordinator.ingest("orders")

    reference = coordinator.resolve_as_of("orders", as_of)
    assert reference.offset_end == 1
    assert [r.payload["order_id"] for r in coordinator.read_reference(reference)] == [1]
    assert [row["order_id"] for row in coordinator.project("orders", as_of=as_of)] == [1]
    assert [row["order_id"] for row in coordinator.project("orders")] == [1, 2, 3]
    assert [r.offset for r in coordinator.tail("orders", 2)] == [1, 2]


def test_stateless_query_change_keeps_the_checkpoint(coordinator, late_shipments):
    _, shipments_csv = late_shipments
    coordinator.pull("late_shipments")
    changed = LATE_SHIPMENTS_QUERY.replace("IS NULL", "IS NULL AND o.order_id > 0")
    assert coordinator.add_derivative("late_shipments", ["orders", "shipments"], changed).blocks_appended == 1
    _ship_order_three(shipments_csv)
    coordinator.pull("late_shipments")
    first, second = _executions(coordinator)
    assert second.event.prior_checkpoint == first.event.new_checkpoint
    assert coordinator.verify_reproducibility("late_shipments").valid


def test_stateful_query_change_resets_the_checkpoint(coordinator, late_shipments):
    _, shipments_csv = late_shipments
    coordinator.pull("late_shipments")
    changed = LATE_SHIPMENTS_QUERY.replace("'1' WEEK", "'2' WEEK")
    coordinator.add_derivative("late_shipments", ["orders", "shipments"], changed)
    _ship_order_three(shipments_csv)
    coordinator.pull("late_shipments")
    _, second = _executions(coordinator)
    assert second.event.prior_checkpoint is None
    assert coordinator.verify_reproducibility("late_shipments").valid


def test_redefining_with_the_same_query_appends_nothing(coordinator, late_shipments):
    result = coordinator.add_derivative("late_shipments", ["orders", "shipments"], LATE_SHIPMENTS_QUERY)
    assert result.blocks_appended == 0


def test_query_change_after_output_must_keep_the_schema(coordinator, late_shipments):
    _, shipments_csv = late_shipments
    _ship_order_three(shipments_csv)
    coordinator.set_watermark("shipments", day(30))
    coordinator.pull("late_shipments")
    changed = LATE_SHIPMENTS_QUERY.replace("o.order_time, o.order_id", "o.order_id")
    with pytest.raises(IncompatibleSchemaChange):
        coordinator.add_derivative("late_shipments", ["orders", "shipments"], changed)


def test_cycles_are_rejected(coordinator, data_dir):
    path = write_csv(data_dir / "orders.csv", ORDERS_SCHEMA.names, ORDERS)
    coordinator.add_root("orders", ledger_source(ORDERS_SCHEMA, "order_time", ["order_id"]), path)
    coordinator.add_derivative("a", ["orders"], "SELECT order_id, order_time FROM orders")
    coordinator.add_derivative("b", ["a"], "SELECT order_id, order_time FROM a")
    with pytest.raises(CycleDetected):
        coordinator.add_derivative("a", ["b"], "SELECT order_id, order_time FROM b")
    assert coordinator.topological_order(coordinator.workspace.resolve("b"))[-1] == coordinator.workspace.resolve("b")


def test_declared_inputs_must_match_the_query(coordinator, late_shipments):
    with pytest.raises(UserError, match="declares"):
        coordinator.add_derivative("only_orders", ["orders", "shipments"], "SELECT order_id FROM orders")


def test_names_keep_their_dataset_kind(coordinator, late_shipments):
    with pytest.raises(DatasetExists):
        coordinator.add_root("late_shipments", ledger_source(ORDERS_SCHEMA, "order_time", ["order_id"]))
    same = coordinator.add_root("orders", ledger_source(ORDERS_SCHEMA, "order_time", ["order_id"]))
    assert same.blocks_appended == 0


def test_failed_input_blocks_its_dependents(coordinator, late_shipments):
    _, shipments_csv = late_shipments
    shipments_csv.unlink()
    report = coordinator.pull("late_shipments")
    assert not report.ok
    (failure,) = report.failures
    assert failure.name == "shipments"
    assert failure.exit_code == 3
    assert report.skipped == [coordinator.workspace.resolve("late_shipments")]
    assert coordinator.chain("orders").summary().offset_end == 3


def test_windowed_derivative_counts_orders_per_day(coordinator, data_dir):
    rows = [(1, day(1)), (2, day(1)), (3, day(2)), (4, day(4))]
    path = write_csv(data_dir / "orders.csv", ORDERS_SCHEMA.names, rows)
    coordinator.add_root("orders", ledger_source(ORDERS_SCHEMA, "order_time", ["order_id"]), path)
    coordinator.add_derivative(
        "daily_orders", ["orders"], "SELECT COUNT(*) AS placed FROM orders GROUP BY TUMBLE(order_time, INTERVAL '1' DAY)"
    )
    coordinator.pull("daily_orders")
    rows = coordinator.project("daily_orders")
    assert [(row["event_time"], row["placed"]) for row in rows] == [(day(1), 2), (day(2), 1)]
    assert coordinator.chain("daily_orders").summary().watermark == day(4)
