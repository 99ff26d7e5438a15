import json
import random

import pytest

from odf_desk.data_slices import Record
from odf_desk.errors import (
    DuplicateKeyInSnapshot,
    DuplicateKeyWithinBatchConflict,
    InvalidEventSequence,
    MissingEventTime,
    SourceUnavailable,
    TypeMismatch,
)
from odf_desk.ingest import merge_ledger, merge_snapshot, project_state, read_source, row_key
from support import ACCOUNTS_SCHEMA, T0, ledger_source, ms, schema, snapshot_source, ts, write_csv

READINGS = schema(("reading_id", "int64"), ("taken_at", "timestamp"), ("value", "float64", True))


def _add_readings(coordinator, data_dir, rows, lateness_ms=0):
    path = write_csv(data_dir / "readings.csv", READINGS.names, rows)
    coordinator.add_root("readings", ledger_source(READINGS, "taken_at", ["reading_id"], lateness_ms), path)
    return path


def test_watermark_trails_the_latest_event_by_allowed_lateness(coordinator, data_dir):
    _add_readings(coordinator, data_dir, [(i, ms(i), 0.5) for i in range(1, 8)], lateness_ms=4)
    result = coordinator.ingest("readings")
    assert result.records_added == 7
    summary = coordinator.chain("readings").summary()
    assert summary.watermark == ms(3)
    assert summary.offset_end == 7


def test_records_take_event_time_from_the_declared_column(coordinator, data_dir):
    _add_readings(coordinator, data_dir, [(1, ts("2024-05-01T10:00:00Z"), 1.0)])
    coordinator.ingest("readings")
    (record,) = coordinator.chain("readings").records()
    assert record.event_time == ts("2024-05-01T10:00:00Z")
    assert record.payload == {"reading_id": 1, "taken_at": ts("2024-05-01T10:00:00Z"), "value": 1.0}


def test_reingesting_identical_bytes_is_a_no_op(coordinator, data_dir):
    _add_readings(coordinator, data_dir, [(1, ms(1), None)])
    coordinator.ingest("readings")
    head = coordinator.chain("readings").head_hash()
    result = coordinator.ingest("readings")
    assert result.no_op
    assert coordinator.chain("readings").head_hash() == head


def test_ledger_rows_are_deduplicated_by_primary_key(coordinator, data_dir):
    path = _add_readings(coordinator, data_dir, [(1, ms(1), 1.0), (2, ms(2), 2.0)])
    coordinator.ingest("readings")
    write_csv(path, READINGS.names, [(1, ms(1), 1.0), (2, ms(2), 2.0), (3, ms(3), 3.0)])
    result = coordinator.ingest("readings")
    assert result.records_added == 1
    assert [r.payload["reading_id"] for r in coordinator.chain("readings").records()] == [1, 2, 3]


def test_changed_file_with_nothing_new_still_records_the_round(coordinator, data_dir):
    path = _add_readings(coordinator, data_dir, [(1, ms(1), 1.0)])
    coordinator.ingest("readings")
    write_csv(path, READINGS.names, [(1, ms(1), 1.0), (1, ms(1), 1.0)])
    result = coordinator.ingest("readings")
    assert result.records_added == 0
    assert result.block is not None
    assert result.block.event.output_slice is None


def test_watermark_does_not_move_back_for_older_rows(coordinator, data_dir):
    path = _add_readings(coordinator, data_dir, [(1, ms(100), 1.0)])
    coordinator.ingest("readings")
    write_csv(path, READINGS.names, [(2, ms(10), 1.0)])
    coordinator.ingest("readings")
    assert coordinator.chain("readings").summary().watermark == ms(100)


def test_conflicting_duplicates_within_a_batch_are_rejected():
    rows = [{"id": 1, "v": "a"}, {"id": 1, "v": "b"}]
    with pytest.raises(DuplicateKeyWithinBatchConflict):
        merge_ledger(rows, set(), ["id"])


def test_identical_duplicates_within_a_batch_collapse():
    seen = set()
    survivors = merge_ledger([{"id": 1, "v": "a"}, {"id": 1, "v": "a"}], seen, ["id"])
    assert survivors == [{"id": 1, "v": "a"}]
    assert seen == {row_key({"id": 1}, ["id"])}


def test_missing_event_time_is_reported_with_its_row(data_dir):
    path = data_dir / "bad.csv"
    path.write_text("reading_id,taken_at,value\n1,2024-01-01T00:00:00Z,1\n2,,2\n")
    with pytest.raises(MissingEventTime) as excinfo:
        read_source(path, "csv", READINGS, "taken_at")
    assert excinfo.value.row == 2


def test_malformed_values_are_type_mismatches(data_dir):
    path = data_dir / "bad.csv"
    path.write_text("reading_id,taken_at,value\nseven,2024-01-01T00:00:00Z,1\n")
    with pytest.raises(TypeMismatch):
        read_source(path, "csv", READINGS, "taken_at")


def test_missing_source_file(data_dir):
    with pytest.raises(SourceUnavailable):
        read_source(data_dir / "absent.csv", "csv", READINGS, "taken_at")


def test_ndjson_sources(data_dir):
    path = data_dir / "readings.ndjson"
    lines = [
        {"reading_id": 1, "taken_at": "2024-01-01T00:00:00Z", "value": 1.5},
        {"reading_id": 2, "taken_at": "2024-01-01T00:00:01Z"},
    ]
    path.write_text("\n".join(json.dumps(line) for line in lines) + "\n")
    rows = read_source(path, "ndjson", READINGS, "taken_at")
    assert rows[1] == {"reading_id": 2, "taken_at": ts("2024-01-01T00:00:01Z"), "value": None}


def test_snapshot_ingest_historizes_changes(coordinator, data_dir):
    path = write_csv(data_dir / "accounts.csv", ACCOUNTS_SCHEMA.names, [(1, "ann", 10), (2, "bo", 20)])
    coordinator.add_root("accounts", snapshot_source(ACCOUNTS_SCHEMA, ["account_id"]), path)
    coordinator.ingest("accounts")
    write_csv(path, ACCOUNTS_SCHEMA.names, [(1, "ann", 15), (3, "cy", None)])
    coordinator.ingest("accounts")

    records = coordinator.chain("accounts").records()
    assert [(r.observed, r.payload["account_id"]) for r in records] == [
        ("A", 1),
        ("A", 2),
        ("C", 1),
        ("R", 2),
        ("A", 3),
    ]
    # snapshot rows carry their ingestion time as event time
    assert all(r.event_time == r.system_time for r in records)
    assert coordinator.project("accounts") == [
        {"account_id": 1, "owner": "ann", "balance": 15},
        {"account_id": 3, "owner": "cy", "balance": None},
    ]


def test_duplicate_keys_in_a_snapshot_are_rejected():
    with pytest.raises(DuplicateKeyInSnapshot):
        merge_snapshot({}, [{"k": 1}, {"k": 1}], ["k"])


def test_unchanged_snapshot_produces_no_events():
    state = {row_key({"k": 1, "v": "x"}, ["k"]): {"k": 1, "v": "x"}}
    assert merge_snapshot(state, [{"k": 1, "v": "x"}], ["k"]) == []


def test_projection_rejects_impossible_histories():
    removal = Record(0, T0, T0, {"k": 1}, observed="R")
    with pytest.raises(InvalidEventSequence):
        project_state([removal], ["k"])


@pytest.mark.parametrize("seed", range(100))
def test_snapshot_history_projects_back_to_the_latest_snapshot(seed):
    rng = random.Random(seed)
    records = []
    snapshot = []
    for round_number in range(rng.randint(1, 6)):
        keys = rng.sample(range(12), rng.randint(0, 12))
        snapshot = [{"k": key, "v": rng.choice(["a", "b", "c"])} for key in keys]
        previous = project_state(records, ["k"])
        system_time = ms(round_number)
        for event in merge_snapshot(previous, snapshot, ["k"]):
            records.append(Record(len(records), system_time, system_time, event.payload, event.observed))
    expected = {row_key(row, ["k"]): row for row in snapshot}
    assert project_state(records, ["k"]) == expected
