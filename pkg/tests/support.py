"""Builders shared by the test modules."""

from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

from odf_desk.data_slices import ColumnDef, Record, SchemaDef
from odf_desk.metadata_chain import LedgerMerge, SetPollingSource, SnapshotMerge
from odf_desk.timestamps import format_timestamp, parse_timestamp

T0 = datetime(2024, 1, 1, tzinfo=timezone.utc)
EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)

LATE_SHIPMENTS_QUERY = """
SELECT o.order_time, o.order_id
FROM orders AS o
LEFT JOIN shipments AS s
  ON o.order_id = s.order_id
  AND s.shipment_time BETWEEN o.order_time AND o.order_time + INTERVAL '1' WEEK
WHERE s.shipment_id IS NULL
"""


class StepClock:
    """Wall clock stand-in: every reading moves ``step`` forward."""

    def __init__(self, start: datetime = T0, step: timedelta = timedelta(seconds=1)):
        self.current = start
        self.step = step

    def __call__(self) -> datetime:
        value = self.current
        self.current += self.step
        return value


def ts(text: str) -> datetime:
    return parse_timestamp(text)


def day(n: int) -> datetime:
    """Midnight of day ``n`` of January 2020 (day 1 is 2020-01-01)."""
    return datetime(2020, 1, 1, tzinfo=timezone.utc) + timedelta(days=n - 1)


def ms(n: int) -> datetime:
    return EPOCH + timedelta(milliseconds=n)


def schema(*columns: Tuple) -> SchemaDef:
    return SchemaDef(
        columns=tuple(ColumnDef(name=c[0], type=c[1], nullable=c[2] if len(c) > 2 else False) for c in columns)
    )


ORDERS_SCHEMA = schema(("order_id", "int64"), ("order_time", "timestamp"))
SHIPMENTS_SCHEMA = schema(("shipment_id", "int64"), ("order_id", "int64"), ("shipment_time", "timestamp"))
ACCOUNTS_SCHEMA = schema(("account_id", "int64"), ("owner", "string"), ("balance", "int64", True))


def ledger_source(
    source_schema: SchemaDef,
    event_time_column: str,
    primary_key: Sequence[str],
    lateness_ms: int = 0,
    format: str = "csv",
) -> SetPollingSource:
    return SetPollingSource(
        format=format,
        schema=source_schema,
        event_time_column=event_time_column,
        merge=LedgerMerge(primary_key=tuple(primary_key)),
        allowed_lateness_ms=lateness_ms,
    )


def snapshot_source(source_schema: SchemaDef, primary_key: Sequence[str], format: str = "csv") -> SetPollingSource:
    return SetPollingSource(format=format, schema=source_schema, merge=SnapshotMerge(primary_key=tuple(primary_key)))


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, datetime):
        return format_timestamp(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    lines = [",".join(header)]
    lines.extend(",".join(_csv_cell(value) for value in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return Path(path)


def make_records(
    rows: Iterable[Tuple[datetime, dict]], start_offset: int = 0, system_time: datetime = T0
) -> List[Record]:
    return [
        Record(start_offset + i, system_time, event_time, payload) for i, (event_time, payload) in enumerate(rows)
    ]


def add_late_shipments(coordinator, directory: Path, orders, shipments, lateness_ms: int = 0):
    """
    Register ``orders`` and ``shipments`` roots backed by CSV files plus the
    ``late_shipments`` derivative. Rows are ``(order_id, order_time)`` and
    ``(shipment_id, order_id, shipment_time)``.
    """
    orders_csv = write_csv(directory / "orders.csv", ORDERS_SCHEMA.names, orders)
    shipments_csv = write_csv(directory / "shipments.csv", SHIPMENTS_SCHEMA.names, shipments)
    coordinator.add_root("orders", ledger_source(ORDERS_SCHEMA, "order_time", ["order_id"], lateness_ms), orders_csv)
    coordinator.add_root(
        "shipments", ledger_source(SHIPMENTS_SCHEMA, "shipment_time", ["shipment_id"], lateness_ms), shipments_csv
    )
    coordinator.add_derivative("late_shipments", ["orders", "shipments"], LATE_SHIPMENTS_QUERY)
    return orders_csv, shipments_csv
