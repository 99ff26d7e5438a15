"""
Bitemporal records and the slice files that hold them.

A slice is one object in the content store: newline-delimited canonical
maps, one per record, each carrying the system columns ``offset``,
``system_time``, ``event_time`` (and ``observed`` on snapshot roots) next
to the payload columns of the dataset schema.
"""

import logging
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Iterable, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from odf_desk.content_store import INT64_MAX, INT64_MIN, ObjectStore, canonicalize, decode, hash_bytes
from odf_desk.errors import EmptyInput, MixedSystemTime, OffsetGap, SchemaViolation
from odf_desk.timestamps import Timestamp, parse_timestamp, truncate

logger = logging.getLogger(__name__)

ColumnType = Literal["string", "int64", "float64", "bool", "timestamp"]

RESERVED_COLUMNS = ("offset", "system_time", "event_time", "observed")

OBSERVED_VALUES = ("A", "R", "C")


class ColumnDef(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = Field(..., min_length=1)
    type: ColumnType
    nullable: bool = False


class SchemaDef(BaseModel):
    """Ordered user columns of a dataset."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    columns: Tuple[ColumnDef, ...]

    @model_validator(mode="after")
    def _check_names(self) -> "SchemaDef":
        seen = set()
        for column in self.columns:
            if column.name in RESERVED_COLUMNS:
                raise ValueError(f"column name {column.name!r} is reserved")
            if column.name in seen:
                raise ValueError(f"duplicate column name {column.name!r}")
            seen.add(column.name)
        return self

    @property
    def names(self) -> List[str]:
        return [column.name for column in self.columns]

    def column(self, name: str) -> Optional[ColumnDef]:
        for column in self.columns:
            if column.name == name:
                return column
        return None

    def is_nullable_extension_of(self, older: "SchemaDef") -> bool:
        """True when this schema is ``older`` plus appended nullable columns."""
        prefix = self.columns[: len(older.columns)]
        if tuple(prefix) != tuple(older.columns):
            return False
        return all(column.nullable for column in self.columns[len(older.columns) :])


class SliceRef(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    slice_hash: str
    offset_start: int = Field(..., ge=0)
    offset_end: int = Field(..., ge=0)
    event_time_min: Timestamp
    event_time_max: Timestamp
    record_count: int = Field(..., gt=0)

    @model_validator(mode="after")
    def _check_count(self) -> "SliceRef":
        if self.record_count != self.offset_end - self.offset_start:
            raise ValueError("record_count must equal offset_end - offset_start")
        if self.event_time_min > self.event_time_max:
            raise ValueError("event_time_min is after event_time_max")
        return self


@dataclass(frozen=True)
class Record:
    offset: int
    system_time: datetime
    event_time: datetime
    payload: dict = field(default_factory=dict)
    observed: Optional[str] = None

    def to_row(self) -> dict:
        row = dict(self.payload)
        row["offset"] = self.offset
        row["system_time"] = self.system_time
        row["event_time"] = self.event_time
        if self.observed is not None:
            row["observed"] = self.observed
        return row


def check_value(column: ColumnDef, value: Any) -> Any:
    """Type-check one payload value, returning its normalized form."""
    if value is None:
        if not column.nullable:
            raise SchemaViolation(f"column {column.name!r} is not nullable")
        return None
    kind = column.type
    if kind == "string" and isinstance(value, str):
        return value
    if kind == "int64" and isinstance(value, int) and not isinstance(value, bool):
        if not INT64_MIN <= value <= INT64_MAX:
            raise SchemaViolation(f"column {column.name!r}: {value} overflows int64")
        return value
    if kind == "float64" and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind == "bool" and isinstance(value, bool):
        return value
    if kind == "timestamp" and isinstance(value, datetime):
        if value.tzinfo is None:
            raise SchemaViolation(f"column {column.name!r}: naive timestamp")
        return truncate(value)
    raise SchemaViolation(f"column {column.name!r}: expected {kind}, got {type(value).__name__}")


def check_payload(payload: dict, schema: SchemaDef) -> dict:
    expected = schema.names
    extra = set(payload) - set(expected)
    if extra:
        raise SchemaViolation(f"columns not in schema: {sorted(extra)}")
    missing = set(expected) - set(payload)
    if missing:
        raise SchemaViolation(f"columns missing from record: {sorted(missing)}")
    return {column.name: check_value(column, payload[column.name]) for column in schema.columns}


def event_time_range(records: Sequence[Record]) -> Tuple[datetime, datetime]:
    if not records:
        raise EmptyInput("event_time_range of no records")
    lowest = highest = records[0].event_time
    for record in records[1:]:
        if record.event_time < lowest:
            lowest = record.event_time
        if record.event_time > highest:
            highest = record.event_time
    return lowest, highest


def _checked_records(records: Sequence[Record], schema: SchemaDef, starting_offset: int) -> List[Record]:
    if not records:
        raise EmptyInput("a slice needs at least one record")
    system_time = records[0].system_time
    checked = []
    for position, record in enumerate(records):
        expected_offset = starting_offset + position
        if record.offset != expected_offset:
            raise OffsetGap(f"expected offset {expected_offset}, found {record.offset}")
        if record.system_time != system_time:
            raise MixedSystemTime("all records of a slice must share one system_time")
        if record.observed is not None and record.observed not in OBSERVED_VALUES:
            raise SchemaViolation(f"invalid observed value {record.observed!r}")
        checked.append(
            Record(
                offset=record.offset,
                system_time=truncate(record.system_time),
                event_time=truncate(record.event_time),
                payload=check_payload(record.payload, schema),
                observed=record.observed,
            )
        )
    return checked


def encode_slice(records: Sequence[Record], schema: SchemaDef, starting_offset: int) -> Tuple[bytes, SliceRef]:
    """Encode records into slice bytes and describe them, without touching a store."""
    checked = _checked_records(records, schema, starting_offset)
    data = b"".join(canonicalize(record.to_row()) + b"\n" for record in checked)
    lowest, highest = event_time_range(checked)
    ref = SliceRef(
        slice_hash=hash_bytes(data),
        offset_start=starting_offset,
        offset_end=starting_offset + len(checked),
        event_time_min=lowest,
        event_time_max=highest,
        record_count=len(checked),
    )
    return data, ref


def write_slice(store: ObjectStore, records: Sequence[Record], schema: SchemaDef, starting_offset: int) -> SliceRef:
    data, ref = encode_slice(records, schema, starting_offset)
    store.put(data)
    logger.debug(f"Wrote slice {ref.slice_hash} offsets [{ref.offset_start}, {ref.offset_end})")
    return ref


def _parse_value(column: ColumnDef, value: Any) -> Any:
    if column.type == "timestamp" and isinstance(value, str):
        try:
            value = parse_timestamp(value)
        except ValueError as exc:
            raise SchemaViolation(f"column {column.name!r}: {exc}") from exc
    return check_value(column, value)


def _parse_row(row: Any, schema: SchemaDef) -> Record:
    if not isinstance(row, dict):
        raise SchemaViolation("slice line is not a map")
    payload = {key: value for key, value in row.items() if key not in RESERVED_COLUMNS}
    extra = set(payload) - set(schema.names)
    if extra:
        raise SchemaViolation(f"slice has columns not in schema: {sorted(extra)}")
    missing = set(schema.names) - set(payload)
    if missing:
        raise SchemaViolation(f"slice is missing columns: {sorted(missing)}")
    for system_column in ("offset", "system_time", "event_time"):
        if system_column not in row:
            raise SchemaViolation(f"slice line has no {system_column}")
    try:
        system_time = parse_timestamp(row["system_time"])
        event_time = parse_timestamp(row["event_time"])
    except ValueError as exc:
        raise SchemaViolation(str(exc)) from exc
    offset = row["offset"]
    if not isinstance(offset, int) or isinstance(offset, bool) or offset < 0:
        raise SchemaViolation(f"invalid offset {offset!r}")
    observed = row.get("observed")
    if observed is not None and observed not in OBSERVED_VALUES:
        raise SchemaViolation(f"invalid observed value {observed!r}")
    return Record(
        offset=offset,
        system_time=system_time,
        event_time=event_time,
        payload={column.name: _parse_value(column, payload[column.name]) for column in schema.columns},
        observed=observed,
    )


def parse_slice(data: bytes, schema: SchemaDef) -> List[Record]:
    if not data.endswith(b"\n"):
        raise SchemaViolation("slice does not end with a newline")
    return [_parse_row(decode(line), schema) for line in data[:-1].split(b"\n")]


def read_slice(store: ObjectStore, ref: SliceRef, schema: SchemaDef) -> List[Record]:
    records = parse_slice(store.get(ref.slice_hash), schema)
    if len(records) != ref.record_count or records[0].offset != ref.offset_start:
        raise SchemaViolation(f"slice {ref.slice_hash} does not match its reference")
    return records


def conform(records: Iterable[Record], schema: SchemaDef) -> List[Record]:
    """Pad records written under an older schema with nulls for appended columns."""
    conformed = []
    for record in records:
        if all(name in record.payload for name in schema.names):
            conformed.append(record)
            continue
        payload = {name: record.payload.get(name) for name in schema.names}
        conformed.append(
            Record(record.offset, record.system_time, record.event_time, payload, record.observed)
        )
    return conformed
