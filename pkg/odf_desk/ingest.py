"""
Bringing external source files into root datasets.

Ledger sources are de-duplicated by primary key; snapshot sources are
historized into add/retract/correct events by diffing against the state
projected from the dataset's own history.
"""

import json
import logging
import math
import re
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Set

import pandas as pd
from opentelemetry.trace import get_tracer

from odf_desk.content_store import INT64_MAX, INT64_MIN, ObjectStore, canonicalize, decode, hash_bytes
from odf_desk.data_slices import ColumnDef, Record, SchemaDef, write_slice
from odf_desk.errors import (
    DuplicateKeyInSnapshot,
    DuplicateKeyWithinBatchConflict,
    IllegalEventForKind,
    InvalidEventSequence,
    MissingEventTime,
    ParseFailure,
    SourceUnavailable,
    TypeMismatch,
    UnsupportedValue,
)
from odf_desk.metadata_chain import AddData, LedgerMerge, MetadataBlock, MetadataChain
from odf_desk.timestamps import parse_timestamp, truncate

logger = logging.getLogger(__name__)
tracer = get_tracer(__name__)

_INTEGER = re.compile(r"^[+-]?\d+$")


def _reject_constant(name: str) -> Any:
    raise ValueError(f"non-finite constant {name}")


def _csv_value(column: ColumnDef, text: str, row: int) -> Any:
    if text == "" and (column.nullable or column.type != "string"):
        if column.nullable:
            return None
        raise TypeMismatch(f"column {column.name!r} is empty but not nullable", row)
    if column.type == "string":
        return text
    if column.type == "int64":
        if not _INTEGER.match(text.strip()) or not INT64_MIN <= int(text) <= INT64_MAX:
            raise TypeMismatch(f"column {column.name!r}: {text!r} is not an int64", row)
        return int(text)
    if column.type == "float64":
        try:
            value = float(text)
        except ValueError:
            raise TypeMismatch(f"column {column.name!r}: {text!r} is not a float64", row)
        if not math.isfinite(value):
            raise TypeMismatch(f"column {column.name!r}: {text!r} is not finite", row)
        return value
    if column.type == "bool":
        lowered = text.strip().lower()
        if lowered not in ("true", "false"):
            raise TypeMismatch(f"column {column.name!r}: {text!r} is not a bool", row)
        return lowered == "true"
    try:
        return parse_timestamp(text)
    except ValueError:
        raise ParseFailure(f"column {column.name!r}: cannot parse timestamp {text!r}", row)


def _json_value(column: ColumnDef, value: Any, row: int) -> Any:
    if value is None:
        if column.nullable:
            return None
        raise TypeMismatch(f"column {column.name!r} is null but not nullable", row)
    kind = column.type
    if kind == "string" and isinstance(value, str):
        return value
    if kind == "int64" and isinstance(value, int) and not isinstance(value, bool):
        if not INT64_MIN <= value <= INT64_MAX:
            raise TypeMismatch(f"column {column.name!r}: {value} overflows int64", row)
        return value
    if kind == "float64" and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind == "bool" and isinstance(value, bool):
        return value
    if kind == "timestamp" and isinstance(value, str):
        try:
            return parse_timestamp(value)
        except ValueError:
            raise ParseFailure(f"column {column.name!r}: cannot parse timestamp {value!r}", row)
    raise TypeMismatch(f"column {column.name!r}: expected {kind}, got {type(value).__name__}", row)


def _check_event_time(payload: dict, event_time_column: Optional[str], row: int) -> None:
    if event_time_column is not None and payload.get(event_time_column) is None:
        raise MissingEventTime(f"event time column {event_time_column!r} is empty", row)


def _read_csv(path: Path, schema: SchemaDef, event_time_column: Optional[str]) -> List[dict]:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise ParseFailure(f"{path.name} has no header row")
    except pd.errors.ParserError as exc:
        raise ParseFailure(f"{path.name} is not valid CSV: {exc}")
    unknown = [name for name in frame.columns if schema.column(str(name)) is None]
    if unknown:
        raise ParseFailure(f"{path.name} has columns not in the schema: {unknown}")
    for column in schema.columns:
        if column.name not in frame.columns and not column.nullable:
            raise ParseFailure(f"{path.name} is missing column {column.name!r}")
    rows = []
    for number, values in enumerate(frame.to_dict(orient="records"), start=1):
        payload = {}
        for column in schema.columns:
            text = values.get(column.name)
            if text is None:
                payload[column.name] = None
            elif column.name == event_time_column and text.strip() == "":
                raise MissingEventTime(f"event time column {column.name!r} is empty", number)
            else:
                payload[column.name] = _csv_value(column, text, number)
        _check_event_time(payload, event_time_column, number)
        rows.append(payload)
    return rows


def _read_ndjson(path: Path, schema: SchemaDef, event_time_column: Optional[str]) -> List[dict]:
    rows = []
    text = path.read_text(encoding="utf-8")
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            value = json.loads(line, parse_constant=_reject_constant)
        except ValueError as exc:
            raise ParseFailure(f"invalid JSON: {exc}", number)
        if not isinstance(value, dict):
            raise ParseFailure("line is not a JSON object", number)
        unknown = sorted(key for key in value if schema.column(key) is None)
        if unknown:
            raise ParseFailure(f"unknown fields {unknown}", number)
        if event_time_column is not None and value.get(event_time_column) is None:
            raise MissingEventTime(f"event time column {event_time_column!r} is missing", number)
        payload = {column.name: _json_value(column, value.get(column.name), number) for column in schema.columns}
        rows.append(payload)
    return rows


def read_source(path: Path, format: str, schema: SchemaDef, event_time_column: Optional[str]) -> List[dict]:
    """
    Read and type a source file.

    Rows are numbered from 1 (the CSV header is not counted).

    Raises:
        SourceUnavailable: If the file cannot be read.
        ParseFailure: For malformed rows, including MissingEventTime and TypeMismatch.
    """
    path = Path(path)
    if not path.is_file():
        raise SourceUnavailable(f"source file {path} does not exist")
    if format == "csv":
        return _read_csv(path, schema, event_time_column)
    if format == "ndjson":
        return _read_ndjson(path, schema, event_time_column)
    raise ParseFailure(f"unsupported source format {format!r}")


def row_key(payload: Mapping[str, Any], primary_key: Sequence[str]) -> str:
    """Canonical text of a row's primary key values; orders keys deterministically."""
    return canonicalize([payload[column] for column in primary_key]).decode("utf-8")


def merge_ledger(new_rows: Iterable[dict], seen_keys: Set[str], primary_key: Sequence[str]) -> List[dict]:
    """Drop rows whose key was ingested before; ``seen_keys`` is updated in place."""
    batch: Dict[str, dict] = {}
    survivors = []
    for payload in new_rows:
        key = row_key(payload, primary_key)
        if key in batch:
            if batch[key] != payload:
                raise DuplicateKeyWithinBatchConflict(f"key {key} appears twice with different values")
            continue
        batch[key] = payload
        if key in seen_keys:
            continue
        survivors.append(payload)
    seen_keys.update(row_key(payload, primary_key) for payload in survivors)
    return survivors


@dataclass(frozen=True)
class ChangeEvent:
    observed: str
    payload: dict


def merge_snapshot(
    prev_state: Mapping[str, dict], snapshot_rows: Iterable[dict], primary_key: Sequence[str]
) -> List[ChangeEvent]:
    """Diff a snapshot against the previous state; events are ordered by primary key."""
    snapshot: Dict[str, dict] = {}
    for payload in snapshot_rows:
        key = row_key(payload, primary_key)
        if key in snapshot:
            raise DuplicateKeyInSnapshot(f"key {key} appears more than once in the snapshot")
        snapshot[key] = payload
    events = []
    for key in sorted(set(prev_state) | set(snapshot)):
        before = prev_state.get(key)
        after = snapshot.get(key)
        if before is None:
            events.append(ChangeEvent("A", after))
        elif after is None:
            events.append(ChangeEvent("R", before))
        elif before != after:
            events.append(ChangeEvent("C", after))
    return events


def project_state(
    records: Iterable[Record], primary_key: Sequence[str], as_of_system_time: Optional[datetime] = None
) -> Dict[str, dict]:
    """Replay add/retract/correct events into the live rows, keyed by ``row_key``."""
    state: Dict[str, dict] = {}
    for record in sorted(records, key=lambda r: r.offset):
        if as_of_system_time is not None and record.system_time > as_of_system_time:
            continue
        key = row_key(record.payload, primary_key)
        if record.observed == "A":
            if key in state:
                raise InvalidEventSequence(f"offset {record.offset}: key {key} added twice")
            state[key] = dict(record.payload)
        elif record.observed == "C":
            if key not in state:
                raise InvalidEventSequence(f"offset {record.offset}: key {key} changed before it was added")
            state[key] = dict(record.payload)
        elif record.observed == "R":
            if key not in state:
                raise InvalidEventSequence(f"offset {record.offset}: key {key} removed before it was added")
            del state[key]
        else:
            raise InvalidEventSequence(f"offset {record.offset} carries no change marker")
    return state


def _seen_keys_path(dataset_dir: Path) -> Path:
    return Path(dataset_dir) / "seen_keys"


def load_seen_keys(dataset_dir: Path, chain: MetadataChain, primary_key: Sequence[str]) -> Set[str]:
    """Keys already ingested into a ledger dataset; the index is rebuilt from slices when stale."""
    path = _seen_keys_path(dataset_dir)
    head = chain.head_hash()
    if path.is_file():
        try:
            index = decode(path.read_bytes())
            if index.get("head_block_hash") == head and index.get("primary_key") == list(primary_key):
                return set(index["keys"])
        except (UnsupportedValue, AttributeError, KeyError, TypeError):
            logger.warning(f"Ignoring unreadable seen-keys index at {path}")
    logger.info(f"Rebuilding seen-keys index for dataset {chain.dataset_id}")
    return {row_key(record.payload, primary_key) for record in chain.records()}


def save_seen_keys(dataset_dir: Path, chain: MetadataChain, primary_key: Sequence[str], keys: Set[str]) -> None:
    path = _seen_keys_path(dataset_dir)
    path.write_bytes(
        canonicalize({"head_block_hash": chain.head_hash(), "primary_key": list(primary_key), "keys": sorted(keys)})
    )


@dataclass(frozen=True)
class IngestResult:
    block: Optional[MetadataBlock]
    records_added: int
    reason: str = ""

    @property
    def no_op(self) -> bool:
        return self.block is None


def source_fingerprint(path: Path) -> str:
    try:
        return hash_bytes(Path(path).read_bytes())
    except OSError as exc:
        raise SourceUnavailable(f"cannot read source {path}: {exc}") from exc


def ingest_round(
    store: ObjectStore,
    chain: MetadataChain,
    dataset_dir: Path,
    source_path: Path,
    system_time: datetime,
) -> IngestResult:
    """
    Ingest one version of a root dataset's source.

    Appends an AddData block when the source changed since the last round;
    re-ingesting identical bytes is a no-op.
    """
    system_time = truncate(system_time)
    summary = chain.summary()
    source = summary.polling_source
    if summary.kind != "root" or source is None:
        raise IllegalEventForKind(f"dataset {summary.name} has no polling source to ingest from")

    with tracer.start_as_current_span("ingest_round") as span:
        span.set_attribute("odf.dataset_id", chain.dataset_id)
        fingerprint = source_fingerprint(source_path)
        if fingerprint == summary.last_source_fingerprint:
            logger.info(f"Source for {summary.name} unchanged; nothing to ingest")
            return IngestResult(None, 0, "source unchanged")

        schema = source.schema_def
        rows = read_source(source_path, source.format, schema, source.event_time_column)
        lateness = timedelta(milliseconds=source.allowed_lateness_ms)
        primary_key = list(source.merge.primary_key)
        seen: Optional[Set[str]] = None

        if isinstance(source.merge, LedgerMerge):
            seen = load_seen_keys(dataset_dir, chain, primary_key)
            survivors = merge_ledger(rows, seen, primary_key)
            records = [
                Record(summary.offset_end + i, system_time, payload[source.event_time_column], payload)
                for i, payload in enumerate(survivors)
            ]
            observed_max = max((payload[source.event_time_column] for payload in rows), default=None)
        else:
            previous = project_state(chain.records(), primary_key)
            events = merge_snapshot(previous, rows, primary_key)
            records = [
                Record(summary.offset_end + i, system_time, system_time, event.payload, event.observed)
                for i, event in enumerate(events)
            ]
            observed_max = system_time

        watermark = summary.watermark
        if observed_max is not None:
            candidate = observed_max - lateness
            if watermark is None or candidate > watermark:
                watermark = candidate

        output_slice = None
        if records:
            output_slice = write_slice(store, records, schema, summary.offset_end)
        block = chain.append(
            AddData(output_slice=output_slice, output_watermark=watermark, source_fingerprint=fingerprint),
            system_time,
        )
        if seen is not None:
            save_seen_keys(dataset_dir, chain, primary_key, seen)
        span.set_attribute("odf.records_added", len(records))
        span.set_attribute("odf.block_sequence", block.sequence_number)
        logger.info(f"Ingested {len(records)} new records into {summary.name} (watermark {watermark})")
        return IngestResult(block, len(records), "ingested" if records else "no new records")
