"""
Metadata chain: the append-only, hash-linked ledger of dataset lifecycle events.

Blocks are stored in the content store; ``datasets/<id>/head`` names the
newest one. A dataset's ID is the hash of its Seed block.
"""

import logging
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Annotated, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from odf_desk.content_store import ObjectStore, canonicalize, check_hash, decode, hash_bytes
from odf_desk.data_slices import Record, SchemaDef, SliceRef, conform, event_time_range, parse_slice, read_slice
from odf_desk.engine import EngineVersion
from odf_desk.errors import (
    BlockNotFound,
    EmptyChain,
    IllegalEventForKind,
    IncompatibleSchemaChange,
    ObjectCorrupt,
    ObjectNotFound,
    OdfError,
    OffsetGap,
    SystemTimeRegression,
    UnsupportedValue,
    WatermarkRegression,
)
from odf_desk.timestamps import Timestamp, truncate

logger = logging.getLogger(__name__)

ZERO_HASH = "0" * 64


class _Event(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class LedgerMerge(_Event):
    kind: Literal["ledger"] = "ledger"
    primary_key: Tuple[str, ...] = Field(..., min_length=1)


class SnapshotMerge(_Event):
    kind: Literal["snapshot"] = "snapshot"
    primary_key: Tuple[str, ...] = Field(..., min_length=1)


MergeStrategy = Annotated[Union[LedgerMerge, SnapshotMerge], Field(discriminator="kind")]


class Seed(_Event):
    kind: Literal["Seed"] = "Seed"
    dataset_kind: Literal["root", "derivative"]
    dataset_name: str = Field(..., min_length=1)


class SetPollingSource(_Event):
    kind: Literal["SetPollingSource"] = "SetPollingSource"
    format: Literal["csv", "ndjson"]
    schema_def: SchemaDef = Field(..., alias="schema")
    event_time_column: Optional[str] = None
    merge: MergeStrategy
    allowed_lateness_ms: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_columns(self) -> "SetPollingSource":
        names = set(self.schema_def.names)
        missing = [column for column in self.merge.primary_key if column not in names]
        if missing:
            raise ValueError(f"primary key columns not in schema: {missing}")
        if isinstance(self.merge, SnapshotMerge):
            if self.event_time_column is not None:
                raise ValueError("snapshot sources take event time from ingestion; drop event_time_column")
            return self
        if self.event_time_column is None:
            raise ValueError("ledger sources need an event_time_column")
        column = self.schema_def.column(self.event_time_column)
        if column is None or column.type != "timestamp" or column.nullable:
            raise ValueError(f"event_time_column {self.event_time_column!r} must be a non-nullable timestamp column")
        return self


class TransformInput(_Event):
    dataset_id: str
    name: str = Field(..., min_length=1)


class SetTransform(_Event):
    kind: Literal["SetTransform"] = "SetTransform"
    inputs: Tuple[TransformInput, ...] = Field(..., min_length=1)
    query: str
    engine: EngineVersion
    output_schema: SchemaDef


class AddData(_Event):
    kind: Literal["AddData"] = "AddData"
    output_slice: Optional[SliceRef] = None
    output_watermark: Optional[Timestamp] = None
    source_fingerprint: str


class InputSlice(_Event):
    dataset_id: str
    offset_start: int = Field(..., ge=0)
    offset_end: int = Field(..., ge=0)
    watermark: Optional[Timestamp] = None
    head_block_hash: Optional[str] = None

    @model_validator(mode="after")
    def _check_interval(self) -> "InputSlice":
        if self.offset_end < self.offset_start:
            raise ValueError("offset_end precedes offset_start")
        return self


class ExecuteTransform(_Event):
    kind: Literal["ExecuteTransform"] = "ExecuteTransform"
    input_slices: Tuple[InputSlice, ...]
    prior_checkpoint: Optional[str] = None
    new_checkpoint: Optional[str] = None
    output_slice: Optional[SliceRef] = None
    output_watermark: Optional[Timestamp] = None
    late_records_ignored: int = Field(0, ge=0)


class SetWatermark(_Event):
    kind: Literal["SetWatermark"] = "SetWatermark"
    new_watermark: Timestamp


MetadataEvent = Annotated[
    Union[Seed, SetPollingSource, SetTransform, AddData, ExecuteTransform, SetWatermark],
    Field(discriminator="kind"),
]


class MetadataBlock(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    prev_block_hash: str
    sequence_number: int = Field(..., ge=0)
    system_time: Timestamp
    event: MetadataEvent

    def canonical_bytes(self) -> bytes:
        return canonicalize(self.model_dump(by_alias=True))

    @property
    def block_hash(self) -> str:
        return hash_bytes(self.canonical_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "MetadataBlock":
        return cls.model_validate(decode(data))


def event_watermark(event: BaseModel) -> Optional[datetime]:
    if isinstance(event, (AddData, ExecuteTransform)):
        return event.output_watermark
    if isinstance(event, SetWatermark):
        return event.new_watermark
    return None


def event_slice(event: BaseModel) -> Optional[SliceRef]:
    if isinstance(event, (AddData, ExecuteTransform)):
        return event.output_slice
    return None


@dataclass
class DatasetSummary:
    """Everything the coordinator needs to know about a chain, folded from its blocks."""

    dataset_id: Optional[str] = None
    name: Optional[str] = None
    kind: Optional[str] = None
    polling_source: Optional[SetPollingSource] = None
    transform: Optional[SetTransform] = None
    transform_sequence: Optional[int] = None
    watermark: Optional[datetime] = None
    offset_end: int = 0
    last_source_fingerprint: Optional[str] = None
    last_execute: Optional[ExecuteTransform] = None
    last_execute_sequence: Optional[int] = None
    input_offsets: Dict[str, int] = field(default_factory=dict)
    head_hash: Optional[str] = None
    head_sequence: Optional[int] = None
    head_system_time: Optional[datetime] = None

    @property
    def schema(self) -> Optional[SchemaDef]:
        if self.polling_source is not None:
            return self.polling_source.schema_def
        if self.transform is not None:
            return self.transform.output_schema
        return None

    def check(self, event: BaseModel, system_time: datetime) -> None:
        """Raise if ``event`` may not be appended after the blocks folded so far."""
        if self.head_system_time is not None and system_time < self.head_system_time:
            raise SystemTimeRegression(
                f"system time {system_time.isoformat()} precedes head at {self.head_system_time.isoformat()}"
            )
        if self.kind is None:
            if not isinstance(event, Seed):
                raise IllegalEventForKind("the first block of a chain must be Seed")
            return
        if isinstance(event, Seed):
            raise IllegalEventForKind("Seed may only appear once, as the first block")
        label = type(event).__name__
        if isinstance(event, (SetPollingSource, AddData, SetWatermark)) and self.kind != "root":
            raise IllegalEventForKind(f"{label} is only allowed on root datasets")
        if isinstance(event, (SetTransform, ExecuteTransform)) and self.kind != "derivative":
            raise IllegalEventForKind(f"{label} is only allowed on derivative datasets")
        if isinstance(event, SetPollingSource) and self.polling_source is not None:
            if not event.schema_def.is_nullable_extension_of(self.polling_source.schema_def):
                raise IncompatibleSchemaChange("a new schema may only append nullable columns")
        if isinstance(event, SetTransform) and self.transform is not None and self.offset_end > 0:
            if not event.output_schema.is_nullable_extension_of(self.transform.output_schema):
                raise IncompatibleSchemaChange("a new query may only append nullable output columns")
        if isinstance(event, AddData) and self.polling_source is None:
            raise IllegalEventForKind("AddData requires a SetPollingSource first")
        if isinstance(event, ExecuteTransform) and self.transform is None:
            raise IllegalEventForKind("ExecuteTransform requires a SetTransform first")
        output_slice = event_slice(event)
        if output_slice is not None and output_slice.offset_start != self.offset_end:
            raise OffsetGap(f"slice starts at offset {output_slice.offset_start}, dataset ends at {self.offset_end}")
        watermark = event_watermark(event)
        if watermark is not None and self.watermark is not None and watermark < self.watermark:
            raise WatermarkRegression(
                f"watermark {watermark.isoformat()} is behind current {self.watermark.isoformat()}"
            )

    def apply(self, block_hash: str, block: MetadataBlock) -> None:
        event = block.event
        if isinstance(event, Seed):
            self.dataset_id = block_hash
            self.name = event.dataset_name
            self.kind = event.dataset_kind
        elif isinstance(event, SetPollingSource):
            self.polling_source = event
        elif isinstance(event, SetTransform):
            self.transform = event
            self.transform_sequence = block.sequence_number
        elif isinstance(event, AddData):
            self.last_source_fingerprint = event.source_fingerprint
        elif isinstance(event, ExecuteTransform):
            self.last_execute = event
            self.last_execute_sequence = block.sequence_number
            for entry in event.input_slices:
                self.input_offsets[entry.dataset_id] = entry.offset_end
        output_slice = event_slice(event)
        if output_slice is not None:
            self.offset_end = output_slice.offset_end
        watermark = event_watermark(event)
        if watermark is not None:
            self.watermark = watermark
        self.head_hash = block_hash
        self.head_sequence = block.sequence_number
        self.head_system_time = block.system_time


class ValidationFailure(BaseModel):
    sequence_number: Optional[int] = None
    block_hash: Optional[str] = None
    kind: str
    message: str


class ValidationReport(BaseModel):
    dataset_id: Optional[str] = None
    block_count: int = 0
    failures: List[ValidationFailure] = []

    @property
    def valid(self) -> bool:
        return not self.failures

    @property
    def first_failure(self) -> Optional[ValidationFailure]:
        return self.failures[0] if self.failures else None

    def describe(self) -> str:
        if self.valid:
            return f"valid ({self.block_count} blocks)"
        failure = self.first_failure
        where = f"seq {failure.sequence_number}" if failure.sequence_number is not None else "head"
        return f"{failure.kind} at {where}: {failure.message}"


def write_text_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w", encoding="utf-8") as handle:
        handle.write(text)
    os.replace(tmp, path)


class MetadataChain:
    """
    One dataset's chain of blocks.

    A chain opened without a dataset id is empty; appending its Seed block
    fixes the id and creates ``datasets/<id>/head``.
    """

    def __init__(self, store: ObjectStore, datasets_root: Path, dataset_id: Optional[str] = None):
        self.store = store
        self.datasets_root = Path(datasets_root)
        self.dataset_id = dataset_id
        self._blocks: Dict[str, MetadataBlock] = {}
        self._ordered: Optional[Tuple[Optional[str], List[Tuple[str, MetadataBlock]]]] = None

    @property
    def head_path(self) -> Optional[Path]:
        if self.dataset_id is None:
            return None
        return self.datasets_root / self.dataset_id / "head"

    def head_hash(self) -> Optional[str]:
        path = self.head_path
        if path is None or not path.is_file():
            return None
        return check_hash(path.read_text(encoding="utf-8").strip())

    def _load(self, block_hash: str) -> MetadataBlock:
        block = self._blocks.get(block_hash)
        if block is None:
            block = MetadataBlock.from_bytes(self.store.get(block_hash))
            self._blocks[block_hash] = block
        return block

    def blocks(self) -> List[Tuple[str, MetadataBlock]]:
        """All ``(hash, block)`` pairs in sequence order."""
        head = self.head_hash()
        if self._ordered is not None and self._ordered[0] == head:
            return list(self._ordered[1])
        ordered = []
        cursor = head
        while cursor is not None and cursor != ZERO_HASH:
            block = self._load(cursor)
            ordered.append((cursor, block))
            cursor = block.prev_block_hash
        ordered.reverse()
        self._ordered = (head, ordered)
        return list(ordered)

    def head(self) -> MetadataBlock:
        head = self.head_hash()
        if head is None:
            raise EmptyChain("chain has no blocks")
        return self._load(head)

    def block_by_hash(self, block_hash: str) -> MetadataBlock:
        for candidate, block in self.blocks():
            if candidate == block_hash:
                return block
        raise BlockNotFound(f"block {block_hash} is not part of this chain")

    def summary(self) -> DatasetSummary:
        summary = DatasetSummary()
        for block_hash, block in self.blocks():
            summary.apply(block_hash, block)
        return summary

    def summary_at(self, block_hash: str) -> DatasetSummary:
        """Fold the chain up to and including ``block_hash``."""
        summary = DatasetSummary()
        for candidate, block in self.blocks():
            summary.apply(candidate, block)
            if candidate == block_hash:
                return summary
        raise BlockNotFound(f"block {block_hash} is not part of this chain")

    def append(self, event: BaseModel, system_time: datetime) -> MetadataBlock:
        system_time = truncate(system_time)
        summary = self.summary()
        summary.check(event, system_time)
        block = MetadataBlock(
            prev_block_hash=summary.head_hash or ZERO_HASH,
            sequence_number=0 if summary.head_sequence is None else summary.head_sequence + 1,
            system_time=system_time,
            event=event,
        )
        block_hash = self.store.put(block.canonical_bytes())
        self._blocks[block_hash] = block
        if self.dataset_id is None:
            self.dataset_id = block_hash
        write_text_atomic(self.head_path, block_hash + "\n")
        logger.info(
            f"Appended {type(event).__name__} block seq {block.sequence_number} to dataset {self.dataset_id}"
        )
        return block

    def records(
        self, offset_start: int = 0, offset_end: Optional[int] = None, head_hash: Optional[str] = None
    ) -> List[Record]:
        """
        Records with offsets in ``[offset_start, offset_end)``.

        Only blocks up to ``head_hash`` (default: the current head) are read,
        and records come back conformed to the schema in effect there.
        """
        summary = DatasetSummary()
        collected: List[Record] = []
        found = head_hash is None
        for block_hash, block in self.blocks():
            summary.apply(block_hash, block)
            ref = event_slice(block.event)
            overlaps = ref is not None and ref.offset_end > offset_start
            if overlaps and (offset_end is None or ref.offset_start < offset_end):
                for record in read_slice(self.store, ref, summary.schema):
                    if record.offset >= offset_start and (offset_end is None or record.offset < offset_end):
                        collected.append(record)
            if block_hash == head_hash:
                found = True
                break
        if not found:
            raise BlockNotFound(f"block {head_hash} is not part of this chain")
        if summary.schema is None:
            return collected
        return conform(collected, summary.schema)

    def blocks_as_of(self, system_time: datetime) -> List[MetadataBlock]:
        selected = []
        for _, block in self.blocks():
            if block.system_time > system_time:
                break
            selected.append(block)
        return selected

    def validate(self, allow_missing_checkpoints: bool = False) -> ValidationReport:
        """Recompute every hash and re-check every chain invariant."""
        report = ValidationReport(dataset_id=self.dataset_id)
        try:
            cursor = self.head_hash()
        except OdfError as exc:
            report.failures.append(ValidationFailure(kind="invalid_head", message=str(exc)))
            return report
        if cursor is None:
            report.failures.append(ValidationFailure(kind="empty_chain", message="dataset has no head"))
            return report

        walked: List[Tuple[str, MetadataBlock]] = []
        expected_sequence: Optional[int] = None
        while cursor != ZERO_HASH:
            failure = None
            try:
                block = MetadataBlock.from_bytes(self.store.get(cursor))
            except ObjectNotFound:
                failure = ("missing_block", "block object is missing")
            except ObjectCorrupt as exc:
                failure = ("block_hash_mismatch", str(exc))
            except (UnsupportedValue, ValidationError) as exc:
                failure = ("undecodable_block", str(exc).splitlines()[0])
            else:
                if block.block_hash != cursor:
                    failure = ("non_canonical_block", "block bytes are not in canonical form")
                elif expected_sequence is not None and block.sequence_number != expected_sequence:
                    failure = ("sequence_gap", f"expected seq {expected_sequence}, found {block.sequence_number}")
                elif block.sequence_number == 0 and block.prev_block_hash != ZERO_HASH:
                    failure = ("link_mismatch", "genesis block does not link to the zero hash")
            if failure is not None:
                report.failures.append(
                    ValidationFailure(
                        sequence_number=expected_sequence, block_hash=cursor, kind=failure[0], message=failure[1]
                    )
                )
                report.block_count = len(walked)
                return report
            walked.append((cursor, block))
            expected_sequence = block.sequence_number - 1
            if block.sequence_number == 0:
                break
            cursor = block.prev_block_hash

        walked.reverse()
        report.block_count = len(walked)
        if walked[0][1].sequence_number != 0:
            report.failures.append(
                ValidationFailure(kind="link_mismatch", message="chain does not reach a genesis block")
            )
            return report

        summary = DatasetSummary()
        for block_hash, block in walked:
            problems = self._check_block(summary, block, allow_missing_checkpoints)
            if not problems:
                try:
                    summary.check(block.event, block.system_time)
                except OdfError as exc:
                    problems = [(type(exc).__name__, str(exc))]
            for kind, message in problems:
                report.failures.append(
                    ValidationFailure(
                        sequence_number=block.sequence_number, block_hash=block_hash, kind=kind, message=message
                    )
                )
            summary.apply(block_hash, block)
        if report.failures:
            logger.warning(f"Dataset {self.dataset_id} failed validation: {report.describe()}")
        return report

    def _check_block(
        self, summary: DatasetSummary, block: MetadataBlock, allow_missing_checkpoints: bool
    ) -> List[Tuple[str, str]]:
        """Check objects a block references; rule checks are done by DatasetSummary.check."""
        problems: List[Tuple[str, str]] = []
        event = block.event
        output_slice = event_slice(event)
        if output_slice is not None:
            schema = None
            if isinstance(event, AddData) and summary.polling_source is not None:
                schema = summary.polling_source.schema_def
            elif isinstance(event, ExecuteTransform) and summary.transform is not None:
                schema = summary.transform.output_schema
            problems.extend(self._check_slice(output_slice, schema, block.system_time))
        if isinstance(event, ExecuteTransform):
            previous = summary.last_execute.new_checkpoint if summary.last_execute is not None else None
            if event.prior_checkpoint is not None and event.prior_checkpoint != previous:
                problems.append(
                    ("checkpoint_link_mismatch", "prior checkpoint is not the previous block's new checkpoint")
                )
            if event.new_checkpoint is not None:
                problems.extend(self._check_object(event.new_checkpoint, "checkpoint", allow_missing_checkpoints))
            if summary.transform is not None:
                declared = {entry.dataset_id for entry in summary.transform.inputs}
                for entry in event.input_slices:
                    if entry.dataset_id not in declared:
                        problems.append(("unknown_input", f"input {entry.dataset_id} is not declared by SetTransform"))
                    elif entry.offset_start != summary.input_offsets.get(entry.dataset_id, 0):
                        problems.append(
                            ("input_interval_gap", f"input {entry.dataset_id} interval starts at {entry.offset_start}")
                        )
        return problems

    def _check_object(self, object_hash: str, label: str, allow_missing: bool) -> List[Tuple[str, str]]:
        try:
            self.store.verify(object_hash)
        except ObjectNotFound:
            if allow_missing:
                return []
            return [(f"{label}_missing", f"{label} object {object_hash} is missing")]
        except ObjectCorrupt as exc:
            return [(f"{label}_hash_mismatch", str(exc))]
        return []

    def _check_slice(
        self, ref: SliceRef, schema: Optional[SchemaDef], system_time: datetime
    ) -> List[Tuple[str, str]]:
        problems = self._check_object(ref.slice_hash, "slice", allow_missing=False)
        if problems or schema is None:
            return problems
        try:
            records = parse_slice(self.store.get(ref.slice_hash), schema)
        except OdfError as exc:
            return [("slice_content_mismatch", str(exc))]
        offsets = [record.offset for record in records]
        if offsets != list(range(ref.offset_start, ref.offset_end)):
            return [("slice_content_mismatch", "record offsets do not match the slice reference")]
        if any(record.system_time != system_time for record in records):
            return [("slice_content_mismatch", "record system_time differs from its block")]
        if event_time_range(records) != (ref.event_time_min, ref.event_time_max):
            return [("slice_content_mismatch", "event time range does not match the slice reference")]
        return []


def open_chain(store: ObjectStore, datasets_root: Path, dataset_id: str) -> MetadataChain:
    check_hash(dataset_id)
    return MetadataChain(store, datasets_root, dataset_id)


def with_event(block: MetadataBlock, **changes) -> MetadataBlock:
    """Copy a block with a modified event (used to forge chains in tests and tools)."""
    return block.model_copy(update={"event": block.event.model_copy(update=changes)})


__all__ = [
    "AddData",
    "DatasetSummary",
    "ExecuteTransform",
    "InputSlice",
    "LedgerMerge",
    "MergeStrategy",
    "MetadataBlock",
    "MetadataChain",
    "MetadataEvent",
    "Seed",
    "SetPollingSource",
    "SetTransform",
    "SetWatermark",
    "SnapshotMerge",
    "TransformInput",
    "ValidationFailure",
    "ValidationReport",
    "ZERO_HASH",
    "event_slice",
    "event_watermark",
    "open_chain",
]
