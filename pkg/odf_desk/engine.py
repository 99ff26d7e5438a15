"""
Deterministic, watermark-driven execution of analyzed queries.

``execute`` is a pure function of its request: it never reads the clock,
the environment or storage. All state an execution carries forward lives
in the returned checkpoint, whose canonical encoding is content-addressed.

Inside the engine timestamps are integer epoch milliseconds.
"""

import copy
import logging
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, ValidationError

from odf_desk.content_store import INT64_MAX, INT64_MIN, ObjectStore, canonicalize, decode, hash_bytes
from odf_desk.data_slices import Record, SchemaDef
from odf_desk.errors import (
    AggregateOverflow,
    EngineVersionUnavailable,
    MalformedCheckpoint,
    SchemaMismatch,
    UnsupportedValue,
    WatermarkRegression,
)
from odf_desk.expressions import Aggregate
from odf_desk.query_dsl import SYSTEM_COLUMNS, AnalyzedQuery, temporal_reach
from odf_desk.timestamps import UTC_MAX, from_millis, optional_from_millis, optional_millis, to_millis

logger = logging.getLogger(__name__)

ENGINE_NAME = "desk-sql"
PLAN_SEMANTICS_REVISION = 1

CLOSE_WATERMARK = UTC_MAX

Source = Tuple[str, int]


class EngineVersion(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    version: str
    version_hash: str

    @classmethod
    def of(cls, name: str, version: str, revision: int = PLAN_SEMANTICS_REVISION) -> "EngineVersion":
        digest = hash_bytes(canonicalize({"name": name, "version": version, "revision": revision}))
        return cls(name=name, version=version, version_hash=digest)


@dataclass(frozen=True)
class EngineRelease:
    name: str
    version: str
    revision: int

    @property
    def engine_version(self) -> EngineVersion:
        return EngineVersion.of(self.name, self.version, self.revision)


RELEASES = (
    EngineRelease(ENGINE_NAME, "1.0.0", PLAN_SEMANTICS_REVISION),
    EngineRelease(ENGINE_NAME, "1.1.0", PLAN_SEMANTICS_REVISION),
)

DEFAULT_ENGINE_VERSION = "1.1.0"

REGISTRY: Dict[str, EngineRelease] = {release.engine_version.version_hash: release for release in RELEASES}


def engine_version(name: str = ENGINE_NAME, version: str = DEFAULT_ENGINE_VERSION) -> EngineVersion:
    """Look up a registered engine by name and version."""
    for release in RELEASES:
        if release.name == name and release.version == version:
            return release.engine_version
    raise EngineVersionUnavailable(f"engine {name} {version} is not available")


# Checkpoints


@dataclass
class WindowState:
    start: int
    group: List[Any]
    accumulators: List[List[Any]]
    sources: List[Source] = field(default_factory=list, compare=False)


@dataclass
class BufferedRecord:
    offset: int
    event_time: int
    row: Dict[str, Any]


class _WindowDoc(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True)

    window_start: int
    group: List[Any]
    accumulators: List[List[Any]]


class _BufferedDoc(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True)

    offset: int
    event_time: int
    row: Dict[str, Any]


class _CheckpointDoc(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True)

    kind: str
    input_watermarks: Dict[str, Optional[int]]
    late_ignored_total: int
    open_windows: List[_WindowDoc]
    left_buffer: List[_BufferedDoc]
    right_buffer: List[_BufferedDoc]


@dataclass
class Checkpoint:
    """
    Engine state between invocations.

    Left join rows need no matched flags: a buffered left record is
    resolved, matched or not, in one step when the right watermark passes
    its match window.
    """

    kind: str
    input_watermarks: Dict[str, Optional[int]]
    late_ignored_total: int = 0
    open_windows: Dict[Tuple[int, bytes], WindowState] = field(default_factory=dict)
    left_buffer: List[BufferedRecord] = field(default_factory=list)
    right_buffer: List[BufferedRecord] = field(default_factory=list)

    @classmethod
    def empty(cls, query: AnalyzedQuery) -> "Checkpoint":
        return cls(kind=query.kind, input_watermarks={alias: None for alias in query.aliases})

    def to_plain(self) -> dict:
        windows = [self.open_windows[key] for key in sorted(self.open_windows)]
        return {
            "kind": self.kind,
            "input_watermarks": dict(self.input_watermarks),
            "late_ignored_total": self.late_ignored_total,
            "open_windows": [
                {"window_start": w.start, "group": w.group, "accumulators": w.accumulators} for w in windows
            ],
            "left_buffer": [{"offset": b.offset, "event_time": b.event_time, "row": b.row} for b in self.left_buffer],
            "right_buffer": [
                {"offset": b.offset, "event_time": b.event_time, "row": b.row} for b in self.right_buffer
            ],
        }

    @classmethod
    def from_plain(cls, data: Any) -> "Checkpoint":
        try:
            doc = _CheckpointDoc.model_validate(data)
        except ValidationError as exc:
            raise MalformedCheckpoint(f"checkpoint does not match the engine state layout: {exc}") from exc
        windows = {}
        for window in doc.open_windows:
            key = (window.window_start, canonicalize(window.group))
            windows[key] = WindowState(window.window_start, list(window.group), [list(a) for a in window.accumulators])
        return cls(
            kind=doc.kind,
            input_watermarks=dict(doc.input_watermarks),
            late_ignored_total=doc.late_ignored_total,
            open_windows=windows,
            left_buffer=[BufferedRecord(b.offset, b.event_time, dict(b.row)) for b in doc.left_buffer],
            right_buffer=[BufferedRecord(b.offset, b.event_time, dict(b.row)) for b in doc.right_buffer],
        )

    def canonical_bytes(self) -> bytes:
        return canonicalize(self.to_plain())

    @property
    def checkpoint_hash(self) -> str:
        return hash_bytes(self.canonical_bytes())


def checkpoint_save(store: ObjectStore, checkpoint: Checkpoint) -> str:
    return store.put(checkpoint.canonical_bytes())


def checkpoint_load(store: ObjectStore, checkpoint_hash: str) -> Checkpoint:
    data = store.get(checkpoint_hash)
    try:
        plain = decode(data)
    except UnsupportedValue as exc:
        raise MalformedCheckpoint(f"checkpoint {checkpoint_hash} cannot be decoded: {exc}") from exc
    return Checkpoint.from_plain(plain)


# Requests and responses


@dataclass(frozen=True)
class InputBatch:
    records: Sequence[Record] = ()
    watermark: Optional[datetime] = None


@dataclass(frozen=True)
class TransformRequest:
    query: AnalyzedQuery
    inputs: Mapping[str, InputBatch]
    prior_checkpoint: Optional[Checkpoint] = None
    track_sources: bool = False


@dataclass(frozen=True)
class OutputRecord:
    event_time: datetime
    payload: Dict[str, Any]


@dataclass
class TransformResponse:
    records: List[OutputRecord]
    checkpoint: Checkpoint
    output_watermark: Optional[datetime]
    late_records_ignored: int
    sources: Optional[List[Tuple[Source, ...]]] = None


@dataclass(frozen=True)
class ResetRequired:
    reason: str


# Aggregates


def _new_accumulator(aggregate: Aggregate) -> List[Any]:
    if aggregate.func == "COUNT":
        return [0]
    if aggregate.func == "AVG":
        return [None, 0]
    return [None]


def _checked_sum(total: Any, value: Any) -> Any:
    result = value if total is None else total + value
    if isinstance(result, int) and not INT64_MIN <= result <= INT64_MAX:
        raise AggregateOverflow(f"aggregate sum {result} overflows int64")
    if isinstance(result, float) and result in (float("inf"), float("-inf")):
        raise AggregateOverflow("aggregate sum overflows float64")
    return result


def _accumulate(aggregate: Aggregate, accumulator: List[Any], row: Dict[str, Any]) -> None:
    value = None if aggregate.argument is None else aggregate.argument.evaluate(row)
    if aggregate.func == "COUNT":
        if aggregate.argument is None or value is not None:
            accumulator[0] = _checked_sum(accumulator[0], 1)
        return
    if value is None:
        return
    if aggregate.func == "SUM":
        accumulator[0] = _checked_sum(accumulator[0], value)
    elif aggregate.func == "AVG":
        accumulator[0] = _checked_sum(accumulator[0], value)
        accumulator[1] += 1
    elif aggregate.func == "MIN":
        if accumulator[0] is None or value < accumulator[0]:
            accumulator[0] = value
    elif accumulator[0] is None or value > accumulator[0]:
        accumulator[0] = value


def _finish(aggregate: Aggregate, accumulator: List[Any]) -> Any:
    if aggregate.func == "AVG":
        return None if accumulator[1] == 0 else accumulator[0] / accumulator[1]
    return accumulator[0]


# Helpers


def _floor(millis: int, width: int) -> int:
    return millis - millis % width


def _input_row(record: Record, schema: SchemaDef, prefix: str = "") -> Dict[str, Any]:
    if set(record.payload) != set(schema.names):
        raise SchemaMismatch(
            f"record at offset {record.offset} has columns {sorted(record.payload)}, expected {schema.names}"
        )
    row = {}
    for column in schema.columns:
        value = record.payload[column.name]
        if column.type == "timestamp" and value is not None:
            value = to_millis(value)
        row[prefix + column.name] = value
    row[prefix + "offset"] = record.offset
    row[prefix + "system_time"] = to_millis(record.system_time)
    row[prefix + "event_time"] = to_millis(record.event_time)
    row[prefix + "observed"] = record.observed
    return row


def _null_row(schema: SchemaDef, prefix: str) -> Dict[str, Any]:
    names = [name for name, _, _ in SYSTEM_COLUMNS] + schema.names
    return {prefix + name: None for name in names}


def _output(query: AnalyzedQuery, values: Dict[str, Any], event_time: int) -> OutputRecord:
    payload = {}
    for column in query.output_schema.columns:
        value = values[column.name]
        if value is not None:
            if column.type == "timestamp":
                value = from_millis(value)
            elif column.type == "float64" and isinstance(value, int):
                value = float(value)
        payload[column.name] = value
    return OutputRecord(event_time=from_millis(event_time), payload=payload)


def _project(query: AnalyzedQuery, row: Dict[str, Any], event_time: int) -> Optional[OutputRecord]:
    if query.predicate is not None and query.predicate.evaluate(row) is not True:
        return None
    return _output(query, {name: expr.evaluate(row) for name, expr in query.outputs}, event_time)


def _advance(prior: Optional[int], new: Optional[int], alias: str) -> Optional[int]:
    if new is None:
        if prior is not None:
            raise WatermarkRegression(f"input {alias!r} watermark cannot be withdrawn")
        return None
    if prior is not None and new < prior:
        raise WatermarkRegression(f"input {alias!r} watermark moved backwards")
    return new


def _output_watermark_ms(query: AnalyzedQuery, watermarks: Mapping[str, Optional[int]]) -> Optional[int]:
    values = [watermarks.get(alias) for alias in query.aliases]
    if any(value is None for value in values):
        return None
    if query.kind == "windowed":
        return _floor(min(values), query.window_size_ms)
    if query.kind == "joined":
        left, right = values
        return min(left, right - query.join.upper_bound_ms)
    return min(values)


def advance_watermark(
    query: AnalyzedQuery, input_watermarks: Mapping[str, Optional[datetime]]
) -> Optional[datetime]:
    """Output event-time bound implied by the given input watermarks."""
    millis = {alias: optional_millis(value) for alias, value in input_watermarks.items()}
    return optional_from_millis(_output_watermark_ms(query, millis))


# Execution


class Engine:
    """One registered engine release."""

    def __init__(self, release: EngineRelease):
        self.release = release

    @property
    def version(self) -> EngineVersion:
        return self.release.engine_version

    def execute(self, request: TransformRequest) -> TransformResponse:
        query = request.query
        if request.prior_checkpoint is None:
            state = Checkpoint.empty(query)
        else:
            state = copy.deepcopy(request.prior_checkpoint)
            self._check_compatible(query, state)
        sources: Optional[List[Tuple[Source, ...]]] = [] if request.track_sources else None
        batches = {alias: request.inputs.get(alias, InputBatch()) for alias in query.aliases}
        new_watermarks = {}
        for alias, batch in batches.items():
            requested = optional_millis(batch.watermark)
            if batch.watermark is None and request.inputs.get(alias) is None:
                requested = state.input_watermarks.get(alias)
            new_watermarks[alias] = _advance(state.input_watermarks.get(alias), requested, alias)

        if query.kind == "windowed":
            outputs, late = self._windowed(query, state, batches, new_watermarks, sources)
        elif query.kind == "joined":
            outputs, late = self._joined(query, state, batches, new_watermarks, sources)
        else:
            outputs, late = self._stateless(query, batches, sources)

        state.input_watermarks = new_watermarks
        state.late_ignored_total += late
        return TransformResponse(
            records=outputs,
            checkpoint=state,
            output_watermark=optional_from_millis(_output_watermark_ms(query, new_watermarks)),
            late_records_ignored=late,
            sources=sources,
        )

    @staticmethod
    def _check_compatible(query: AnalyzedQuery, state: Checkpoint) -> None:
        if state.kind != query.kind:
            raise MalformedCheckpoint(f"checkpoint holds {state.kind} state but the plan is {query.kind}")
        if set(state.input_watermarks) != set(query.aliases):
            raise MalformedCheckpoint(f"checkpoint inputs {sorted(state.input_watermarks)} do not match the plan")
        for window in state.open_windows.values():
            if len(window.accumulators) != len(query.aggregates) or len(window.group) != len(query.group_by):
                raise MalformedCheckpoint("checkpoint windows do not match the plan's aggregates")

    def _stateless(self, query, batches, sources):
        alias = query.aliases[0]
        schema = query.input_schemas[alias]
        outputs = []
        for record in batches[alias].records:
            row = _input_row(record, schema)
            produced = _project(query, row, row["event_time"])
            if produced is not None:
                outputs.append(produced)
                if sources is not None:
                    sources.append(((alias, record.offset),))
        return outputs, 0

    def _windowed(self, query, state, batches, new_watermarks, sources):
        alias = query.aliases[0]
        schema = query.input_schemas[alias]
        width = query.window_size_ms
        prior = state.input_watermarks.get(alias)
        late = 0
        for record in batches[alias].records:
            row = _input_row(record, schema)
            event_time = row["event_time"]
            if prior is not None and event_time < prior:
                late += 1
                continue
            if query.predicate is not None and query.predicate.evaluate(row) is not True:
                continue
            start = _floor(event_time, width)
            group = [ref.evaluate(row) for ref in query.group_by]
            key = (start, canonicalize(group))
            window = state.open_windows.get(key)
            if window is None:
                window = WindowState(start, group, [_new_accumulator(a) for a in query.aggregates])
                state.open_windows[key] = window
            for aggregate, accumulator in zip(query.aggregates, window.accumulators):
                _accumulate(aggregate, accumulator, row)
            if sources is not None:
                window.sources.append((alias, record.offset))

        outputs = []
        watermark = new_watermarks[alias]
        if watermark is None:
            return outputs, late
        for key in sorted(state.open_windows):
            window = state.open_windows[key]
            if window.start + width > watermark:
                continue
            values = {}
            for name, expr in query.outputs:
                if isinstance(expr, Aggregate):
                    index = query.aggregates.index(expr)
                    values[name] = _finish(expr, window.accumulators[index])
                else:
                    values[name] = window.group[[ref.key for ref in query.group_by].index(expr.key)]
            outputs.append(_output(query, values, window.start))
            if sources is not None:
                sources.append(tuple(window.sources))
            del state.open_windows[key]
        return outputs, late

    def _joined(self, query, state, batches, new_watermarks, sources):
        join = query.join
        left_alias, right_alias = join.left.alias, join.right.alias
        left_schema = query.input_schemas[left_alias]
        right_schema = query.input_schemas[right_alias]
        upper = join.upper_bound_ms
        prior_left = state.input_watermarks.get(left_alias)
        prior_right = state.input_watermarks.get(right_alias)
        late = 0
        outputs: List[OutputRecord] = []

        for record in batches[right_alias].records:
            row = _input_row(record, right_schema, right_alias + ".")
            event_time = row[join.right_time.key]
            if prior_right is not None and event_time < prior_right:
                late += 1
                continue
            state.right_buffer.append(BufferedRecord(record.offset, event_time, row))

        for record in batches[left_alias].records:
            row = _input_row(record, left_schema, left_alias + ".")
            event_time = row[join.left_time.key]
            if prior_left is not None and event_time < prior_left:
                late += 1
                continue
            state.left_buffer.append(BufferedRecord(record.offset, event_time, row))

        left_watermark = new_watermarks[left_alias]
        right_watermark = new_watermarks[right_alias]
        if right_watermark is not None:
            ready = [b for b in state.left_buffer if right_watermark > b.event_time + upper]
            state.left_buffer = [b for b in state.left_buffer if right_watermark <= b.event_time + upper]
            # resolution order is (event_time, offset) regardless of arrival order
            for buffered in sorted(ready, key=lambda b: (b.event_time, b.offset)):
                self._resolve(query, buffered, state.right_buffer, right_schema, outputs, sources)

        if left_watermark is not None:
            horizon = min([left_watermark] + [b.event_time for b in state.left_buffer])
            state.right_buffer = [b for b in state.right_buffer if b.event_time >= horizon]
        return outputs, late

    @staticmethod
    def _resolve(query, left: BufferedRecord, right_buffer, right_schema, outputs, sources) -> None:
        join = query.join
        upper = join.upper_bound_ms
        left_keys = [left.row[ref.key] for ref, _ in join.keys]
        rows = []
        if None not in left_keys:
            for right in right_buffer:
                if not left.event_time <= right.event_time <= left.event_time + upper:
                    continue
                if [right.row[ref.key] for _, ref in join.keys] != left_keys:
                    continue
                rows.append(({**left.row, **right.row}, ((join.left.alias, left.offset), (join.right.alias, right.offset))))
        if not rows and join.kind == "left":
            null_right = _null_row(right_schema, join.right.alias + ".")
            rows.append(({**left.row, **null_right}, ((join.left.alias, left.offset),)))
        for row, contributing in rows:
            produced = _project(query, row, left.event_time)
            if produced is not None:
                outputs.append(produced)
                if sources is not None:
                    sources.append(contributing)


def get_engine(version: EngineVersion) -> Engine:
    """The engine recorded by ``version``; fails loudly for unknown or inconsistent versions."""
    release = REGISTRY.get(version.version_hash)
    if release is None or release.name != version.name or release.version != version.version:
        raise EngineVersionUnavailable(
            f"engine {version.name} {version.version} ({version.version_hash[:12]}) is not available"
        )
    return Engine(release)


def execute(request: TransformRequest, version: Optional[EngineVersion] = None) -> TransformResponse:
    return get_engine(version or engine_version()).execute(request)


def _stateful_signature(query: AnalyzedQuery) -> Tuple:
    if query.kind == "windowed":
        return (
            query.window_size_ms,
            tuple(ref.key for ref in query.group_by),
            query.aggregates,
        )
    if query.kind == "joined":
        join = query.join
        return (
            join.kind,
            tuple((l.key, r.key) for l, r in join.keys),
            join.left_time.key,
            join.right_time.key,
            join.upper_bound_ms,
        )
    return ()


def handle_query_change(
    old: AnalyzedQuery, new: AnalyzedQuery, checkpoint: Optional[Checkpoint]
) -> Union[Optional[Checkpoint], ResetRequired]:
    """Carry ``checkpoint`` over to ``new`` when only stateless parts of the query changed."""
    if old.kind != new.kind:
        return ResetRequired(f"query class changed from {old.kind} to {new.kind}")
    if temporal_reach(old) != temporal_reach(new):
        return ResetRequired("temporal reach changed")
    if old.inputs != new.inputs:
        return ResetRequired("query inputs changed")
    if _stateful_signature(old) != _stateful_signature(new):
        return ResetRequired("stateful part of the query changed")
    return checkpoint
