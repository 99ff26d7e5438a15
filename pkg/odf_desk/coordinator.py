"""
Coordinator: drives the dataset graph of a workspace.

It is the only component that writes derivative metadata. Engines are
called through the request/response contract; everything the engine
produced is recorded in ExecuteTransform blocks so any run can be replayed
and checked byte for byte.
"""

import graphlib
import logging
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, Iterator, List, Optional, Sequence, Set

from opentelemetry.trace import get_tracer
from pydantic import BaseModel

from odf_desk.data_slices import Record, encode_slice, write_slice
from odf_desk.engine import (
    Checkpoint,
    EngineVersion,
    InputBatch,
    ResetRequired,
    TransformRequest,
    TransformResponse,
    checkpoint_load,
    checkpoint_save,
    engine_version,
    get_engine,
    handle_query_change,
)
from odf_desk.errors import (
    BlockNotFound,
    CycleDetected,
    DatasetExists,
    IllegalEventForKind,
    MissingInput,
    OdfError,
    ReproducibilityFailure,
    SchemaMismatch,
    UserError,
)
from odf_desk.ingest import IngestResult, ingest_round, project_state
from odf_desk.metadata_chain import (
    DatasetSummary,
    ExecuteTransform,
    InputSlice,
    MetadataBlock,
    MetadataChain,
    Seed,
    SetPollingSource,
    SetTransform,
    SetWatermark,
    SnapshotMerge,
    TransformInput,
    ValidationReport,
    event_slice,
)
from odf_desk.query_dsl import AnalyzedQuery, compile_query
from odf_desk.timestamps import Timestamp, truncate
from odf_desk.workspace import Workspace

logger = logging.getLogger(__name__)
tracer = get_tracer(__name__)


class AddResult(BaseModel):
    dataset_id: str
    name: str
    blocks_appended: int


class PullAction(BaseModel):
    dataset_id: str
    name: Optional[str] = None
    action: str
    block_sequence: Optional[int] = None
    detail: str = ""


class PullFailure(BaseModel):
    dataset_id: str
    name: Optional[str] = None
    error: str
    exit_code: int = 1


class PullReport(BaseModel):
    actions: List[PullAction] = []
    failures: List[PullFailure] = []
    skipped: List[str] = []

    @property
    def ok(self) -> bool:
        return not self.failures


class IntegrityReport(BaseModel):
    reports: List[ValidationReport] = []

    @property
    def valid(self) -> bool:
        return all(report.valid for report in self.reports)


class Divergence(BaseModel):
    sequence_number: int
    field: str
    expected: Optional[str] = None
    actual: Optional[str] = None


class ReproducibilityReport(BaseModel):
    dataset_id: str
    blocks_verified: int = 0
    divergences: List[Divergence] = []

    @property
    def valid(self) -> bool:
        return not self.divergences


class StableReference(BaseModel):
    dataset_id: str
    as_of: Timestamp
    head_block_hash: Optional[str] = None
    block_count: int = 0
    offset_end: int = 0


@dataclass
class ReplayStep:
    block_hash: str
    block: MetadataBlock
    transform: SetTransform
    query: AnalyzedQuery
    input_ids: Dict[str, str]
    response: TransformResponse
    offset_start: int
    slice_data: Optional[bytes]
    slice_hash: Optional[str]
    checkpoint_hash: str
    output_watermark: Optional[datetime]
    divergences: List[Divergence] = field(default_factory=list)


def clamp_watermark(candidate: Optional[datetime], previous: Optional[datetime]) -> Optional[datetime]:
    """Recorded output watermarks never move backwards, even across resets."""
    if previous is None:
        return candidate
    if candidate is None or candidate < previous:
        return previous
    return candidate


def _text(value) -> Optional[str]:
    if value is None:
        return None
    if isinstance(value, datetime):
        return value.isoformat()
    return str(value)


class Coordinator:
    def __init__(self, workspace: Workspace):
        self.workspace = workspace
        self.store = workspace.store

    # chains and definitions

    def chain(self, name_or_id: str) -> MetadataChain:
        return self.workspace.chain(self.workspace.resolve(name_or_id))

    def _input_chain(self, dataset_id: str) -> MetadataChain:
        chain = self.workspace.chain(dataset_id)
        if chain.head_hash() is None:
            raise MissingInput(f"input dataset {dataset_id} is not present in this workspace")
        return chain

    def name_of(self, dataset_id: str) -> Optional[str]:
        name = self.workspace.name_of(dataset_id)
        if name is None:
            try:
                name = self.workspace.chain(dataset_id).summary().name
            except OdfError:
                return None
        return name

    def add_root(self, name: str, source: SetPollingSource, source_path=None) -> AddResult:
        """Create a root dataset, or evolve the polling source of an existing one."""
        system_time = self.workspace.now()
        names = self.workspace.names()
        if name in names:
            dataset_id = names[name]
            with self.workspace.lock(dataset_id):
                chain = self.workspace.chain(dataset_id)
                summary = chain.summary()
                if summary.kind != "root":
                    raise DatasetExists(f"{name!r} is a {summary.kind} dataset")
                appended = 0
                if summary.polling_source != source:
                    chain.append(source, system_time)
                    appended = 1
                if source_path is not None:
                    self.workspace.set_source_path(dataset_id, source_path)
            return AddResult(dataset_id=dataset_id, name=name, blocks_appended=appended)

        chain = self.workspace.chain()
        chain.append(Seed(dataset_kind="root", dataset_name=name), system_time)
        chain.append(source, system_time)
        self.workspace.register(name, chain.dataset_id)
        if source_path is not None:
            self.workspace.set_source_path(chain.dataset_id, source_path)
        logger.info(f"Created root dataset {name} ({chain.dataset_id})")
        return AddResult(dataset_id=chain.dataset_id, name=name, blocks_appended=2)

    def compile_transform(self, transform: SetTransform, heads: Optional[Dict[str, str]] = None) -> AnalyzedQuery:
        """Analyze a transform's query against its inputs' schemas (at ``heads`` if given)."""
        schemas = {}
        event_time_columns = {}
        for entry in transform.inputs:
            chain = self._input_chain(entry.dataset_id)
            head = (heads or {}).get(entry.dataset_id)
            summary = chain.summary_at(head) if head else chain.summary()
            if summary.schema is None:
                raise MissingInput(f"input {entry.name!r} has no schema yet")
            schemas[entry.name] = summary.schema
            source = summary.polling_source
            event_time_columns[entry.name] = source.event_time_column if source is not None else None
        return compile_query(transform.query, schemas, event_time_columns)

    def build_transform(self, query: str, input_names: Sequence[str], engine: EngineVersion) -> SetTransform:
        """Resolve input names and analyze ``query`` into a SetTransform event."""
        inputs = [TransformInput(dataset_id=self.workspace.resolve(name), name=name) for name in input_names]
        draft = SetTransform(
            inputs=tuple(inputs), query=query, engine=engine, output_schema={"columns": []}
        )
        analyzed = self.compile_transform(draft)
        used = [name for _, name in analyzed.inputs]
        if sorted(used) != sorted(input_names):
            raise UserError(f"query reads inputs {used} but the definition declares {list(input_names)}")
        ordered = tuple(next(i for i in inputs if i.name == name) for name in used)
        return SetTransform(inputs=ordered, query=query, engine=engine, output_schema=analyzed.output_schema)

    def add_derivative(
        self, name: str, input_names: Sequence[str], query: str, engine: Optional[EngineVersion] = None
    ) -> AddResult:
        """Create a derivative dataset, or record a changed query or engine as a new SetTransform."""
        if engine is None:
            choice = self.workspace.config.default_engine
            engine = engine_version(choice.name, choice.version)
        get_engine(engine)
        transform = self.build_transform(query, input_names, engine)
        system_time = self.workspace.now()
        names = self.workspace.names()
        if name in names:
            dataset_id = names[name]
            self._check_acyclic(dataset_id, [entry.dataset_id for entry in transform.inputs])
            with self.workspace.lock(dataset_id):
                chain = self.workspace.chain(dataset_id)
                summary = chain.summary()
                if summary.kind != "derivative":
                    raise DatasetExists(f"{name!r} is a {summary.kind} dataset")
                if summary.transform == transform:
                    return AddResult(dataset_id=dataset_id, name=name, blocks_appended=0)
                chain.append(transform, system_time)
            logger.info(f"Recorded new transform for {name}")
            return AddResult(dataset_id=dataset_id, name=name, blocks_appended=1)

        chain = self.workspace.chain()
        chain.append(Seed(dataset_kind="derivative", dataset_name=name), system_time)
        chain.append(transform, system_time)
        self.workspace.register(name, chain.dataset_id)
        logger.info(f"Created derivative dataset {name} ({chain.dataset_id})")
        return AddResult(dataset_id=chain.dataset_id, name=name, blocks_appended=2)

    # graph

    def inputs_of(self, dataset_id: str) -> List[str]:
        """Every input any SetTransform of the dataset ever declared, in first-seen order."""
        seen: List[str] = []
        for _, block in self.workspace.chain(dataset_id).blocks():
            if isinstance(block.event, SetTransform):
                for entry in block.event.inputs:
                    if entry.dataset_id not in seen:
                        seen.append(entry.dataset_id)
        return seen

    def dependency_graph(self, dataset_id: str) -> Dict[str, Set[str]]:
        graph: Dict[str, Set[str]] = {}
        pending = [dataset_id]
        while pending:
            current = pending.pop()
            if current in graph:
                continue
            if self.workspace.chain(current).head_hash() is None:
                raise MissingInput(f"dataset {current} is not present in this workspace")
            graph[current] = set(self.inputs_of(current))
            pending.extend(graph[current])
        return graph

    def topological_order(self, dataset_id: str) -> List[str]:
        try:
            return list(graphlib.TopologicalSorter(self.dependency_graph(dataset_id)).static_order())
        except graphlib.CycleError as exc:
            raise CycleDetected(f"dataset graph has a cycle: {exc.args[1]}") from exc

    def _check_acyclic(self, dataset_id: str, inputs: Sequence[str]) -> None:
        for input_id in inputs:
            if input_id == dataset_id or dataset_id in self.dependency_graph(input_id):
                raise CycleDetected(f"dataset {dataset_id} would depend on itself through {input_id}")

    # roots

    def ingest(self, name_or_id: str, source_path=None, system_time: Optional[datetime] = None) -> IngestResult:
        dataset_id = self.workspace.resolve(name_or_id)
        source = source_path or self.workspace.source_path(dataset_id)
        if source is None:
            raise UserError(f"dataset {name_or_id!r} has no source path; pass --source")
        with self.workspace.lock(dataset_id):
            return ingest_round(
                self.store,
                self.workspace.chain(dataset_id),
                self.workspace.dataset_dir(dataset_id),
                source,
                system_time or self.workspace.now(),
            )

    def set_watermark(self, name_or_id: str, watermark: datetime, system_time: Optional[datetime] = None) -> MetadataBlock:
        dataset_id = self.workspace.resolve(name_or_id)
        with self.workspace.lock(dataset_id):
            chain = self.workspace.chain(dataset_id)
            return chain.append(SetWatermark(new_watermark=watermark), system_time or self.workspace.now())

    # derivatives

    def _transform_before(self, chain: MetadataChain, sequence_number: int) -> SetTransform:
        transform = None
        for _, block in chain.blocks():
            if block.sequence_number > sequence_number:
                break
            if isinstance(block.event, SetTransform):
                transform = block.event
        if transform is None:
            raise IllegalEventForKind(f"no transform in effect at seq {sequence_number}")
        return transform

    def missing_objects(self, chain: MetadataChain) -> List[str]:
        """Slices and checkpoints referenced by the chain but absent from the store."""
        missing = []
        for _, block in chain.blocks():
            ref = event_slice(block.event)
            if ref is not None and not self.store.contains(ref.slice_hash):
                missing.append(ref.slice_hash)
            if isinstance(block.event, ExecuteTransform) and block.event.new_checkpoint is not None:
                if not self.store.contains(block.event.new_checkpoint):
                    missing.append(block.event.new_checkpoint)
        return missing

    def _materialize_inputs(self, dataset_id: str) -> None:
        for current in self.topological_order(dataset_id):
            if current == dataset_id:
                continue
            chain = self.workspace.chain(current)
            if chain.summary().kind == "derivative" and self.missing_objects(chain):
                self._restore(chain)

    def _load_checkpoint(self, chain: MetadataChain, checkpoint_hash: str) -> Checkpoint:
        if not self.store.contains(checkpoint_hash):
            logger.warning(f"Checkpoint {checkpoint_hash} missing; restoring dataset {chain.dataset_id}")
            self._restore(chain)
        return checkpoint_load(self.store, checkpoint_hash)

    def run_transform(self, name_or_id: str, system_time: Optional[datetime] = None) -> Optional[MetadataBlock]:
        """
        Process all new input data of a derivative dataset.

        Returns:
            The appended ExecuteTransform block, or None when there was nothing to do.
        """
        dataset_id = self.workspace.resolve(name_or_id)
        self._materialize_inputs(dataset_id)
        with tracer.start_as_current_span("run_transform") as span, self.workspace.lock(dataset_id):
            span.set_attribute("odf.dataset_id", dataset_id)
            chain = self.workspace.chain(dataset_id)
            summary = chain.summary()
            if summary.kind != "derivative" or summary.transform is None:
                raise IllegalEventForKind(f"dataset {summary.name} has no transform to run")
            transform = summary.transform
            engine = get_engine(transform.engine)
            query = self.compile_transform(transform)
            if query.output_schema != transform.output_schema:
                raise SchemaMismatch(f"inputs of {summary.name} no longer produce the recorded output schema")

            last = summary.last_execute
            prior_watermarks = {entry.dataset_id: entry.watermark for entry in last.input_slices} if last else {}
            prior_checkpoint = None
            if last is not None and last.new_checkpoint is not None:
                prior_checkpoint = self._load_checkpoint(chain, last.new_checkpoint)
                if summary.transform_sequence > summary.last_execute_sequence:
                    previous = self.compile_transform(self._transform_before(chain, summary.last_execute_sequence))
                    outcome = handle_query_change(previous, query, prior_checkpoint)
                    if isinstance(outcome, ResetRequired):
                        logger.info(f"Resetting state of {summary.name}: {outcome.reason}")
                        prior_checkpoint = None
                    else:
                        prior_checkpoint = outcome

            ids_by_name = {entry.name: entry.dataset_id for entry in transform.inputs}
            batches = {}
            input_slices = []
            changed = False
            for alias, name in query.inputs:
                input_id = ids_by_name[name]
                input_chain = self._input_chain(input_id)
                input_summary = input_chain.summary()
                start = summary.input_offsets.get(input_id, 0)
                end = input_summary.offset_end
                records = input_chain.records(start, end, input_summary.head_hash) if end > start else []
                batches[alias] = InputBatch(records, input_summary.watermark)
                input_slices.append(
                    InputSlice(
                        dataset_id=input_id,
                        offset_start=start,
                        offset_end=end,
                        watermark=input_summary.watermark,
                        head_block_hash=input_summary.head_hash,
                    )
                )
                changed = changed or end > start or input_summary.watermark != prior_watermarks.get(input_id)
            if not changed:
                logger.info(f"No new input for {summary.name}")
                return None

            response = engine.execute(TransformRequest(query, batches, prior_checkpoint))
            system_time = truncate(system_time or self.workspace.now())
            output_slice = None
            if response.records:
                records = [
                    Record(summary.offset_end + i, system_time, out.event_time, out.payload)
                    for i, out in enumerate(response.records)
                ]
                output_slice = write_slice(self.store, records, transform.output_schema, summary.offset_end)
            new_checkpoint = checkpoint_save(self.store, response.checkpoint)
            block = chain.append(
                ExecuteTransform(
                    input_slices=tuple(input_slices),
                    prior_checkpoint=None if prior_checkpoint is None else last.new_checkpoint,
                    new_checkpoint=new_checkpoint,
                    output_slice=output_slice,
                    output_watermark=clamp_watermark(response.output_watermark, summary.watermark),
                    late_records_ignored=response.late_records_ignored,
                ),
                system_time,
            )
            span.set_attribute("odf.records_out", len(response.records))
            span.set_attribute("odf.block_sequence", block.sequence_number)
            logger.info(
                f"Transformed {summary.name}: {sum(len(b.records) for b in batches.values())} records in, "
                f"{len(response.records)} out, {response.late_records_ignored} late"
            )
            return block

    # replay

    def replay(
        self,
        chain: MetadataChain,
        track_sources: bool = False,
        start_sequence: Optional[int] = None,
        stop_sequence: Optional[int] = None,
    ) -> Iterator[ReplayStep]:
        """Re-execute ExecuteTransform blocks in order, each with the engine and query of its era."""
        summary = DatasetSummary()
        state: Optional[Checkpoint] = None
        for block_hash, block in chain.blocks():
            event = block.event
            in_range = start_sequence is None or block.sequence_number >= start_sequence
            if isinstance(event, ExecuteTransform) and in_range:
                step = self._replay_block(summary, block_hash, block, state, track_sources)
                state = step.response.checkpoint
                yield step
                if stop_sequence is not None and block.sequence_number >= stop_sequence:
                    return
            summary.apply(block_hash, block)

    def _replay_block(
        self,
        summary: DatasetSummary,
        block_hash: str,
        block: MetadataBlock,
        state: Optional[Checkpoint],
        track_sources: bool,
    ) -> ReplayStep:
        event: ExecuteTransform = block.event
        sequence = block.sequence_number
        transform = summary.transform
        engine = get_engine(transform.engine)
        divergences: List[Divergence] = []
        entries = {entry.dataset_id: entry for entry in event.input_slices}
        heads = {entry.dataset_id: entry.head_block_hash for entry in event.input_slices if entry.head_block_hash}
        query = self.compile_transform(transform, heads)
        if query.output_schema != transform.output_schema:
            divergences.append(Divergence(sequence_number=sequence, field="output_schema"))

        prior = None
        if event.prior_checkpoint is not None:
            prior = state if state is not None else checkpoint_load(self.store, event.prior_checkpoint)

        ids_by_name = {entry.name: entry.dataset_id for entry in transform.inputs}
        input_ids = {}
        batches = {}
        for alias, name in query.inputs:
            input_id = ids_by_name[name]
            input_ids[alias] = input_id
            entry = entries.get(input_id)
            if entry is None:
                divergences.append(Divergence(sequence_number=sequence, field="input_slices", expected=input_id))
                batches[alias] = InputBatch((), None)
                continue
            input_chain = self._input_chain(input_id)
            try:
                at_head = input_chain.summary_at(entry.head_block_hash) if entry.head_block_hash else input_chain.summary()
            except BlockNotFound:
                divergences.append(
                    Divergence(sequence_number=sequence, field="input_head", expected=entry.head_block_hash)
                )
                batches[alias] = InputBatch((), entry.watermark)
                continue
            if at_head.offset_end < entry.offset_end or at_head.watermark != entry.watermark:
                divergences.append(
                    Divergence(
                        sequence_number=sequence,
                        field="input_watermark",
                        expected=_text(entry.watermark),
                        actual=_text(at_head.watermark),
                    )
                )
            records = []
            if entry.offset_end > entry.offset_start:
                records = input_chain.records(entry.offset_start, entry.offset_end, at_head.head_hash)
            batches[alias] = InputBatch(records, entry.watermark)

        response = engine.execute(TransformRequest(query, batches, prior, track_sources))
        slice_data = slice_hash = None
        if response.records:
            records = [
                Record(summary.offset_end + i, block.system_time, out.event_time, out.payload)
                for i, out in enumerate(response.records)
            ]
            slice_data, ref = encode_slice(records, transform.output_schema, summary.offset_end)
            slice_hash = ref.slice_hash
        checkpoint_hash = response.checkpoint.checkpoint_hash
        watermark = clamp_watermark(response.output_watermark, summary.watermark)

        recorded_slice = event.output_slice.slice_hash if event.output_slice is not None else None
        comparisons = (
            ("output_slice", recorded_slice, slice_hash),
            ("new_checkpoint", event.new_checkpoint, checkpoint_hash),
            ("output_watermark", _text(event.output_watermark), _text(watermark)),
            ("late_records_ignored", str(event.late_records_ignored), str(response.late_records_ignored)),
        )
        for name, expected, actual in comparisons:
            if expected != actual:
                divergences.append(Divergence(sequence_number=sequence, field=name, expected=expected, actual=actual))
        return ReplayStep(
            block_hash=block_hash,
            block=block,
            transform=transform,
            query=query,
            input_ids=input_ids,
            response=response,
            offset_start=summary.offset_end,
            slice_data=slice_data,
            slice_hash=slice_hash,
            checkpoint_hash=checkpoint_hash,
            output_watermark=watermark,
            divergences=divergences,
        )

    def verify_reproducibility(self, name_or_id: str) -> ReproducibilityReport:
        """Replay every ExecuteTransform block and compare results byte for byte."""
        dataset_id = self.workspace.resolve(name_or_id)
        chain = self.workspace.chain(dataset_id)
        report = ReproducibilityReport(dataset_id=dataset_id)
        if chain.summary().kind != "derivative":
            return report
        self._materialize_inputs(dataset_id)
        with tracer.start_as_current_span("verify_reproducibility") as span:
            span.set_attribute("odf.dataset_id", dataset_id)
            for step in self.replay(chain):
                report.blocks_verified += 1
                if step.divergences:
                    report.divergences.extend(step.divergences)
                    logger.warning(f"Dataset {dataset_id} diverges at seq {step.block.sequence_number}")
                    break
        return report

    def verify_integrity(self, name_or_id: str, recursive: bool = False) -> IntegrityReport:
        dataset_id = self.workspace.resolve(name_or_id)
        targets = self.topological_order(dataset_id) if recursive else [dataset_id]
        return IntegrityReport(reports=[self.workspace.chain(current).validate() for current in targets])

    def _restore(self, chain: MetadataChain) -> int:
        restored = 0
        for step in self.replay(chain):
            if step.divergences:
                first = step.divergences[0]
                raise ReproducibilityFailure(
                    f"cannot restore {chain.dataset_id}: replay diverges at seq {first.sequence_number} ({first.field})"
                )
            if step.slice_data is not None and not self.store.contains(step.slice_hash):
                self.store.put(step.slice_data)
                restored += 1
            if not self.store.contains(step.checkpoint_hash):
                self.store.put(step.response.checkpoint.canonical_bytes())
                restored += 1
        logger.info(f"Restored {restored} objects of dataset {chain.dataset_id}")
        return restored

    def restore(self, name_or_id: str) -> int:
        """Re-create missing derivative slices and checkpoints by replaying the chain."""
        dataset_id = self.workspace.resolve(name_or_id)
        self._materialize_inputs(dataset_id)
        with self.workspace.lock(dataset_id):
            chain = self.workspace.chain(dataset_id)
            if chain.summary().kind != "derivative":
                return 0
            return self._restore(chain)

    # graph traversal

    def pull(self, name_or_id: str) -> PullReport:
        """Bring a dataset and everything it depends on up to date."""
        dataset_id = self.workspace.resolve(name_or_id)
        report = PullReport()
        blocked: Set[str] = set()
        with tracer.start_as_current_span("pull") as span:
            span.set_attribute("odf.dataset_id", dataset_id)
            order = self.topological_order(dataset_id)
            graph = self.dependency_graph(dataset_id)
            for current in order:
                name = self.name_of(current)
                if graph[current] & blocked:
                    report.skipped.append(current)
                    blocked.add(current)
                    continue
                try:
                    report.actions.extend(self._pull_one(current, name))
                except OdfError as exc:
                    logger.error(f"Pull of {name or current} failed: {exc}")
                    report.failures.append(
                        PullFailure(dataset_id=current, name=name, error=str(exc), exit_code=exc.exit_code)
                    )
                    blocked.add(current)
        return report

    def _pull_one(self, dataset_id: str, name: Optional[str]) -> List[PullAction]:
        actions = []
        chain = self.workspace.chain(dataset_id)
        if chain.summary().kind == "root":
            if self.workspace.source_path(dataset_id) is None:
                return actions
            result = self.ingest(dataset_id)
            if result.block is not None:
                actions.append(
                    PullAction(
                        dataset_id=dataset_id,
                        name=name,
                        action="ingested",
                        block_sequence=result.block.sequence_number,
                        detail=f"{result.records_added} records",
                    )
                )
            return actions
        if self.missing_objects(chain):
            restored = self.restore(dataset_id)
            actions.append(
                PullAction(dataset_id=dataset_id, name=name, action="restored", detail=f"{restored} objects")
            )
        block = self.run_transform(dataset_id)
        if block is not None:
            count = block.event.output_slice.record_count if block.event.output_slice else 0
            actions.append(
                PullAction(
                    dataset_id=dataset_id,
                    name=name,
                    action="transformed",
                    block_sequence=block.sequence_number,
                    detail=f"{count} records",
                )
            )
        return actions

    # stable references and reads

    def resolve_as_of(self, name_or_id: str, system_time: datetime) -> StableReference:
        dataset_id = self.workspace.resolve(name_or_id)
        chain = self.workspace.chain(dataset_id)
        included = chain.blocks_as_of(truncate(system_time))
        offset_end = 0
        for block in included:
            ref = event_slice(block.event)
            if ref is not None:
                offset_end = ref.offset_end
        return StableReference(
            dataset_id=dataset_id,
            as_of=system_time,
            head_block_hash=included[-1].block_hash if included else None,
            block_count=len(included),
            offset_end=offset_end,
        )

    def read_reference(self, reference: StableReference) -> List[Record]:
        if reference.head_block_hash is None or reference.offset_end == 0:
            return []
        chain = self.workspace.chain(reference.dataset_id)
        return chain.records(0, reference.offset_end, reference.head_block_hash)

    def project(self, name_or_id: str, as_of: Optional[datetime] = None) -> List[dict]:
        """
        Current (or as-of) content of a dataset.

        Snapshot roots are projected into live state; other datasets list
        their records.
        """
        dataset_id = self.workspace.resolve(name_or_id)
        reference = self.resolve_as_of(dataset_id, as_of or self.workspace.now())
        records = self.read_reference(reference)
        if reference.head_block_hash is None:
            return []
        summary = self.workspace.chain(dataset_id).summary_at(reference.head_block_hash)
        source = summary.polling_source
        if source is not None and isinstance(source.merge, SnapshotMerge):
            state = project_state(records, source.merge.primary_key, reference.as_of)
            return [state[key] for key in sorted(state)]
        return [record.to_row() for record in records]

    def tail(self, name_or_id: str, count: int = 10) -> List[Record]:
        chain = self.chain(name_or_id)
        end = chain.summary().offset_end
        return chain.records(max(0, end - count), end)


__all__ = [
    "AddResult",
    "Coordinator",
    "Divergence",
    "IntegrityReport",
    "PullReport",
    "ReplayStep",
    "ReproducibilityReport",
    "StableReference",
    "clamp_watermark",
]
