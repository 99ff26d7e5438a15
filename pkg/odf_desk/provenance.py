"""
Record-level provenance and dataset-level lineage.

Tracing does not rely on anything stored at transform time: it replays the
derivative's chain with source tracking switched on, starting at the most
recent block that began from empty state, so windows and join buffers that
span several blocks are attributed correctly.
"""

import logging
from typing import Dict, List, Optional, Sequence, Set, Tuple

from opentelemetry.trace import get_tracer
from pydantic import BaseModel

from odf_desk.coordinator import Coordinator
from odf_desk.errors import OffsetNotFound
from odf_desk.metadata_chain import ExecuteTransform, event_slice

logger = logging.getLogger(__name__)
tracer = get_tracer(__name__)


class ProvenanceNode(BaseModel):
    dataset_id: str
    name: Optional[str] = None
    kind: str
    offsets: List[int]
    block_sequences: List[int]
    children: List["ProvenanceNode"] = []


class LineageNode(BaseModel):
    dataset_id: str
    name: Optional[str] = None
    kind: str


class Lineage(BaseModel):
    nodes: List[LineageNode]
    edges: List[Tuple[str, str]]


def _owning_blocks(coordinator: Coordinator, dataset_id: str, offsets: Set[int]) -> Dict[int, List[int]]:
    """Map block sequence number to the requested offsets its slice holds."""
    owners: Dict[int, List[int]] = {}
    for _, block in coordinator.workspace.chain(dataset_id).blocks():
        ref = event_slice(block.event)
        if ref is None:
            continue
        held = sorted(offset for offset in offsets if ref.offset_start <= offset < ref.offset_end)
        if held:
            owners[block.sequence_number] = held
    return owners


def _reset_point(coordinator: Coordinator, dataset_id: str, sequence_number: int) -> int:
    start = 0
    for _, block in coordinator.workspace.chain(dataset_id).blocks():
        if block.sequence_number > sequence_number:
            break
        if isinstance(block.event, ExecuteTransform) and block.event.prior_checkpoint is None:
            start = block.sequence_number
    return start


def _trace(coordinator: Coordinator, dataset_id: str, offsets: Set[int]) -> ProvenanceNode:
    chain = coordinator.workspace.chain(dataset_id)
    summary = chain.summary()
    owners = _owning_blocks(coordinator, dataset_id, offsets)
    node = ProvenanceNode(
        dataset_id=dataset_id,
        name=coordinator.name_of(dataset_id),
        kind=summary.kind,
        offsets=sorted(offsets),
        block_sequences=sorted(owners),
    )
    if summary.kind != "derivative" or not owners:
        return node

    wanted = {sequence: set(held) for sequence, held in owners.items()}
    contributing: Dict[str, Set[int]] = {}
    order: List[str] = []
    start = _reset_point(coordinator, dataset_id, min(wanted))
    for step in coordinator.replay(chain, track_sources=True, start_sequence=start, stop_sequence=max(wanted)):
        held = wanted.get(step.block.sequence_number)
        if not held:
            continue
        for index, sources in enumerate(step.response.sources or []):
            if step.offset_start + index not in held:
                continue
            for alias, offset in sources:
                input_id = step.input_ids[alias]
                if input_id not in contributing:
                    contributing[input_id] = set()
                    order.append(input_id)
                contributing[input_id].add(offset)
    node.children = [_trace(coordinator, input_id, contributing[input_id]) for input_id in order]
    return node


def trace(coordinator: Coordinator, name_or_id: str, offsets: Sequence[int]) -> ProvenanceNode:
    """Follow output records back to the root records that produced them."""
    dataset_id = coordinator.workspace.resolve(name_or_id)
    offset_end = coordinator.workspace.chain(dataset_id).summary().offset_end
    for offset in offsets:
        if not 0 <= offset < offset_end:
            raise OffsetNotFound(f"offset {offset} is outside [0, {offset_end}) of {name_or_id}")
    with tracer.start_as_current_span("trace") as span:
        span.set_attribute("odf.dataset_id", dataset_id)
        return _trace(coordinator, dataset_id, set(offsets))


def lineage(coordinator: Coordinator, name_or_id: str) -> Lineage:
    """Every dataset the given one depends on, with ``(input, output)`` edges."""
    dataset_id = coordinator.workspace.resolve(name_or_id)
    nodes: List[LineageNode] = []
    edges: List[Tuple[str, str]] = []
    seen: Set[str] = set()
    pending = [dataset_id]
    while pending:
        current = pending.pop(0)
        if current in seen:
            continue
        seen.add(current)
        summary = coordinator.workspace.chain(current).summary()
        nodes.append(LineageNode(dataset_id=current, name=coordinator.name_of(current), kind=summary.kind))
        for input_id in coordinator.inputs_of(current):
            edges.append((input_id, current))
            pending.append(input_id)
    return Lineage(nodes=nodes, edges=edges)


def render_tree(node: ProvenanceNode, depth: int = 0) -> List[str]:
    label = node.name or node.dataset_id[:12]
    offsets = ", ".join(str(offset) for offset in node.offsets)
    blocks = ", ".join(str(sequence) for sequence in node.block_sequences)
    lines = [f"{'  ' * depth}{label} [{node.kind}] offsets {offsets} (blocks {blocks})"]
    for child in node.children:
        lines.extend(render_tree(child, depth + 1))
    return lines
