"""
Sharing datasets through a directory repository.

A repository mirrors the workspace store layout::

    <repo>/objects/xx/yyyy...   content-addressed objects
    <repo>/refs/<dataset_id>    head block hash + newline

Trust lives in the hashes: everything fetched from a repository is staged
and validated before the local head moves.
"""

import logging
import os
import shutil
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List, Optional

from opentelemetry.trace import get_tracer
from pydantic import BaseModel, ValidationError

from odf_desk.content_store import ObjectStore, check_hash, hash_bytes
from odf_desk.errors import (
    InvalidChain,
    NonFastForward,
    ObjectNotFound,
    ObjectMissingInRepo,
    RepoUnavailable,
    UnknownDataset,
    UnsupportedValue,
)
from odf_desk.metadata_chain import (
    ZERO_HASH,
    ExecuteTransform,
    MetadataBlock,
    MetadataChain,
    Seed,
    event_slice,
    write_text_atomic,
)
from odf_desk.workspace import Workspace

logger = logging.getLogger(__name__)
tracer = get_tracer(__name__)

REF_LOCK_TIMEOUT_SECONDS = 10.0


class TransferReport(BaseModel):
    dataset_id: str
    name: Optional[str] = None
    head_block_hash: Optional[str] = None
    blocks_transferred: int = 0
    objects_transferred: int = 0


class Repository:
    def __init__(self, path: Path, create: bool = False):
        self.path = Path(path)
        if not self.path.is_dir():
            raise RepoUnavailable(f"repository {self.path} does not exist")
        if create:
            (self.path / "objects").mkdir(exist_ok=True)
            (self.path / "refs").mkdir(exist_ok=True)
        elif not (self.path / "objects").is_dir() or not (self.path / "refs").is_dir():
            raise RepoUnavailable(f"{self.path} is not a repository (missing objects/ or refs/)")
        self.store = ObjectStore(self.path / "objects")

    def ref_path(self, dataset_id: str) -> Path:
        return self.path / "refs" / check_hash(dataset_id)

    def ref(self, dataset_id: str) -> Optional[str]:
        path = self.ref_path(dataset_id)
        if not path.is_file():
            return None
        return check_hash(path.read_text(encoding="utf-8").strip())

    @contextmanager
    def _ref_lock(self, dataset_id: str) -> Iterator[None]:
        path = self.ref_path(dataset_id).with_suffix(".lock")
        deadline = time.monotonic() + REF_LOCK_TIMEOUT_SECONDS
        while True:
            try:
                os.close(os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY))
                break
            except FileExistsError:
                if time.monotonic() >= deadline:
                    raise RepoUnavailable(f"ref {dataset_id} is locked ({path})")
                time.sleep(0.05)
        try:
            yield
        finally:
            path.unlink(missing_ok=True)

    def compare_and_set(self, dataset_id: str, expected: Optional[str], new: str) -> None:
        with self._ref_lock(dataset_id):
            current = self.ref(dataset_id)
            if current != expected:
                raise NonFastForward(f"ref {dataset_id} moved to {current} while pushing")
            write_text_atomic(self.ref_path(dataset_id), new + "\n")


def _referenced(block: MetadataBlock) -> List[str]:
    hashes = []
    ref = event_slice(block.event)
    if ref is not None:
        hashes.append(ref.slice_hash)
    if isinstance(block.event, ExecuteTransform) and block.event.new_checkpoint is not None:
        hashes.append(block.event.new_checkpoint)
    return hashes


def push(workspace: Workspace, name_or_id: str, repo_path: Path) -> TransferReport:
    """Copy a dataset's missing objects into the repository and advance its ref."""
    dataset_id = workspace.resolve(name_or_id)
    repo = Repository(repo_path, create=True)
    chain = workspace.chain(dataset_id)
    with tracer.start_as_current_span("push") as span:
        span.set_attribute("odf.dataset_id", dataset_id)
        validation = chain.validate(allow_missing_checkpoints=True)
        if not validation.valid:
            raise InvalidChain(f"local dataset is invalid: {validation.describe()}")
        blocks = chain.blocks()
        local_hashes = [block_hash for block_hash, _ in blocks]
        remote_head = repo.ref(dataset_id)
        if remote_head is not None and remote_head not in local_hashes:
            raise NonFastForward(f"remote head {remote_head} is not an ancestor of the local head")

        report = TransferReport(dataset_id=dataset_id, name=workspace.name_of(dataset_id), head_block_hash=local_hashes[-1])
        if remote_head == local_hashes[-1]:
            return report
        start = local_hashes.index(remote_head) + 1 if remote_head is not None else 0
        for block_hash, block in blocks[start:]:
            for object_hash in [*_referenced(block), block_hash]:
                if repo.store.contains_local(object_hash):
                    continue
                try:
                    repo.store.put(workspace.store.get(object_hash))
                except ObjectNotFound:
                    # checkpoints are transient and may legitimately be absent
                    continue
                report.objects_transferred += 1
            report.blocks_transferred += 1
        repo.compare_and_set(dataset_id, remote_head, local_hashes[-1])
        span.set_attribute("odf.objects_transferred", report.objects_transferred)
    logger.info(f"Pushed {dataset_id}: {report.blocks_transferred} blocks, {report.objects_transferred} objects")
    return report


def _fetch(repo: Repository, staged: ObjectStore, object_hash: str, required: bool = True) -> bool:
    """Copy one object from the repository into staging after checking its hash."""
    if staged.contains(object_hash):
        return False
    try:
        data = repo.store.read_unverified(object_hash)
    except ObjectNotFound:
        if required:
            raise ObjectMissingInRepo(f"repository has no object {object_hash}")
        return False
    actual = hash_bytes(data)
    if actual != object_hash:
        raise InvalidChain(f"repository object {object_hash} hashes to {actual}")
    staged.put(data)
    return True


def _register(workspace: Workspace, dataset_id: str, seed: Seed) -> str:
    existing = workspace.name_of(dataset_id)
    if existing is not None:
        return existing
    name = seed.dataset_name
    if name in workspace.names():
        name = f"{name}-{dataset_id[:8]}"
    workspace.register(name, dataset_id)
    return name


def pull_remote(workspace: Workspace, dataset_id: str, repo_path: Path) -> TransferReport:
    """Fetch new blocks and objects of a dataset; adopt the remote head only if the result validates."""
    repo = Repository(repo_path)
    check_hash(dataset_id)
    remote_head = repo.ref(dataset_id)
    if remote_head is None:
        raise UnknownDataset(f"repository {repo_path} has no dataset {dataset_id}")
    local_chain = workspace.chain(dataset_id)
    local_head = local_chain.head_hash()
    report = TransferReport(dataset_id=dataset_id, name=workspace.name_of(dataset_id), head_block_hash=local_head)
    if local_head == remote_head:
        return report
    if local_head is not None and remote_head in {block_hash for block_hash, _ in local_chain.blocks()}:
        logger.info(f"Repository copy of {dataset_id} is behind the local head; nothing to pull")
        return report

    workspace.staging_root.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(dir=workspace.staging_root, prefix="pull-"))
    try:
        with tracer.start_as_current_span("pull_remote") as span:
            span.set_attribute("odf.dataset_id", dataset_id)
            staged = ObjectStore(staging / "objects", base=workspace.store)
            reached_local = local_head is None
            genesis: Optional[MetadataBlock] = None
            genesis_hash: Optional[str] = None
            cursor = remote_head
            while cursor != ZERO_HASH:
                if cursor == local_head:
                    reached_local = True
                    break
                if _fetch(repo, staged, cursor):
                    report.objects_transferred += 1
                try:
                    block = MetadataBlock.from_bytes(staged.get(cursor))
                except (UnsupportedValue, ValidationError) as exc:
                    raise InvalidChain(f"block {cursor} cannot be decoded: {exc}") from exc
                for object_hash in _referenced(block):
                    required = not isinstance(block.event, ExecuteTransform) or object_hash != block.event.new_checkpoint
                    if _fetch(repo, staged, object_hash, required=required):
                        report.objects_transferred += 1
                report.blocks_transferred += 1
                genesis, genesis_hash = block, cursor
                if block.sequence_number == 0:
                    break
                cursor = block.prev_block_hash
            if not reached_local:
                raise NonFastForward(f"local head {local_head} is not an ancestor of the remote head")
            if local_head is None and genesis_hash != dataset_id:
                raise InvalidChain(f"repository chain for {dataset_id} starts at block {genesis_hash}")

            staged_datasets = staging / "datasets"
            write_text_atomic(staged_datasets / dataset_id / "head", remote_head + "\n")
            validation = MetadataChain(staged, staged_datasets, dataset_id).validate(allow_missing_checkpoints=True)
            if not validation.valid:
                raise InvalidChain(f"fetched chain does not validate: {validation.describe()}")

            for object_hash in staged.iter_hashes():
                workspace.store.put(staged.read_unverified(object_hash))
            write_text_atomic(workspace.dataset_dir(dataset_id) / "head", remote_head + "\n")
            if local_head is None:
                report.name = _register(workspace, dataset_id, genesis.event)
            report.head_block_hash = remote_head
            span.set_attribute("odf.objects_transferred", report.objects_transferred)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    logger.info(f"Pulled {dataset_id}: {report.blocks_transferred} blocks, {report.objects_transferred} objects")
    return report


__all__ = ["Repository", "TransferReport", "pull_remote", "push"]
