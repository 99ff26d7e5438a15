"""
``odf`` command line.

Exit codes: 0 success, 1 user or validation error, 2 verification
failure, 3 I/O failure.
"""

import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Iterable, List, Optional

import click
from pydantic import BaseModel
from tabulate import tabulate

from odf_desk.config import WORKSPACE_ENV, configure_logging, configure_tracing, load_environment
from odf_desk.content_store import canonicalize
from odf_desk.coordinator import Coordinator
from odf_desk.data_slices import Record
from odf_desk.errors import OdfError, StorageError, UnknownDataset, UserError
from odf_desk.manifest import apply_manifest, load_manifest
from odf_desk.metadata_chain import (
    AddData,
    ExecuteTransform,
    MetadataBlock,
    Seed,
    SetPollingSource,
    SetTransform,
    SetWatermark,
)
from odf_desk.provenance import lineage as dataset_lineage
from odf_desk.provenance import render_tree
from odf_desk.provenance import trace as trace_records
from odf_desk.sync import pull_remote as sync_pull_remote
from odf_desk.sync import push as sync_push
from odf_desk.timestamps import format_timestamp, parse_timestamp
from odf_desk.workspace import ODF_DIR, Workspace

logger = logging.getLogger(__name__)


class TimestampParam(click.ParamType):
    name = "rfc3339"

    def convert(self, value, param, ctx):
        if isinstance(value, datetime):
            return value
        try:
            return parse_timestamp(value)
        except ValueError:
            self.fail(f"{value!r} is not an RFC 3339 timestamp", param, ctx)


TIMESTAMP = TimestampParam()


class OdfGroup(click.Group):
    """Maps library errors onto exit codes at the command boundary."""

    def make_context(self, info_name, args, parent=None, **extra):
        try:
            return super().make_context(info_name, args, parent=parent, **extra)
        except click.UsageError as exc:
            exc.exit_code = UserError.exit_code
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except OdfError as exc:
            logger.error(f"{type(exc).__name__}: {exc}")
            click.echo(f"Error: {exc}", err=True)
            ctx.exit(exc.exit_code)
        except click.UsageError as exc:
            exc.exit_code = UserError.exit_code
            raise
        except (click.exceptions.Exit, click.Abort, click.ClickException):
            raise
        except OSError as exc:
            logger.error(f"I/O failure: {exc}", exc_info=True)
            click.echo(f"Error: {exc}", err=True)
            ctx.exit(StorageError.exit_code)
        except Exception as exc:
            logger.error(f"Unexpected error: {exc}", exc_info=True)
            click.echo(f"Unexpected error: {exc}", err=True)
            ctx.exit(1)


class App:
    def __init__(self, workspace_path: Optional[Path], output: str):
        self.workspace_path = workspace_path
        self.output = output
        self._workspace: Optional[Workspace] = None

    @property
    def json(self) -> bool:
        return self.output == "json"

    @property
    def workspace(self) -> Workspace:
        if self._workspace is None:
            if self.workspace_path is not None:
                self._workspace = Workspace(self.workspace_path)
            else:
                self._workspace = Workspace.discover()
        return self._workspace

    @property
    def coordinator(self) -> Coordinator:
        return Coordinator(self.workspace)


pass_app = click.make_pass_decorator(App)


def _log_file(workspace_path: Optional[Path]) -> Path:
    root = workspace_path
    if root is None:
        try:
            root = Workspace.discover().root
        except OdfError:
            root = None
    if root is not None and (Path(root) / ODF_DIR).is_dir():
        return Path(root) / ODF_DIR / "odf.log"
    return Path.cwd() / "odf.log"


def _plain(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return value.model_dump(mode="python", by_alias=True)
    if isinstance(value, Record):
        return value.to_row()
    if isinstance(value, list):
        return [_plain(item) for item in value]
    return value


def _emit_json(value: Any) -> None:
    click.echo(canonicalize(_plain(value)).decode("utf-8"))


def _cell(value: Any) -> Any:
    if isinstance(value, datetime):
        return format_timestamp(value)
    if value is None:
        return ""
    return value


def _table(rows: Iterable[dict]) -> str:
    rows = [{key: _cell(value) for key, value in row.items()} for row in rows]
    if not rows:
        return "(no records)"
    return tabulate(rows, headers="keys")


def describe_event(block: MetadataBlock) -> str:
    event = block.event
    if isinstance(event, Seed):
        return f"{event.dataset_kind} dataset {event.dataset_name}"
    if isinstance(event, SetPollingSource):
        keys = ", ".join(event.merge.primary_key)
        columns = len(event.schema_def.columns)
        return f"{event.format} source, {event.merge.kind} merge on ({keys}), {columns} columns"
    if isinstance(event, SetTransform):
        inputs = ", ".join(entry.name for entry in event.inputs)
        return f"query over {inputs}; engine {event.engine.name} {event.engine.version}"
    if isinstance(event, (AddData, ExecuteTransform)):
        ref = event.output_slice
        records = f"offsets [{ref.offset_start}, {ref.offset_end})" if ref is not None else "no records"
        watermark = format_timestamp(event.output_watermark) if event.output_watermark else "none"
        late = f", {event.late_records_ignored} late" if isinstance(event, ExecuteTransform) else ""
        return f"{records}, watermark {watermark}{late}"
    if isinstance(event, SetWatermark):
        return f"watermark {format_timestamp(event.new_watermark)}"
    return ""


@click.group(cls=OdfGroup)
@click.option(
    "--workspace",
    "workspace_path",
    type=click.Path(file_okay=False, path_type=Path),
    envvar=WORKSPACE_ENV,
    help="Workspace root (default: nearest directory with .odf/).",
)
@click.option("--output", type=click.Choice(["text", "json"]), default="text", show_default=True)
@click.pass_context
def cli(ctx, workspace_path, output):
    """Verifiable, reproducible dataset pipelines."""
    configure_logging(_log_file(workspace_path))
    configure_tracing()
    ctx.obj = App(workspace_path, output)


@cli.command()
@click.argument("path", required=False, type=click.Path(file_okay=False, path_type=Path))
@pass_app
def init(app: App, path: Optional[Path]):
    """Create a workspace (default: --workspace or the current directory)."""
    root = path or app.workspace_path or Path.cwd()
    workspace = Workspace.init(root)
    configure_logging(workspace.log_path)
    if app.json:
        _emit_json({"workspace": str(workspace.root)})
    else:
        click.echo(f"Initialized workspace at {workspace.root}")


@cli.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@pass_app
def add(app: App, manifest: Path):
    """Create or update a dataset from a YAML manifest."""
    result = apply_manifest(app.coordinator, load_manifest(manifest))
    if app.json:
        _emit_json(result)
    elif result.blocks_appended:
        click.echo(f"{result.name}: {result.blocks_appended} block(s) appended ({result.dataset_id})")
    else:
        click.echo(f"{result.name}: unchanged")


@cli.command()
@click.argument("name")
@click.option(
    "--source",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Override the source file.",
)
@pass_app
def ingest(app: App, name: str, source: Optional[Path]):
    """Ingest the current content of a root dataset's source."""
    result = app.coordinator.ingest(name, source)
    if app.json:
        _emit_json(
            {
                "records_added": result.records_added,
                "block_sequence": None if result.block is None else result.block.sequence_number,
                "reason": result.reason,
            }
        )
    elif result.no_op:
        click.echo(f"{name}: {result.reason}")
    else:
        click.echo(f"{name}: {result.records_added} records added (block {result.block.sequence_number})")


@cli.command()
@click.argument("name")
@pass_app
def pull(app: App, name: str):
    """Bring a dataset and all its inputs up to date."""
    report = app.coordinator.pull(name)
    if app.json:
        _emit_json(report)
    else:
        rows = [
            {
                "dataset": action.name or action.dataset_id[:12],
                "action": action.action,
                "block": action.block_sequence,
                "detail": action.detail,
            }
            for action in report.actions
        ]
        click.echo(tabulate(rows, headers="keys") if rows else f"{name}: up to date")
        for failure in report.failures:
            click.echo(f"Failed: {failure.name or failure.dataset_id}: {failure.error}", err=True)
        for skipped in report.skipped:
            click.echo(f"Skipped: {skipped}", err=True)
    if report.failures:
        raise click.exceptions.Exit(max(failure.exit_code for failure in report.failures))


@cli.command()
@click.argument("name")
@pass_app
def log(app: App, name: str):
    """List the blocks of a dataset's metadata chain."""
    blocks = app.coordinator.chain(name).blocks()
    if app.json:
        _emit_json([{"block_hash": block_hash, **block.model_dump(by_alias=True)} for block_hash, block in blocks])
        return
    rows = [
        {
            "seq": block.sequence_number,
            "system_time": format_timestamp(block.system_time),
            "event": block.event.kind,
            "summary": describe_event(block),
            "hash": block_hash[:12],
        }
        for block_hash, block in blocks
    ]
    click.echo(tabulate(rows, headers="keys"))


@cli.command()
@click.argument("name")
@click.option("--integrity-only", is_flag=True, help="Skip re-execution of transforms.")
@click.option("--recursive", is_flag=True, help="Also verify every input, transitively.")
@pass_app
def verify(app: App, name: str, integrity_only: bool, recursive: bool):
    """Check hashes and chain rules, then replay transforms byte for byte."""
    coordinator = app.coordinator
    integrity = coordinator.verify_integrity(name, recursive=recursive)
    results: List[dict] = [
        {"dataset_id": report.dataset_id, "check": "integrity", "valid": report.valid, "detail": report.describe()}
        for report in integrity.reports
    ]
    if integrity.valid and not integrity_only:
        targets = [report.dataset_id for report in integrity.reports]
        for dataset_id in targets:
            reproducibility = coordinator.verify_reproducibility(dataset_id)
            detail = f"{reproducibility.blocks_verified} blocks replayed"
            if reproducibility.divergences:
                first = reproducibility.divergences[0]
                detail = (
                    f"diverges at seq {first.sequence_number}: {first.field} "
                    f"(expected {first.expected}, got {first.actual})"
                )
            results.append(
                {"dataset_id": dataset_id, "check": "reproducibility", "valid": reproducibility.valid, "detail": detail}
            )
    if app.json:
        _emit_json(results)
    else:
        rows = [
            {
                "dataset": coordinator.name_of(row["dataset_id"]) or row["dataset_id"][:12],
                "check": row["check"],
                "result": "ok" if row["valid"] else "FAILED",
                "detail": row["detail"],
            }
            for row in results
        ]
        click.echo(tabulate(rows, headers="keys"))
    if not all(row["valid"] for row in results):
        raise click.exceptions.Exit(2)


@cli.command()
@click.argument("name")
@pass_app
def lineage(app: App, name: str):
    """Show the datasets a dataset is computed from."""
    graph = dataset_lineage(app.coordinator, name)
    if app.json:
        _emit_json(graph)
        return
    labels = {node.dataset_id: node.name or node.dataset_id[:12] for node in graph.nodes}
    rows = [{"dataset": labels[n.dataset_id], "kind": n.kind, "id": n.dataset_id[:12]} for n in graph.nodes]
    click.echo(tabulate(rows, headers="keys"))
    for source, target in graph.edges:
        click.echo(f"{labels.get(source, source[:12])} -> {labels.get(target, target[:12])}")


@cli.command()
@click.argument("name")
@click.argument("offsets", nargs=-1, required=True, type=int)
@pass_app
def trace(app: App, name: str, offsets):
    """Trace output records back to the root records that produced them."""
    tree = trace_records(app.coordinator, name, list(offsets))
    if app.json:
        _emit_json(tree)
    else:
        click.echo("\n".join(render_tree(tree)))


@cli.command()
@click.argument("name")
@click.option("--as-of", "as_of", type=TIMESTAMP, help="Read the dataset as it was at this system time.")
@pass_app
def project(app: App, name: str, as_of: Optional[datetime]):
    """Print a dataset's current (or as-of) state."""
    rows = app.coordinator.project(name, as_of)
    if app.json:
        _emit_json(rows)
    else:
        click.echo(_table(rows))


@cli.command("set-watermark")
@click.argument("name")
@click.argument("watermark", type=TIMESTAMP)
@pass_app
def set_watermark(app: App, name: str, watermark: datetime):
    """Manually advance a root dataset's watermark."""
    block = app.coordinator.set_watermark(name, watermark)
    if app.json:
        _emit_json({"block_sequence": block.sequence_number, "watermark": watermark})
    else:
        click.echo(f"{name}: watermark {format_timestamp(watermark)} (block {block.sequence_number})")


@cli.command()
@click.argument("name")
@click.argument("repo", type=click.Path(path_type=Path))
@pass_app
def push(app: App, name: str, repo: Path):
    """Publish a dataset to a directory repository."""
    report = sync_push(app.workspace, name, repo)
    if app.json:
        _emit_json(report)
    else:
        click.echo(f"{name}: {report.blocks_transferred} blocks, {report.objects_transferred} objects pushed")


@cli.command("pull-remote")
@click.argument("dataset")
@click.argument("repo", type=click.Path(path_type=Path))
@pass_app
def pull_remote(app: App, dataset: str, repo: Path):
    """Fetch a dataset from a directory repository, verifying everything received."""
    workspace = app.workspace
    try:
        dataset_id = workspace.resolve(dataset)
    except UnknownDataset:
        dataset_id = dataset
    report = sync_pull_remote(workspace, dataset_id, repo)
    if app.json:
        _emit_json(report)
    else:
        label = report.name or report.dataset_id[:12]
        click.echo(f"{label}: {report.blocks_transferred} blocks, {report.objects_transferred} objects pulled")


@cli.command()
@click.argument("name")
@click.option("-n", "count", type=click.IntRange(min=1), default=10, show_default=True)
@pass_app
def tail(app: App, name: str, count: int):
    """Print the last records of a dataset."""
    records = app.coordinator.tail(name, count)
    if app.json:
        _emit_json(records)
    else:
        click.echo(_table(record.to_row() for record in records))


def main() -> None:
    load_environment()
    try:
        cli(prog_name="odf")
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        click.echo("\nInterrupted", err=True)
        raise SystemExit(130)


__all__ = ["cli", "describe_event", "main"]
