import sys
import os
import shutil
import logging
import pathlib

from tabulate import tabulate

from odf_desk.config import configure_logging, load_environment
from odf_desk.coordinator import Coordinator
from odf_desk.errors import OdfError
from odf_desk.manifest import apply_manifest, load_manifest
from odf_desk.provenance import render_tree, trace
from odf_desk.timestamps import format_timestamp
from odf_desk.workspace import Workspace

load_environment()

current_dir = pathlib.Path(__file__).parent.absolute()

# Log to a file named after this folder, keeping the console for the walkthrough output
dir_name = os.path.basename(os.path.dirname(os.path.abspath(__file__)))
configure_logging(pathlib.Path(f"{dir_name}.log"))
logger = logging.getLogger("late_shipments_walkthrough")

WORKSPACE_DIR = current_dir / "workspace"
MANIFESTS = ["orders.yaml", "shipments.yaml", "late_shipments.yaml"]


def fresh_workspace() -> Workspace:
    """Start from an empty workspace next to this script."""
    if WORKSPACE_DIR.exists():
        logger.info(f"Removing previous workspace {WORKSPACE_DIR}")
        shutil.rmtree(WORKSPACE_DIR)
    return Workspace.init(WORKSPACE_DIR)


def show(coordinator: Coordinator, name: str):
    rows = [
        {"offset": row["offset"], "order_id": row["order_id"], "order_time": format_timestamp(row["order_time"])}
        for row in coordinator.project(name)
    ]
    print(tabulate(rows, headers="keys") if rows else "(no late shipments yet)")


def pull_and_report(coordinator: Coordinator, name: str):
    report = coordinator.pull(name)
    for action in report.actions:
        print(f"  {action.name}: {action.action} {action.detail}")
    for failure in report.failures:
        logger.error(f"Pull failed for {failure.name}: {failure.error}")
        print(f"  {failure.name}: FAILED {failure.error}")
    return report


def main():
    """Main entry point for the walkthrough."""
    logger.info("=== Late shipments walkthrough ===")

    coordinator = Coordinator(fresh_workspace())
    for manifest in MANIFESTS:
        result = apply_manifest(coordinator, load_manifest(current_dir / manifest))
        print(f"Added {result.name} ({result.blocks_appended} blocks)")

    print("\n--- First round: orders up to Jan 20, shipments up to Jan 15 ---")
    pull_and_report(coordinator, "late_shipments")
    show(coordinator, "late_shipments")

    print("\n--- Second round: more shipments arrive ---")
    coordinator.ingest("shipments", current_dir / "data" / "shipments_later.csv")
    pull_and_report(coordinator, "late_shipments")
    show(coordinator, "late_shipments")

    print("\n--- Where did the first late shipment come from? ---")
    print("\n".join(render_tree(trace(coordinator, "late_shipments", [0]))))

    print("\n--- Verification ---")
    integrity = coordinator.verify_integrity("late_shipments", recursive=True)
    replay = coordinator.verify_reproducibility("late_shipments")
    print(f"Integrity: {'ok' if integrity.valid else 'FAILED'}")
    print(f"Replay: {'ok' if replay.valid else 'FAILED'} ({replay.blocks_verified} blocks)")


if __name__ == "__main__":
    try:
        main()
    except OdfError as ex:
        logger.error(f"Walkthrough failed: {ex}", exc_info=True)
        print(f"Error: {ex}")
        sys.exit(ex.exit_code)
    except KeyboardInterrupt:
        logger.info("Operation cancelled by user")
        print("\nOperation cancelled by user. Exiting...")
        sys.exit(0)
