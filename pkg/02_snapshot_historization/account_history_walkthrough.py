import sys
import os
import shutil
import time
import logging
import pathlib

from tabulate import tabulate

from odf_desk.config import configure_logging, load_environment
from odf_desk.coordinator import Coordinator
from odf_desk.errors import OdfError
from odf_desk.manifest import apply_manifest, load_manifest
from odf_desk.workspace import Workspace

load_environment()

current_dir = pathlib.Path(__file__).parent.absolute()

dir_name = os.path.basename(os.path.dirname(os.path.abspath(__file__)))
configure_logging(pathlib.Path(f"{dir_name}.log"))
logger = logging.getLogger("account_history_walkthrough")

WORKSPACE_DIR = current_dir / "workspace"
EXPORTS = ["monday", "tuesday", "tuesday", "wednesday"]


def print_changes(coordinator: Coordinator, count: int):
    if count == 0:
        print("  no changes")
        return
    rows = [
        {"offset": r.offset, "change": r.observed, **r.payload}
        for r in coordinator.tail("accounts", count)
    ]
    print(tabulate(rows, headers="keys"))


def print_state(coordinator: Coordinator, label: str, as_of=None):
    print(f"\n{label}:")
    print(tabulate(coordinator.project("accounts", as_of), headers="keys"))


def main():
    """Main entry point for the walkthrough."""
    logger.info("=== Account history walkthrough ===")

    if WORKSPACE_DIR.exists():
        shutil.rmtree(WORKSPACE_DIR)
    coordinator = Coordinator(Workspace.init(WORKSPACE_DIR))
    apply_manifest(coordinator, load_manifest(current_dir / "accounts.yaml"))

    moments = {}
    for export in EXPORTS:
        print(f"\n--- Ingesting {export}'s export ---")
        result = coordinator.ingest("accounts", current_dir / "data" / f"accounts_{export}.csv")
        print_changes(coordinator, result.records_added)
        moments[export] = coordinator.workspace.now()
        # keep each export on its own millisecond
        time.sleep(0.002)

    print_state(coordinator, "After Monday", moments["monday"])
    print_state(coordinator, "After Tuesday", moments["tuesday"])
    print_state(coordinator, "Now")


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
