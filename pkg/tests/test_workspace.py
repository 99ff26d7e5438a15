from datetime import datetime, timezone

import pytest

from odf_desk.config import WorkspaceConfig, read_workspace_config, write_workspace_config
from odf_desk.errors import (
    DatasetExists,
    DatasetLocked,
    UnknownDataset,
    WorkspaceConfigInvalid,
    WorkspaceNotFound,
)
from odf_desk.workspace import Workspace


def test_init_is_idempotent(tmp_path):
    first = Workspace.init(tmp_path / "ws")
    first.register("orders", "a" * 64)

    second = Workspace.init(tmp_path / "ws")

    assert second.names() == {"orders": "a" * 64}
    assert second.config == WorkspaceConfig()


def test_opening_a_plain_directory_fails(tmp_path):
    with pytest.raises(WorkspaceNotFound):
        Workspace(tmp_path)


def test_invalid_config(workspace):
    workspace.config_path.write_text("lock_timeout_seconds: -5\n", encoding="utf-8")

    with pytest.raises(WorkspaceConfigInvalid, match="lock_timeout_seconds"):
        Workspace(workspace.root)


def test_unknown_config_key(workspace):
    workspace.config_path.write_text("colour: blue\n", encoding="utf-8")

    with pytest.raises(WorkspaceConfigInvalid):
        read_workspace_config(workspace.config_path)


def test_discover_from_a_subdirectory(workspace):
    nested = workspace.root / "notes" / "2024"
    nested.mkdir(parents=True)

    assert Workspace.discover(nested).root == workspace.root


def test_discover_prefers_environment(tmp_path, workspace, monkeypatch):
    monkeypatch.setenv("ODF_WORKSPACE", str(workspace.root))

    assert Workspace.discover(tmp_path).root == workspace.root


def test_discover_without_workspace(tmp_path):
    with pytest.raises(WorkspaceNotFound):
        Workspace.discover(tmp_path)


def test_register_and_resolve(workspace):
    dataset_id = "b" * 64
    workspace.register("orders", dataset_id)
    workspace.register("orders", dataset_id)

    assert workspace.resolve("orders") == dataset_id
    assert workspace.name_of(dataset_id) == "orders"
    with pytest.raises(DatasetExists):
        workspace.register("orders", "c" * 64)
    with pytest.raises(UnknownDataset):
        workspace.resolve("shipments")


def test_lock_times_out(workspace):
    write_workspace_config(workspace.config_path, WorkspaceConfig(lock_timeout_seconds=0))
    busy = Workspace(workspace.root)

    with busy.lock("d" * 64):
        with pytest.raises(DatasetLocked) as info:
            with busy.lock("d" * 64):
                pass
    assert info.value.exit_code == 3

    with busy.lock("d" * 64):
        pass


def test_now_truncates_to_milliseconds(tmp_path):
    ws = Workspace.init(tmp_path / "ws", clock=lambda: datetime(2024, 1, 1, 0, 0, 0, 123456, tzinfo=timezone.utc))

    assert ws.now().microsecond == 123000
