import pytest

from odf_desk.content_store import ObjectStore
from odf_desk.coordinator import Coordinator
from odf_desk.workspace import Workspace
from support import StepClock


@pytest.fixture(autouse=True)
def _isolated_environment(monkeypatch):
    for name in ("ODF_WORKSPACE", "ODF_LOG_FILE", "ODF_OTLP_ENDPOINT"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def clock():
    return StepClock()


@pytest.fixture
def store(tmp_path):
    return ObjectStore(tmp_path / "objects")


@pytest.fixture
def workspace(tmp_path, clock):
    return Workspace.init(tmp_path / "ws", clock=clock)


@pytest.fixture
def coordinator(workspace):
    return Coordinator(workspace)


@pytest.fixture
def data_dir(tmp_path):
    path = tmp_path / "data"
    path.mkdir()
    return path
