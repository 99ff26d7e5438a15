"""
Workspace layout and bookkeeping.

::

    <root>/
      .odf/config          workspace settings (YAML)
      .odf/odf.log         log file
      .odf/staging/        objects fetched by pull-remote, pending validation
      objects/             shared content-addressed store
      datasets/<id>/head   head block hash of each dataset
      datasets/<id>/lock   held while a dataset is being written
      names                name -> dataset id registry (YAML)
"""

import logging
import os
import time
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, Iterator, Optional

import yaml

from odf_desk.config import WORKSPACE_ENV, WorkspaceConfig, read_workspace_config, write_workspace_config
from odf_desk.content_store import HASH_PATTERN, ObjectStore
from odf_desk.errors import DatasetExists, DatasetLocked, UnknownDataset, WorkspaceConfigInvalid, WorkspaceNotFound
from odf_desk.metadata_chain import MetadataChain, write_text_atomic
from odf_desk.timestamps import truncate, utc_now

logger = logging.getLogger(__name__)

ODF_DIR = ".odf"


class Workspace:
    def __init__(self, root: Path, clock: Optional[Callable[[], datetime]] = None):
        self.root = Path(root).resolve()
        if not (self.root / ODF_DIR).is_dir():
            raise WorkspaceNotFound(f"{self.root} is not an odf workspace (run `odf init`)")
        self.clock = clock or utc_now
        self.config: WorkspaceConfig = read_workspace_config(self.config_path)
        self.store = ObjectStore(self.root / "objects")
        self.datasets_root = self.root / "datasets"

    @classmethod
    def init(cls, root: Path, clock: Optional[Callable[[], datetime]] = None) -> "Workspace":
        root = Path(root)
        odf_dir = root / ODF_DIR
        if not odf_dir.is_dir():
            odf_dir.mkdir(parents=True)
            write_workspace_config(odf_dir / "config")
            (root / "objects").mkdir(exist_ok=True)
            (root / "datasets").mkdir(exist_ok=True)
            logger.info(f"Initialized workspace at {root}")
        return cls(root, clock)

    @classmethod
    def discover(cls, start: Optional[Path] = None, clock: Optional[Callable[[], datetime]] = None) -> "Workspace":
        """Open the workspace named by ``ODF_WORKSPACE``, else the nearest one above ``start``."""
        override = os.getenv(WORKSPACE_ENV)
        if override:
            return cls(Path(override), clock)
        current = Path(start or Path.cwd()).resolve()
        for candidate in [current, *current.parents]:
            if (candidate / ODF_DIR).is_dir():
                return cls(candidate, clock)
        raise WorkspaceNotFound(f"no .odf workspace found above {current}")

    @property
    def config_path(self) -> Path:
        return self.root / ODF_DIR / "config"

    @property
    def log_path(self) -> Path:
        return self.root / ODF_DIR / "odf.log"

    @property
    def staging_root(self) -> Path:
        return self.root / ODF_DIR / "staging"

    @property
    def names_path(self) -> Path:
        return self.root / "names"

    def now(self) -> datetime:
        return truncate(self.clock())

    # name registry

    def names(self) -> Dict[str, str]:
        if not self.names_path.is_file():
            return {}
        data = yaml.safe_load(self.names_path.read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise WorkspaceConfigInvalid(f"{self.names_path} is not a name -> dataset id mapping")
        return {str(name): str(dataset_id) for name, dataset_id in data.items()}

    def register(self, name: str, dataset_id: str) -> None:
        names = self.names()
        if names.get(name, dataset_id) != dataset_id:
            raise DatasetExists(f"name {name!r} already refers to dataset {names[name]}")
        names[name] = dataset_id
        write_text_atomic(self.names_path, yaml.safe_dump(names, sort_keys=True))

    def name_of(self, dataset_id: str) -> Optional[str]:
        for name, candidate in self.names().items():
            if candidate == dataset_id:
                return name
        return None

    def resolve(self, name_or_id: str) -> str:
        names = self.names()
        if name_or_id in names:
            return names[name_or_id]
        if HASH_PATTERN.match(name_or_id) and (self.datasets_root / name_or_id / "head").is_file():
            return name_or_id
        raise UnknownDataset(f"unknown dataset {name_or_id!r}")

    def dataset_ids(self):
        if not self.datasets_root.is_dir():
            return []
        return sorted(entry.name for entry in self.datasets_root.iterdir() if (entry / "head").is_file())

    # datasets

    def dataset_dir(self, dataset_id: str) -> Path:
        return self.datasets_root / dataset_id

    def chain(self, dataset_id: Optional[str] = None) -> MetadataChain:
        return MetadataChain(self.store, self.datasets_root, dataset_id)

    def source_path(self, dataset_id: str) -> Optional[Path]:
        path = self.dataset_dir(dataset_id) / "source_path"
        if not path.is_file():
            return None
        return Path(path.read_text(encoding="utf-8").strip())

    def set_source_path(self, dataset_id: str, source: Path) -> None:
        write_text_atomic(self.dataset_dir(dataset_id) / "source_path", str(Path(source).resolve()) + "\n")

    @contextmanager
    def lock(self, dataset_id: str) -> Iterator[None]:
        """Hold the dataset's exclusive writer lock."""
        path = self.dataset_dir(dataset_id) / "lock"
        path.parent.mkdir(parents=True, exist_ok=True)
        deadline = time.monotonic() + self.config.lock_timeout_seconds
        warned = False
        while True:
            try:
                fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                break
            except FileExistsError:
                if not warned:
                    logger.warning(f"Waiting for lock on dataset {dataset_id}")
                    warned = True
                if time.monotonic() >= deadline:
                    raise DatasetLocked(f"dataset {dataset_id} is locked by another writer ({path})")
                time.sleep(0.05)
        try:
            os.write(fd, str(os.getpid()).encode("ascii"))
            os.close(fd)
            yield
        finally:
            path.unlink(missing_ok=True)
