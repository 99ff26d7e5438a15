"""
YAML dataset manifests.

A root manifest::

    name: orders
    kind: root
    source:
      path: orders.csv
      format: csv
      event_time_column: order_time
      schema:
        - {name: order_id, type: int64}
        - {name: order_time, type: timestamp}
      merge: {kind: ledger, primary_key: [order_id]}
      allowed_lateness: 1 DAY

A derivative manifest::

    name: late_shipments
    kind: derivative
    inputs: [orders, shipments]
    query: SELECT ...
    engine: {name: desk-sql, version: 1.1.0}
"""

import logging
import re
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, field_validator

from odf_desk.config import EngineChoice
from odf_desk.coordinator import AddResult, Coordinator
from odf_desk.data_slices import ColumnDef
from odf_desk.engine import engine_version
from odf_desk.errors import ManifestInvalid, UnknownInputName
from odf_desk.expressions import INTERVAL_UNITS
from odf_desk.metadata_chain import MergeStrategy, SetPollingSource

logger = logging.getLogger(__name__)

_LATENESS = re.compile(r"^\s*(\d+)\s*([A-Za-z]*)\s*$")


def parse_lateness(value: Union[int, str]) -> int:
    """Allowed lateness in milliseconds from an integer or ``"<n> <UNIT>"``."""
    if isinstance(value, bool):
        raise ValueError("allowed_lateness must be milliseconds or '<n> <UNIT>'")
    if isinstance(value, int):
        if value < 0:
            raise ValueError("allowed_lateness must not be negative")
        return value
    match = _LATENESS.match(value)
    if match is None:
        raise ValueError(f"cannot read allowed_lateness {value!r}; use milliseconds or '<n> <UNIT>'")
    amount, unit = int(match.group(1)), match.group(2).upper()
    if not unit:
        return amount
    if unit not in INTERVAL_UNITS and unit.endswith("S"):
        unit = unit[:-1]
    if unit not in INTERVAL_UNITS:
        raise ValueError(f"unknown unit {match.group(2)!r}; expected one of {', '.join(INTERVAL_UNITS)}")
    return amount * INTERVAL_UNITS[unit]


class SourceSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    path: str
    format: Literal["csv", "ndjson"]
    event_time_column: Optional[str] = None
    columns: List[ColumnDef] = Field(..., alias="schema", min_length=1)
    merge: MergeStrategy
    allowed_lateness: int = 0

    @field_validator("allowed_lateness", mode="before")
    @classmethod
    def _lateness(cls, value):
        return parse_lateness(value)


class RootManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = Field(..., min_length=1)
    kind: Literal["root"]
    source: SourceSpec


class DerivativeManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = Field(..., min_length=1)
    kind: Literal["derivative"]
    inputs: List[str] = Field(..., min_length=1)
    query: str = Field(..., min_length=1)
    engine: Optional[EngineChoice] = None


Manifest = Annotated[Union[RootManifest, DerivativeManifest], Field(discriminator="kind")]

_manifest_adapter = TypeAdapter(Manifest)


def _field_path(location) -> str:
    parts = list(location)
    if parts and parts[0] in ("root", "derivative"):
        parts = parts[1:]
    path = ""
    for part in parts:
        path += f"[{part}]" if isinstance(part, int) else (f".{part}" if path else str(part))
    return path


def load_manifest(path: Path) -> Union[RootManifest, DerivativeManifest]:
    """Read and validate a manifest; a root's source path is resolved against the manifest's directory."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ManifestInvalid(f"cannot read manifest {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ManifestInvalid(f"manifest {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ManifestInvalid(f"manifest {path} must be a mapping")
    try:
        manifest = _manifest_adapter.validate_python(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ManifestInvalid(first["msg"], _field_path(first["loc"])) from exc
    if isinstance(manifest, RootManifest):
        source_path = Path(manifest.source.path)
        if not source_path.is_absolute():
            source_path = (path.parent / source_path).resolve()
        manifest = manifest.model_copy(
            update={"source": manifest.source.model_copy(update={"path": str(source_path)})}
        )
    logger.debug(f"Loaded {manifest.kind} manifest {manifest.name} from {path}")
    return manifest


def polling_source(manifest: RootManifest) -> SetPollingSource:
    source = manifest.source
    try:
        return SetPollingSource(
            format=source.format,
            schema={"columns": source.columns},
            event_time_column=source.event_time_column,
            merge=source.merge,
            allowed_lateness_ms=source.allowed_lateness,
        )
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ManifestInvalid(first["msg"], "source") from exc


def apply_manifest(coordinator: Coordinator, manifest: Union[RootManifest, DerivativeManifest]) -> AddResult:
    """Materialize a manifest as metadata events; re-applying an unchanged manifest appends nothing."""
    if isinstance(manifest, RootManifest):
        return coordinator.add_root(manifest.name, polling_source(manifest), Path(manifest.source.path))
    known = coordinator.workspace.names()
    for index, name in enumerate(manifest.inputs):
        if name not in known:
            raise UnknownInputName(f"no dataset named {name!r} in this workspace", f"inputs[{index}]")
    engine = None
    if manifest.engine is not None:
        engine = engine_version(manifest.engine.name, manifest.engine.version)
    return coordinator.add_derivative(manifest.name, manifest.inputs, manifest.query, engine)


__all__ = [
    "DerivativeManifest",
    "RootManifest",
    "SourceSpec",
    "apply_manifest",
    "load_manifest",
    "parse_lateness",
    "polling_source",
]
