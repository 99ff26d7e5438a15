"""
Process-level configuration: environment, logging and tracing.

Settings come from the environment, optionally seeded from a ``.env``
file. Logs go to a file only so command output stays clean.
"""

import logging
import os
from pathlib import Path
from typing import Optional

import yaml
from dotenv import find_dotenv, load_dotenv
from opentelemetry import trace
from opentelemetry.sdk.resources import Resource
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import BatchSpanProcessor
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from odf_desk.errors import WorkspaceConfigInvalid

WORKSPACE_ENV = "ODF_WORKSPACE"
LOG_FILE_ENV = "ODF_LOG_FILE"
OTLP_ENDPOINT_ENV = "ODF_OTLP_ENDPOINT"

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

_tracing_configured = False


def load_environment() -> None:
    """Load a ``.env`` file from the current directory or one of its parents."""
    dotenv_path = find_dotenv(usecwd=True)
    if dotenv_path:
        load_dotenv(dotenv_path=dotenv_path)


def log_level() -> int:
    name = os.getenv("LOG_LEVEL", "INFO").upper()
    numeric_level = getattr(logging, name, logging.INFO)
    return numeric_level if isinstance(numeric_level, int) else logging.INFO


def configure_logging(log_file: Path) -> None:
    """Send all odf_desk logging to ``log_file`` (``ODF_LOG_FILE`` overrides it)."""
    override = os.getenv(LOG_FILE_ENV)
    path = Path(override) if override else Path(log_file)
    path.parent.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=log_level(),
        format=LOG_FORMAT,
        handlers=[logging.FileHandler(path)],
        force=True,
    )


def configure_tracing(service_name: str = "odf-desk") -> None:
    """Install a tracer provider; spans are exported only when ``ODF_OTLP_ENDPOINT`` is set."""
    global _tracing_configured
    if _tracing_configured:
        return
    provider = TracerProvider(resource=Resource.create({"service.name": service_name}))
    endpoint = os.getenv(OTLP_ENDPOINT_ENV)
    if endpoint:
        from opentelemetry.exporter.otlp.proto.http.trace_exporter import OTLPSpanExporter

        provider.add_span_processor(BatchSpanProcessor(OTLPSpanExporter(endpoint=endpoint)))
        logging.getLogger(__name__).info(f"Exporting spans to {endpoint}")
    trace.set_tracer_provider(provider)
    _tracing_configured = True


class EngineChoice(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "desk-sql"
    version: str = "1.1.0"


class WorkspaceConfig(BaseModel):
    """Contents of ``.odf/config``."""

    model_config = ConfigDict(extra="forbid")

    format_version: int = Field(1, ge=1, le=1)
    lock_timeout_seconds: float = Field(10.0, ge=0)
    default_engine: EngineChoice = EngineChoice()


def read_workspace_config(path: Path) -> WorkspaceConfig:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise WorkspaceConfigInvalid(f"cannot read {path}: {exc}") from exc
    try:
        return WorkspaceConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise WorkspaceConfigInvalid(f"{path}: {location}: {first['msg']}") from exc


def write_workspace_config(path: Path, config: Optional[WorkspaceConfig] = None) -> None:
    config = config or WorkspaceConfig()
    Path(path).write_text(yaml.safe_dump(config.model_dump(), sort_keys=True), encoding="utf-8")
