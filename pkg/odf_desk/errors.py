"""
Exception hierarchy for odf_desk.

Every error carries an ``exit_code`` so the command line can map failures
onto its documented codes:

    1  user or validation error
    2  verification failure
    3  I/O failure
"""

from typing import Iterable, Optional


class OdfError(Exception):
    """Base class of all odf_desk errors."""

    exit_code = 1


class UserError(OdfError):
    exit_code = 1


class VerificationError(OdfError):
    exit_code = 2


class StorageError(OdfError):
    exit_code = 3


# content_store


class UnsupportedValue(UserError):
    """A value cannot be canonically encoded (NaN, infinity, naive datetime, ...)."""


class InvalidHash(UserError):
    pass


class ObjectNotFound(StorageError):
    def __init__(self, object_hash: str):
        super().__init__(f"object {object_hash} not found")
        self.object_hash = object_hash


class ObjectCorrupt(VerificationError):
    def __init__(self, object_hash: str, actual_hash: str):
        super().__init__(f"object {object_hash} is corrupt (content hashes to {actual_hash})")
        self.object_hash = object_hash
        self.actual_hash = actual_hash


# metadata_chain


class SystemTimeRegression(UserError):
    pass


class IllegalEventForKind(UserError):
    pass


class WatermarkRegression(UserError):
    pass


class EmptyChain(UserError):
    pass


class BlockNotFound(UserError):
    pass


class IncompatibleSchemaChange(UserError):
    pass


# data_slices


class SchemaViolation(UserError):
    pass


class OffsetGap(UserError):
    pass


class MixedSystemTime(UserError):
    pass


class EmptyInput(UserError):
    pass


# ingest


class SourceError(UserError):
    """Problems with an external source file."""


class ParseFailure(SourceError):
    def __init__(self, message: str, row: Optional[int] = None):
        location = f" at row {row}" if row is not None else ""
        super().__init__(f"{message}{location}")
        self.row = row


class MissingEventTime(ParseFailure):
    pass


class TypeMismatch(ParseFailure):
    pass


class SourceUnavailable(StorageError):
    pass


class DuplicateKeyWithinBatchConflict(UserError):
    pass


class DuplicateKeyInSnapshot(UserError):
    pass


class InvalidEventSequence(UserError):
    pass


# query_dsl


class QueryError(UserError):
    pass


class QuerySyntaxError(QueryError):
    def __init__(self, message: str, line: int, column: int, expected: Iterable[str] = ()):
        self.line = line
        self.column = column
        self.expected = sorted(set(expected))
        hint = f" (expected one of: {', '.join(self.expected)})" if self.expected else ""
        super().__init__(f"{message} at line {line}, column {column}{hint}")


class QueryAnalysisError(QueryError):
    pass


class UnknownColumn(QueryAnalysisError):
    pass


class AmbiguousColumn(QueryAnalysisError):
    pass


class QueryTypeError(QueryAnalysisError):
    pass


class UnknownInputAlias(QueryAnalysisError):
    pass


# engine


class EngineError(OdfError):
    exit_code = 1


class MalformedCheckpoint(EngineError):
    exit_code = 2


class SchemaMismatch(EngineError):
    pass


class AggregateOverflow(EngineError):
    pass


class ArithmeticOverflow(EngineError):
    pass


class EngineVersionUnavailable(EngineError):
    pass


# coordinator


class WorkspaceNotFound(UserError):
    pass


class WorkspaceConfigInvalid(UserError):
    pass


class UnknownDataset(UserError):
    pass


class DatasetExists(UserError):
    pass


class DatasetLocked(StorageError):
    pass


class CycleDetected(UserError):
    pass


class MissingInput(UserError):
    pass


class OffsetNotFound(UserError):
    pass


class ReproducibilityFailure(VerificationError):
    pass


# sync


class NonFastForward(UserError):
    pass


class RepoUnavailable(StorageError):
    pass


class InvalidChain(VerificationError):
    pass


class ObjectMissingInRepo(StorageError):
    pass


# cli


class ManifestInvalid(UserError):
    def __init__(self, message: str, field_path: str = ""):
        prefix = f"{field_path}: " if field_path else ""
        super().__init__(f"{prefix}{message}")
        self.field_path = field_path


class UnknownInputName(ManifestInvalid):
    pass
