"""
Canonical encoding, hashing and the content-addressed object store.

The canonical encoding defines every hash in the system:

- JSON text, UTF-8, no insignificant whitespace
- map keys sorted by code point
- integers in base 10 (64-bit range only)
- floats in shortest round-trip form (non-finite values rejected)
- timestamps as UTC RFC 3339 strings with exactly millisecond precision

Objects live at ``objects/<first 2 hex>/<remaining 62 hex>`` and are
written once, atomically.
"""

import hashlib
import json
import logging
import math
import os
import re
import tempfile
from collections.abc import Mapping
from datetime import datetime
from pathlib import Path
from typing import Any, Iterator, Optional

from odf_desk.errors import InvalidHash, ObjectCorrupt, ObjectNotFound, UnsupportedValue
from odf_desk.timestamps import format_timestamp

logger = logging.getLogger(__name__)

HASH_PATTERN = re.compile(r"^[0-9a-f]{64}$")

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1


def _plain(value: Any) -> Any:
    """Reduce a structured value to JSON-native types, rejecting anything non-portable."""
    if value is None or isinstance(value, (bool, str)):
        return value
    if isinstance(value, int):
        if not INT64_MIN <= value <= INT64_MAX:
            raise UnsupportedValue(f"integer {value} does not fit in 64 bits")
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            raise UnsupportedValue(f"non-finite float {value!r} cannot be encoded")
        return value
    if isinstance(value, datetime):
        if value.tzinfo is None:
            raise UnsupportedValue(f"naive datetime {value!r} cannot be encoded")
        return format_timestamp(value)
    if isinstance(value, Mapping):
        plain = {}
        for key, item in value.items():
            if not isinstance(key, str):
                raise UnsupportedValue(f"map key {key!r} is not a string")
            plain[key] = _plain(item)
        return plain
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    raise UnsupportedValue(f"values of type {type(value).__name__} cannot be encoded")


def canonicalize(value: Any) -> bytes:
    """Encode a structured value into its canonical bytes."""
    text = json.dumps(
        _plain(value),
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    )
    return text.encode("utf-8")


def _reject_constant(name: str) -> Any:
    raise UnsupportedValue(f"non-finite constant {name} cannot be decoded")


def decode(data: bytes) -> Any:
    """Decode canonical bytes back into plain values (timestamps stay strings)."""
    try:
        return json.loads(data.decode("utf-8"), parse_constant=_reject_constant)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise UnsupportedValue(f"bytes are not a canonical encoding: {exc}") from exc


def hash_bytes(data: bytes) -> str:
    """SHA-256 of the bytes as 64 lowercase hex characters."""
    return hashlib.sha256(data).hexdigest()


def check_hash(value: str) -> str:
    if not isinstance(value, str) or not HASH_PATTERN.match(value):
        raise InvalidHash(f"{value!r} is not a 64-character lowercase hex digest")
    return value


class ObjectStore:
    """
    Filesystem-backed content-addressed store.

    A store may read through to a ``base`` store; ``put`` always writes to
    this store only. Sync uses this to stage fetched objects next to the
    workspace store until the fetched chain has been validated.
    """

    def __init__(self, root: Path, base: Optional["ObjectStore"] = None):
        self.root = Path(root)
        self.base = base

    def path_for(self, object_hash: str) -> Path:
        check_hash(object_hash)
        return self.root / object_hash[:2] / object_hash[2:]

    def put(self, data: bytes) -> str:
        object_hash = hash_bytes(data)
        path = self.path_for(object_hash)
        if path.exists():
            return object_hash
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as handle:
                handle.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        logger.debug(f"Stored object {object_hash} ({len(data)} bytes)")
        return object_hash

    def contains_local(self, object_hash: str) -> bool:
        return self.path_for(object_hash).is_file()

    def contains(self, object_hash: str) -> bool:
        if self.contains_local(object_hash):
            return True
        return self.base is not None and self.base.contains(object_hash)

    def read_unverified(self, object_hash: str) -> bytes:
        path = self.path_for(object_hash)
        if path.is_file():
            return path.read_bytes()
        if self.base is not None:
            return self.base.read_unverified(object_hash)
        raise ObjectNotFound(object_hash)

    def get(self, object_hash: str) -> bytes:
        """Return the object's bytes after checking they still hash to its name."""
        data = self.read_unverified(object_hash)
        actual = hash_bytes(data)
        if actual != object_hash:
            raise ObjectCorrupt(object_hash, actual)
        return data

    def verify(self, object_hash: str) -> None:
        self.get(object_hash)

    def delete(self, object_hash: str) -> bool:
        """Remove a local object; only derivative data and checkpoints are ever deleted."""
        path = self.path_for(object_hash)
        if path.is_file():
            path.unlink()
            return True
        return False

    def iter_hashes(self) -> Iterator[str]:
        if not self.root.is_dir():
            return
        for shard in sorted(self.root.iterdir()):
            if not shard.is_dir() or len(shard.name) != 2:
                continue
            for entry in sorted(shard.iterdir()):
                name = shard.name + entry.name
                if entry.is_file() and HASH_PATTERN.match(name):
                    yield name
