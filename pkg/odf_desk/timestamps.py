"""Millisecond-precision UTC timestamps used for system and event times."""

from datetime import datetime, timedelta, timezone
from typing import Annotated, Optional, Union

from pydantic import AfterValidator

EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)

# Largest representable timestamp; stands in for +infinity in close requests.
UTC_MAX = datetime(9999, 12, 31, 23, 59, 59, 999000, tzinfo=timezone.utc)


def truncate(value: datetime) -> datetime:
    """Normalize an aware datetime to UTC with millisecond precision."""
    if value.tzinfo is None:
        raise ValueError(f"naive datetime {value!r} has no timezone")
    try:
        value = value.astimezone(timezone.utc)
    except OverflowError as exc:
        raise ValueError(f"{value!r} is outside the representable UTC range") from exc
    return value.replace(microsecond=(value.microsecond // 1000) * 1000)


def parse_timestamp(text: str) -> datetime:
    """
    Parse an RFC 3339 timestamp.

    A trailing ``Z`` or an explicit offset is honoured; naive values are
    treated as UTC. Sub-millisecond digits are dropped.

    Raises:
        ValueError: If the text is not a timestamp.
    """
    if not isinstance(text, str) or not text.strip():
        raise ValueError(f"not a timestamp: {text!r}")
    candidate = text.strip()
    if candidate.endswith(("Z", "z")):
        candidate = candidate[:-1] + "+00:00"
    parsed = datetime.fromisoformat(candidate)
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=timezone.utc)
    return truncate(parsed)


def format_timestamp(value: datetime) -> str:
    """Canonical form: ``YYYY-MM-DDTHH:MM:SS.mmmZ``."""
    value = truncate(value)
    return (
        f"{value.year:04d}-{value.month:02d}-{value.day:02d}"
        f"T{value.hour:02d}:{value.minute:02d}:{value.second:02d}.{value.microsecond // 1000:03d}Z"
    )


def to_millis(value: datetime) -> int:
    delta = truncate(value) - EPOCH
    return (delta.days * 86_400 + delta.seconds) * 1000 + delta.microseconds // 1000


def from_millis(millis: int) -> datetime:
    return EPOCH + timedelta(milliseconds=millis)


def optional_millis(value: Optional[datetime]) -> Optional[int]:
    return None if value is None else to_millis(value)


def optional_from_millis(millis: Optional[int]) -> Optional[datetime]:
    return None if millis is None else from_millis(millis)


def utc_now() -> datetime:
    return truncate(datetime.now(timezone.utc))


def coerce_timestamp(value: Union[str, datetime]) -> datetime:
    if isinstance(value, datetime):
        if value.tzinfo is None:
            value = value.replace(tzinfo=timezone.utc)
        return truncate(value)
    return parse_timestamp(value)


# Pydantic field type for timestamps stored in metadata.
Timestamp = Annotated[datetime, AfterValidator(truncate)]
