"""Canonical data model: log records, device identifiers, tags and versions.

Two line layouts are used throughout, one record per ``\\n``-terminated line
with single-TAB separators:

* device file:  ``timestamp_us  task_id  level  tag  message``
* stored file:  ``device_id  upload_time_us  timestamp_us  task_id  level  tag  message``

Messages are escaped (``\\`` -> ``\\\\``, TAB -> ``\\t``, LF -> ``\\n``) so a
line never contains a raw separator. Timestamps are integer microseconds and
never pass through a float.
"""

from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .errors import InvalidArgument, ParseError

MAX_TAG_BYTES = 128
US_PER_SECOND = 1_000_000
US_PER_DAY = 86_400 * US_PER_SECOND

_INT_RE = re.compile(r"(?:0|[1-9][0-9]*)\Z")
_SPACE_RE = re.compile(r"\s")
_HEX64_RE = re.compile(r"[0-9a-f]{64}\Z")
_ALNUM_RE = re.compile(r"[A-Za-z0-9]+\Z")
_ESCAPE_RE = re.compile(r"\\(.?)", re.S)
_UNESCAPES = {"\\": "\\", "t": "\t", "n": "\n"}


class Level(str, enum.Enum):
    VERBOSE = "V"
    DEBUG = "D"
    INFO = "I"
    WARN = "W"
    ERROR = "E"

    def __str__(self):
        return self.value


_LEVELS = {lv.value: lv for lv in Level}


class TagCategory(str, enum.Enum):
    PHONELAB = "PhoneLab"
    EXPERIMENTS = "Experiments"
    OTHER = "Other"

    def __str__(self):
        return self.value

    @classmethod
    def parse(cls, text: str) -> "TagCategory":
        for member in cls:
            if member.value.lower() == text.strip().lower():
                return member
        raise InvalidArgument(f"unknown tag category {text!r}")


def hash_device_id(meid: str) -> str:
    """Return the 64-hex SHA-256 digest used as the stable device identifier."""
    if not meid:
        raise InvalidArgument("meid must be non-empty")
    try:
        raw = meid.encode("ascii")
    except UnicodeEncodeError:
        raise InvalidArgument("meid must be ASCII") from None
    return hashlib.sha256(raw).hexdigest()


def is_device_id(value: str) -> bool:
    return bool(_HEX64_RE.match(value))


def check_timestamp(value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise InvalidArgument(f"timestamp must be an integer, got {type(value).__name__}")
    if value < 0:
        raise InvalidArgument("timestamp must be non-negative")
    return value


def tag_problem(name: str) -> Optional[str]:
    """Describe why ``name`` is not a legal tag, or None if it is."""
    if not name:
        return "empty tag"
    if not name.isascii():
        return "tag must be ASCII"
    if _SPACE_RE.search(name):
        return "tag contains whitespace"
    if len(name) > MAX_TAG_BYTES:
        return f"tag longer than {MAX_TAG_BYTES} bytes"
    return None


def check_tag(name: str) -> str:
    problem = tag_problem(name)
    if problem:
        raise InvalidArgument(problem)
    return name


def escape_message(message: str) -> str:
    if "\\" not in message and "\t" not in message and "\n" not in message:
        return message
    return message.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape_one(match):
    try:
        return _UNESCAPES[match.group(1)]
    except KeyError:
        raise ParseError("message", f"bad escape sequence {match.group(0)!r}") from None


def unescape_message(text: str) -> str:
    if "\n" in text or "\t" in text:
        raise ParseError("message", "raw tab or newline")
    if "\\" not in text:
        return text
    return _ESCAPE_RE.sub(_unescape_one, text)


@dataclass(frozen=True)
class LogRecord:
    """One telemetry line.

    ``device`` is None for the device-side form; the backend attaches it on
    ingest, which yields the canonical six-field record.
    """

    timestamp: int
    task_id: int
    level: Level
    tag: str
    message: str
    device: Optional[str] = None

    def with_device(self, device: str) -> "LogRecord":
        return LogRecord(self.timestamp, self.task_id, self.level, self.tag, self.message, device)

    def canonical(self) -> tuple:
        """The six dataset fields, in dataset order."""
        return (self.device, self.timestamp, self.task_id, self.level.value, self.tag, self.message)


@dataclass(frozen=True)
class StoredRecord:
    record: LogRecord
    upload_time: int
    seq: int

    @property
    def device(self) -> str:
        return self.record.device


def make_record(timestamp, task_id, level, tag, message, device=None) -> LogRecord:
    """Build a validated record; raises InvalidArgument on bad fields."""
    check_timestamp(timestamp)
    if isinstance(task_id, bool) or not isinstance(task_id, int) or task_id < 0:
        raise InvalidArgument("task_id must be a non-negative integer")
    try:
        level = Level(level)
    except ValueError:
        raise InvalidArgument(f"unknown level {level!r}") from None
    check_tag(tag)
    if not isinstance(message, str):
        raise InvalidArgument("message must be text")
    if device is not None and not is_device_id(device):
        raise InvalidArgument("device must be 64 lowercase hex characters")
    return LogRecord(timestamp, task_id, level, tag, message, device)


def format_record(record: LogRecord) -> str:
    """Device-file line for ``record``, without the terminating newline."""
    return (
        f"{record.timestamp}\t{record.task_id}\t{record.level.value}\t"
        f"{record.tag}\t{escape_message(record.message)}"
    )


def format_stored(stored: StoredRecord) -> str:
    rec = stored.record
    return f"{rec.device}\t{stored.upload_time}\t{format_record(rec)}"


def _parse_int(text, field_name):
    if not _INT_RE.match(text):
        raise ParseError(field_name, f"not a base-10 integer: {text[:32]!r}")
    return int(text)


_GOOD_TAGS: set = set()


def _parse_fields(parts, device=None):
    ts_s, task_s, level_s, tag, msg = parts
    timestamp = _parse_int(ts_s, "timestamp")
    task_id = _parse_int(task_s, "task_id")
    level = _LEVELS.get(level_s)
    if level is None:
        raise ParseError("level", f"unknown level {level_s!r}")
    if tag not in _GOOD_TAGS:
        problem = tag_problem(tag)
        if problem:
            raise ParseError("tag", problem)
        if len(_GOOD_TAGS) < 65536:
            _GOOD_TAGS.add(tag)
    return LogRecord(timestamp, task_id, level, tag, unescape_message(msg), device)


def parse_record(line: str) -> LogRecord:
    """Parse a device-file line (no trailing newline) into a device-less record."""
    if "\n" in line:
        raise ParseError("message", "raw newline")
    parts = line.split("\t")
    if len(parts) != 5:
        raise ParseError("field-count", f"expected 5 fields, got {len(parts)}")
    return _parse_fields(parts)


def parse_stored(line: str, seq: int = 0) -> StoredRecord:
    if "\n" in line:
        raise ParseError("message", "raw newline")
    parts = line.split("\t")
    if len(parts) != 7:
        raise ParseError("field-count", f"expected 7 fields, got {len(parts)}")
    device = parts[0]
    if not is_device_id(device):
        raise ParseError("device", "not a 64-hex device id")
    upload_time = _parse_int(parts[1], "upload_time")
    return StoredRecord(_parse_fields(parts[2:], device), upload_time, seq)


def encoded_size(record: LogRecord) -> int:
    """Bytes the record occupies in a device file, newline included."""
    return len(format_record(record).encode("utf-8")) + 1


def utc_day(timestamp: int) -> int:
    """Days since the Unix epoch of a microsecond timestamp (integer floor)."""
    return timestamp // US_PER_DAY


# --- tags -----------------------------------------------------------------

def split_tag(tag: str):
    """Split ``Institution-Code-Detail`` into its three parts, or None."""
    parts = tag.split("-", 2)
    if len(parts) != 3:
        return None
    inst, code, detail = parts
    if not (_ALNUM_RE.match(inst) and _ALNUM_RE.match(code)) or not detail:
        return None
    return inst, code, detail


@dataclass(frozen=True)
class TagRegistry:
    """Namespaces owned by the platform team and by registered experiments.

    Each entry is an ``(institution, code)`` pair. A pair present in both sets
    resolves to PhoneLab.
    """

    phonelab: frozenset = field(default_factory=frozenset)
    experiments: frozenset = field(default_factory=frozenset)

    @classmethod
    def of(cls, phonelab: Iterable = (), experiments: Iterable = ()) -> "TagRegistry":
        return cls(frozenset(map(tuple, phonelab)), frozenset(map(tuple, experiments)))

    def owner(self, tag: str):
        """(institution, code) of a registered namespace containing ``tag``."""
        parts = split_tag(tag)
        if parts is None:
            return None
        pair = parts[:2]
        if pair in self.phonelab or pair in self.experiments:
            return pair
        return None

    def category(self, tag: str) -> TagCategory:
        return categorize_tag(tag, self)


def categorize_tag(tag: str, registry: TagRegistry) -> TagCategory:
    parts = split_tag(tag)
    if parts is not None:
        pair = parts[:2]
        if pair in registry.phonelab:
            return TagCategory.PHONELAB
        if pair in registry.experiments:
            return TagCategory.EXPERIMENTS
    return TagCategory.OTHER


def validate_tag_name(tag: str, institution: str, code: str) -> Optional[str]:
    """Check ``tag`` against the owner's namespace.

    Returns None when the tag is ``<institution>-<code>-<detail>`` with a
    non-empty alphanumeric detail head, otherwise a short violation string.
    """
    problem = tag_problem(tag)
    if problem:
        return problem
    prefix = f"{institution}-"
    if not tag.startswith(prefix):
        if tag.startswith(f"{code}-") or tag == code:
            return "missing institution"
        return f"institution mismatch: expected {institution!r}"
    rest = tag[len(prefix):]
    if not rest.startswith(f"{code}-"):
        if rest == code:
            return "empty detail"
        return f"code mismatch: expected {code!r}"
    detail = rest[len(code) + 1:]
    if not detail:
        return "empty detail"
    head = detail.split("-", 1)[0]
    if not _ALNUM_RE.match(head):
        return "detail head must be alphanumeric"
    return None


def json_message_problem(record: LogRecord, registry: TagRegistry) -> Optional[str]:
    """Owned tags (PhoneLab/Experiments) must carry a JSON object message."""
    if categorize_tag(record.tag, registry) is TagCategory.OTHER:
        return None
    try:
        value = json.loads(record.message)
    except ValueError:
        return "message is not JSON"
    if not isinstance(value, dict):
        return "message is not a JSON object"
    return None


# --- image versions -------------------------------------------------------

def fingerprint(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class ImageVersion:
    version: int
    fingerprint: str

    def __post_init__(self):
        if self.version < 1:
            raise InvalidArgument("image version must be positive")
        if not _HEX64_RE.match(self.fingerprint):
            raise InvalidArgument("fingerprint must be 64 lowercase hex characters")

    def to_json(self) -> dict:
        return {"version": self.version, "fingerprint": self.fingerprint}

    @classmethod
    def from_json(cls, obj) -> "ImageVersion":
        return cls(int(obj["version"]), str(obj["fingerprint"]))
