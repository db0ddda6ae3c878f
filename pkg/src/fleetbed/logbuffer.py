"""Device-side ring buffer and log file rotation.

Records enter a bounded FIFO. When a new record does not fit, whole records
are evicted oldest-first and counted as drops. ``drain`` removes the oldest
prefix that fits a byte budget and renders it as a rotated device file.
"""

from __future__ import annotations

import enum
import gzip
from collections import deque
from dataclasses import dataclass

from .core import LogRecord, encoded_size, format_record, make_record, parse_record
from .errors import InvalidArgument

DEFAULT_CAPACITY_BYTES = 16 * 1024 * 1024
DEFAULT_MAX_LINE_BYTES = 8 * 1024
TRUNCATION_MARKER = "…"

KERNEL_TAG = "Kernel"
KTRACE_TAG = "Kernel-Trace"


class Source(str, enum.Enum):
    APP = "app"
    FRAMEWORK = "framework"
    KERNEL = "kernel"
    KTRACE = "ktrace"


@dataclass(frozen=True)
class AppendResult:
    seq: int | None
    truncated: bool = False
    rejected: bool = False


@dataclass(frozen=True)
class RotatedFile:
    filename: str
    content: bytes
    first_seq: int | None
    last_seq: int | None
    record_count: int
    first_timestamp: int | None = None

    def payload(self, compress: bool = False) -> bytes:
        if compress:
            return gzip.compress(self.content, mtime=0)
        return self.content

    def records(self) -> list[LogRecord]:
        text = self.content.decode("utf-8")
        return [parse_record(line) for line in text.split("\n")[:-1]]


def rotated_filename(first_seq: int | None) -> str:
    return f"log-{first_seq if first_seq is not None else 0:012d}.txt"


def truncate_message(message: str, max_line_bytes: int) -> tuple[str, bool]:
    """Cut ``message`` to ``max_line_bytes - 1`` UTF-8 bytes plus a marker.

    The cut never splits a multi-byte character, so the kept prefix can be a
    few bytes shorter than the limit.
    """
    raw = message.encode("utf-8")
    if len(raw) <= max_line_bytes:
        return message, False
    keep = raw[: max_line_bytes - 1].decode("utf-8", errors="ignore")
    return keep + TRUNCATION_MARKER, True


class RingBuffer:
    def __init__(self, capacity_bytes=DEFAULT_CAPACITY_BYTES, max_line_bytes=DEFAULT_MAX_LINE_BYTES):
        if capacity_bytes <= 0 or max_line_bytes <= 1:
            raise InvalidArgument("capacity_bytes and max_line_bytes must be positive")
        self.capacity_bytes = capacity_bytes
        self.max_line_bytes = max_line_bytes
        self.entries: deque = deque()  # (seq, record, size)
        self.next_seq = 1
        self.used_bytes = 0
        self.appended = 0
        self.drained = 0
        self.dropped_count = 0
        self.dropped_bytes = 0
        self.rejected_count = 0
        self.truncated_count = 0

    def __len__(self):
        return len(self.entries)

    @property
    def oldest_timestamp(self) -> int | None:
        return self.entries[0][1].timestamp if self.entries else None

    def append(self, source, timestamp, task_id, level, tag, message) -> AppendResult:
        source = Source(source)
        if source is Source.KERNEL:
            tag = KERNEL_TAG
        elif source is Source.KTRACE:
            tag = KTRACE_TAG
        message, truncated = truncate_message(message, self.max_line_bytes)
        record = make_record(timestamp, task_id, level, tag, message)
        return self.append_record(record, truncated)

    def append_record(self, record: LogRecord, truncated: bool = False) -> AppendResult:
        """Append an already-validated record; the fast path for simulators."""
        self.appended += 1
        size = encoded_size(record)
        if size > self.capacity_bytes:
            self.dropped_count += 1
            self.dropped_bytes += size
            self.rejected_count += 1
            return AppendResult(None, truncated, rejected=True)
        entries = self.entries
        while self.used_bytes + size > self.capacity_bytes:
            _, _, old_size = entries.popleft()
            self.used_bytes -= old_size
            self.dropped_count += 1
            self.dropped_bytes += old_size
        seq = self.next_seq
        self.next_seq += 1
        entries.append((seq, record, size))
        self.used_bytes += size
        if truncated:
            self.truncated_count += 1
        return AppendResult(seq, truncated)

    def drain(self, max_bytes: int) -> RotatedFile:
        if max_bytes <= 0:
            raise InvalidArgument("max_bytes must be positive")
        entries = self.entries
        lines = []
        total = 0
        first_seq = last_seq = first_ts = None
        while entries and total + entries[0][2] <= max_bytes:
            seq, record, size = entries.popleft()
            if first_seq is None:
                first_seq = seq
                first_ts = record.timestamp
            last_seq = seq
            total += size
            lines.append(format_record(record))
        self.used_bytes -= total
        self.drained += len(lines)
        content = ("\n".join(lines) + "\n").encode("utf-8") if lines else b""
        return RotatedFile(rotated_filename(first_seq), content, first_seq, last_seq, len(lines), first_ts)
