"""Flat-file dataset store.

Layout under the store root::

    enrolled.txt                       one device id per line
    heartbeats.jsonl                   append-only heartbeat ledger
    <device_id>/<YYYY-MM-DD>.log[.gz]  stored-record lines, sorted by (timestamp, seq)
    <device_id>/<YYYY-MM-DD>.seq       producer seq of each line, same order

A record's day is the UTC day of its own timestamp, not of its upload.
"""

from __future__ import annotations

import bisect
import datetime as dt
import gzip
import hashlib
import json
import os
import tempfile
import threading
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from ..core import (
    LogRecord,
    StoredRecord,
    TagCategory,
    TagRegistry,
    categorize_tag,
    check_timestamp,
    format_record,
    is_device_id,
    parse_record,
    parse_stored,
    utc_day,
)
from ..errors import (
    InvalidArgument,
    MalformedUploadError,
    ParseError,
    SeqConflictError,
    UnknownDeviceError,
)

EPOCH = dt.date(1970, 1, 1)
GZIP_MAGIC = b"\x1f\x8b"


def day_name(day: int) -> str:
    return (EPOCH + dt.timedelta(days=day)).isoformat()


def day_from_name(name: str) -> int:
    return (dt.date.fromisoformat(name) - EPOCH).days


@dataclass(frozen=True)
class QueryRequest:
    start: int
    end: int
    tags: frozenset = frozenset()
    devices: frozenset = frozenset()
    categories: frozenset = frozenset()

    def __post_init__(self):
        check_timestamp(self.start)
        check_timestamp(self.end)
        if self.start >= self.end:
            raise InvalidArgument(f"empty or inverted time range [{self.start}, {self.end})")
        object.__setattr__(self, "tags", frozenset(self.tags))
        object.__setattr__(self, "devices", frozenset(self.devices))
        object.__setattr__(self, "categories", frozenset(TagCategory(c) for c in self.categories))

    def matches(self, stored: StoredRecord, registry: TagRegistry) -> bool:
        rec = stored.record
        if not self.start <= rec.timestamp < self.end:
            return False
        if self.tags and rec.tag not in self.tags:
            return False
        if self.devices and rec.device not in self.devices:
            return False
        if self.categories and categorize_tag(rec.tag, registry) not in self.categories:
            return False
        return True


@dataclass
class IngestReport:
    accepted: int = 0
    duplicates: int = 0
    malformed: int = 0
    bytes_stored: int = 0

    def to_json(self) -> dict:
        return {
            "accepted": self.accepted,
            "duplicates": self.duplicates,
            "malformed": self.malformed,
            "bytes_stored": self.bytes_stored,
        }


@dataclass(frozen=True)
class _DayFile:
    """Immutable snapshot of one (device, day) file."""

    stat_key: tuple
    timestamps: list
    seqs: list
    tags: list
    lines: list  # stored-record lines without newline


_EMPTY_DAY = _DayFile((), [], [], [], [])


def _fingerprint(record: LogRecord) -> bytes:
    """Secondary dedup check: (timestamp, task_id, tag, SHA-256(message))."""
    h = hashlib.sha256(record.message.encode("utf-8")).digest()
    key = f"{record.timestamp}\t{record.task_id}\t{record.tag}\t".encode("ascii") + h
    return hashlib.blake2b(key, digest_size=8).digest()


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def decode_upload(content: bytes, compressed: bool | None = None) -> list[LogRecord]:
    """Parse a rotated device file; any bad line rejects the whole file."""
    if compressed or (compressed is None and content[:2] == GZIP_MAGIC):
        try:
            content = gzip.decompress(content)
        except (OSError, EOFError) as exc:
            raise MalformedUploadError(f"bad gzip payload: {exc}") from None
    try:
        text = content.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedUploadError(f"upload is not UTF-8: {exc}") from None
    if not text:
        return []
    if not text.endswith("\n"):
        raise MalformedUploadError("upload does not end with a newline", malformed=1)
    lines = text[:-1].split("\n")
    records = []
    bad = []
    for lineno, line in enumerate(lines, 1):
        try:
            records.append(parse_record(line))
        except ParseError as exc:
            bad.append((lineno, exc))
    if bad:
        lineno, exc = bad[0]
        raise MalformedUploadError(
            f"{len(bad)} malformed line(s); first at line {lineno}: {exc}",
            malformed=len(bad),
            records=len(lines),
        )
    return records


class Store:
    def __init__(self, root, compress: bool = False, registry: TagRegistry | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.compress = compress
        self.registry = registry or TagRegistry()
        self._lock = threading.RLock()
        self._cache: dict = {}  # (device, day) -> _DayFile
        self._index: dict = {}  # device -> {seq: fingerprint}
        self._last_first_seq: dict = {}
        self.order_violations = 0
        self.enrolled: set = set()
        self.heartbeats: list = []
        self._hb_fh = None
        self._load()

    # --- bootstrap --------------------------------------------------------

    def _load(self):
        enrolled = self.root / "enrolled.txt"
        if enrolled.exists():
            self.enrolled = {ln for ln in enrolled.read_text().split() if ln}
        hb = self.root / "heartbeats.jsonl"
        if hb.exists():
            with open(hb, encoding="utf-8") as fh:
                self.heartbeats = [json.loads(ln) for ln in fh if ln.strip()]
        for device in self._device_dirs():
            index = self._index.setdefault(device, {})
            for day in self._days(device):
                snap = self._read_day(device, day)
                for i, line in enumerate(snap.lines):
                    stored = parse_stored(line)
                    index[snap.seqs[i]] = _fingerprint(stored.record)

    def _device_dirs(self):
        return sorted(p.name for p in self.root.iterdir() if p.is_dir() and is_device_id(p.name))

    def _days(self, device):
        out = set()
        ddir = self.root / device
        if not ddir.is_dir():
            return []
        for p in ddir.iterdir():
            name = p.name
            if name.endswith(".log") or name.endswith(".log.gz"):
                out.add(day_from_name(name.split(".", 1)[0]))
        return sorted(out)

    def close(self):
        if self._hb_fh is not None:
            self._hb_fh.close()
            self._hb_fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # --- enrollment and heartbeats ---------------------------------------

    def enroll(self, device: str) -> bool:
        if not is_device_id(device):
            raise InvalidArgument("device id must be 64 lowercase hex characters")
        with self._lock:
            if device in self.enrolled:
                return False
            self.enrolled.add(device)
            with open(self.root / "enrolled.txt", "a", encoding="utf-8") as fh:
                fh.write(device + "\n")
            return True

    def record_heartbeat(self, device: str, sent_at: int, received_at: int, payload: dict) -> dict:
        if device not in self.enrolled:
            raise UnknownDeviceError(f"device {device[:12]}… is not enrolled")
        entry = {"device": device, "sent_at": sent_at, "received_at": received_at, "payload": payload}
        with self._lock:
            if self._hb_fh is None:
                self._hb_fh = open(self.root / "heartbeats.jsonl", "a", encoding="utf-8")
            self._hb_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            self._hb_fh.flush()
            self.heartbeats.append(entry)
        return {"ok": True}

    # --- day files --------------------------------------------------------

    def _paths(self, device, day):
        base = self.root / device / day_name(day)
        log = base.with_suffix(".log.gz" if self.compress else ".log")
        return log, base.with_suffix(".seq")

    def _existing_log(self, device, day):
        base = self.root / device / day_name(day)
        for suffix in (".log", ".log.gz"):
            p = base.with_suffix(suffix)
            if p.exists():
                return p
        return None

    def _read_day(self, device, day) -> _DayFile:
        for _ in range(3):
            log = self._existing_log(device, day)
            if log is None:
                return _EMPTY_DAY
            seq_path = log.parent / (day_name(day) + ".seq")
            try:
                st = log.stat()
                stq = seq_path.stat()
            except FileNotFoundError:
                continue
            key = (str(log), st.st_mtime_ns, st.st_size, st.st_ino, stq.st_mtime_ns, stq.st_size)
            cached = self._cache.get((device, day))
            if cached is not None and cached.stat_key == key:
                return cached
            raw = log.read_bytes()
            if log.suffix == ".gz":
                raw = gzip.decompress(raw)
            lines = raw.decode("utf-8").split("\n")[:-1]
            seqs = [int(s) for s in seq_path.read_text().split()]
            if len(seqs) != len(lines):
                continue  # a writer swapped one file but not yet the other
            timestamps = []
            tags = []
            for line in lines:
                _, _, ts, _, _, tag, _ = line.split("\t", 6)
                timestamps.append(int(ts))
                tags.append(tag)
            snap = _DayFile(key, timestamps, seqs, tags, lines)
            self._cache[(device, day)] = snap
            return snap
        raise OSError(f"inconsistent day file for {device}/{day_name(day)}")

    def _write_day(self, device, day, seqs, lines):
        log, seq_path = self._paths(device, day)
        log.parent.mkdir(parents=True, exist_ok=True)
        body = ("\n".join(lines) + "\n").encode("utf-8")
        if self.compress:
            body = gzip.compress(body, mtime=0)
        _atomic_write(seq_path, ("\n".join(map(str, seqs)) + "\n").encode("ascii"))
        _atomic_write(log, body)
        other = log.with_suffix("") if log.suffix == ".gz" else log.with_suffix(".log.gz")
        if other.exists() and other != log:
            other.unlink()

    # --- ingest -----------------------------------------------------------

    def ingest(self, device: str, content: bytes, received_at: int, first_seq: int, compressed=None) -> IngestReport:
        """Store one uploaded rotated file (all-or-nothing).

        Record ``i`` of the file carries producer seq ``first_seq + i``;
        ``(device, seq)`` is the dedup key.
        """
        if device not in self.enrolled:
            raise UnknownDeviceError(f"device {device[:12]}… is not enrolled")
        check_timestamp(received_at)
        if isinstance(first_seq, bool) or not isinstance(first_seq, int) or first_seq < 0:
            raise InvalidArgument("first_seq must be a non-negative integer")
        records = decode_upload(content, compressed)
        report = IngestReport()
        with self._lock:
            index = self._index.setdefault(device, {})
            fresh = []
            for i, rec in enumerate(records):
                seq = first_seq + i
                fp = _fingerprint(rec)
                known = index.get(seq)
                if known is None:
                    fresh.append((seq, rec, fp))
                elif known == fp:
                    report.duplicates += 1
                else:
                    raise SeqConflictError(
                        f"seq {seq} of device {device[:12]}… already stored with different content"
                    )
            if records:
                last = self._last_first_seq.get(device)
                if last is not None and first_seq < last:
                    self.order_violations += 1
                self._last_first_seq[device] = max(first_seq, last or 0)
            by_day: dict = {}
            for seq, rec, fp in fresh:
                by_day.setdefault(utc_day(rec.timestamp), []).append((seq, rec))
            for day in sorted(by_day):
                snap = self._read_day(device, day)
                rows = list(zip(snap.timestamps, snap.seqs, snap.lines))
                for seq, rec in by_day[day]:
                    line = f"{device}\t{received_at}\t{format_record(rec)}"
                    rows.append((rec.timestamp, seq, line))
                    report.bytes_stored += len(line.encode("utf-8")) + 1
                rows.sort(key=lambda r: (r[0], r[1]))
                self._write_day(device, day, [r[1] for r in rows], [r[2] for r in rows])
            for seq, rec, fp in fresh:
                index[seq] = fp
            report.accepted = len(fresh)
        return report

    # --- reads ------------------------------------------------------------

    @property
    def devices(self) -> list[str]:
        return self._device_dirs()

    def record_count(self) -> int:
        return sum(len(idx) for idx in self._index.values())

    def query(self, req: QueryRequest):
        """Yield matching records ordered by (timestamp, device, seq)."""
        devices = sorted(req.devices) if req.devices else self._device_dirs()
        first_day, last_day = utc_day(req.start), utc_day(req.end - 1)
        registry = self.registry
        cat_ok = {}
        hits = []
        for device in devices:
            if not (self.root / device).is_dir():
                continue
            for day in self._days(device):
                if day < first_day or day > last_day:
                    continue
                snap = self._read_day(device, day)
                lo = bisect.bisect_left(snap.timestamps, req.start)
                hi = bisect.bisect_left(snap.timestamps, req.end)
                for i in range(lo, hi):
                    tag = snap.tags[i]
                    if req.tags and tag not in req.tags:
                        continue
                    if req.categories:
                        ok = cat_ok.get(tag)
                        if ok is None:
                            ok = cat_ok[tag] = categorize_tag(tag, registry) in req.categories
                        if not ok:
                            continue
                    hits.append((snap.timestamps[i], device, snap.seqs[i], snap.lines[i]))
        hits.sort(key=lambda h: (h[0], h[1], h[2]))
        for _, _, seq, line in hits:
            yield parse_stored(line, seq)

    def iter_lines(self):
        """Every stored line with its seq, file by file (no global order)."""
        for device in self._device_dirs():
            for day in self._days(device):
                snap = self._read_day(device, day)
                yield from zip(snap.seqs, snap.lines)

    def tag_stats(self) -> dict:
        counts: Counter = Counter()
        for device in self._device_dirs():
            for day in self._days(device):
                counts.update(self._read_day(device, day).tags)
        rows = {c: [0, 0] for c in TagCategory}
        for tag, n in counts.items():
            row = rows[categorize_tag(tag, self.registry)]
            row[0] += 1
            row[1] += n
        return tag_table(rows)


def tag_table(rows: dict) -> dict:
    """Render per-category ``[tag_count, line_count]`` pairs as the overview table."""
    out = [
        {"category": c.value, "tag_count": rows[c][0], "line_count": rows[c][1]} for c in TagCategory
    ]
    total = {
        "tag_count": sum(r["tag_count"] for r in out),
        "line_count": sum(r["line_count"] for r in out),
    }
    return {"rows": out, "total": total}

