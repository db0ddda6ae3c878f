"""Incremental platform update packages.

A package is an ordered list of ``Copy(base_offset, length)`` and
``Insert(data)`` operations that rebuilds the target image from a base image.
Matching works on fixed 4 KiB chunks: every base chunk is indexed by content,
each target chunk is looked up and consecutive hits are merged into long
copies. Whatever does not match is carried inline as an insert.

Wire format (all integers little-endian)::

    b"OTA1" base_version:u64 target_version:u64
    base_digest:32B target_digest:32B op_count:u64
    ops: 0x01 offset:u64 length:u64 | 0x02 length:u64 data
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from functools import cached_property

from .core import ImageVersion
from .errors import CorruptPackageError, InvalidArgument, WrongBaseError

CHUNK_SIZE = 4096
DEFAULT_HISTORY_DEPTH = 3
MAGIC = b"OTA1"

_OP_COPY = 0x01
_OP_INSERT = 0x02
_HEADER = struct.Struct("<4sQQ32s32sQ")
_U64 = struct.Struct("<Q")
_U64X2 = struct.Struct("<QQ")


@dataclass(frozen=True)
class Image:
    version: int
    data: bytes

    def __post_init__(self):
        if self.version < 1:
            raise InvalidArgument("image version must be positive")

    @cached_property
    def digest(self) -> bytes:
        return hashlib.sha256(self.data).digest()

    @property
    def fingerprint(self) -> str:
        return self.digest.hex()

    @property
    def image_version(self) -> ImageVersion:
        return ImageVersion(self.version, self.fingerprint)

    def __len__(self):
        return len(self.data)


@dataclass(frozen=True)
class Copy:
    offset: int
    length: int


@dataclass(frozen=True)
class Insert:
    data: bytes

    @property
    def length(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class UpdatePackage:
    base_version: int
    target_version: int
    base_digest: bytes
    target_digest: bytes
    ops: tuple

    @property
    def target_size(self) -> int:
        return sum(op.length for op in self.ops)

    @property
    def insert_bytes(self) -> int:
        return sum(len(op.data) for op in self.ops if isinstance(op, Insert))

    @property
    def is_full_image(self) -> bool:
        return all(isinstance(op, Insert) for op in self.ops)

    def to_bytes(self) -> bytes:
        out = [
            _HEADER.pack(
                MAGIC,
                self.base_version,
                self.target_version,
                self.base_digest,
                self.target_digest,
                len(self.ops),
            )
        ]
        for op in self.ops:
            if isinstance(op, Copy):
                out.append(bytes([_OP_COPY]) + _U64X2.pack(op.offset, op.length))
            else:
                out.append(bytes([_OP_INSERT]) + _U64.pack(len(op.data)))
                out.append(op.data)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "UpdatePackage":
        if len(blob) < _HEADER.size:
            raise CorruptPackageError("package shorter than header")
        magic, base_v, target_v, base_d, target_d, count = _HEADER.unpack_from(blob, 0)
        if magic != MAGIC:
            raise CorruptPackageError(f"bad magic {magic!r}")
        pos = _HEADER.size
        ops = []
        mv = memoryview(blob)
        for _ in range(count):
            if pos >= len(blob):
                raise CorruptPackageError("truncated op list")
            tag = blob[pos]
            pos += 1
            if tag == _OP_COPY:
                if pos + 16 > len(blob):
                    raise CorruptPackageError("truncated copy op")
                offset, length = _U64X2.unpack_from(blob, pos)
                pos += 16
                ops.append(Copy(offset, length))
            elif tag == _OP_INSERT:
                if pos + 8 > len(blob):
                    raise CorruptPackageError("truncated insert op")
                (length,) = _U64.unpack_from(blob, pos)
                pos += 8
                if pos + length > len(blob):
                    raise CorruptPackageError("insert data runs past end of package")
                ops.append(Insert(bytes(mv[pos:pos + length])))
                pos += length
            else:
                raise CorruptPackageError(f"unknown op tag 0x{tag:02x}")
        if pos != len(blob):
            raise CorruptPackageError("trailing bytes after last op")
        return cls(base_v, target_v, base_d, target_d, tuple(ops))


def _chunk_index(data: bytes) -> dict:
    index = {}
    for off in range(0, len(data), CHUNK_SIZE):
        index.setdefault(data[off:off + CHUNK_SIZE], off)
    return index


def _diff_ops(base: bytes, target: bytes) -> list:
    index = _chunk_index(base)
    ops = []
    copy_start = copy_len = 0
    pending = []  # insert pieces awaiting a merge

    def flush_copy():
        nonlocal copy_len
        if copy_len:
            ops.append(Copy(copy_start, copy_len))
            copy_len = 0

    def flush_insert():
        if pending:
            ops.append(Insert(b"".join(pending)))
            pending.clear()

    for toff in range(0, len(target), CHUNK_SIZE):
        chunk = target[toff:toff + CHUNK_SIZE]
        n = len(chunk)
        boff = None
        # Prefer continuing the current copy, then the same offset, then any match.
        if copy_len:
            cand = copy_start + copy_len
            if base[cand:cand + n] == chunk:
                boff = cand
        if boff is None and base[toff:toff + n] == chunk:
            boff = toff
        if boff is None:
            boff = index.get(chunk)
        if boff is None:
            flush_copy()
            pending.append(chunk)
            continue
        flush_insert()
        if copy_len and boff == copy_start + copy_len:
            copy_len += n
        else:
            flush_copy()
            copy_start, copy_len = boff, n
    flush_copy()
    flush_insert()
    return ops


def generate(base: Image, target: Image) -> UpdatePackage:
    """Build an incremental package turning ``base`` into ``target``."""
    if base.version >= target.version:
        raise InvalidArgument(
            f"base version {base.version} must be older than target version {target.version}"
        )
    ops = _diff_ops(base.data, target.data)
    return UpdatePackage(base.version, target.version, base.digest, target.digest, tuple(ops))


def full_package(base: Image, target: Image) -> UpdatePackage:
    """Package that carries the whole target image inline."""
    if base.version >= target.version:
        raise InvalidArgument("base version must be older than target version")
    ops = (Insert(target.data),) if target.data else ()
    return UpdatePackage(base.version, target.version, base.digest, target.digest, ops)


def generate_chain(history, target: Image) -> list[UpdatePackage]:
    """One package per historical image, each landing on ``target``."""
    history = list(history)
    versions = [img.version for img in history]
    if any(a >= b for a, b in zip(versions, versions[1:])):
        raise InvalidArgument("history versions must be strictly increasing")
    if versions and versions[-1] >= target.version:
        raise InvalidArgument("history must predate the target version")
    return [generate(img, target) for img in history]


def package_for(base: Image, history, target: Image, depth: int = DEFAULT_HISTORY_DEPTH) -> UpdatePackage:
    """Pick the package a device on ``base`` should download.

    Devices within the last ``depth`` versions get an incremental package;
    older ones get the full image.
    """
    recent = {img.version for img in list(history)[-depth:]} if depth > 0 else set()
    if base.version in recent:
        return generate(base, target)
    return full_package(base, target)


def _structural_problem(pkg: UpdatePackage, base_size: int | None) -> str | None:
    for i, op in enumerate(pkg.ops):
        if isinstance(op, Copy):
            if op.offset < 0 or op.length <= 0:
                return f"op {i}: empty or negative copy"
            if base_size is not None and op.offset + op.length > base_size:
                return f"op {i}: copy [{op.offset}, {op.offset + op.length}) beyond base length {base_size}"
        elif isinstance(op, Insert):
            if not op.data:
                return f"op {i}: empty insert"
        else:
            return f"op {i}: unknown op {op!r}"
    if len(pkg.base_digest) != 32 or len(pkg.target_digest) != 32:
        return "digest fields must be 32 bytes"
    return None


def verify(pkg: UpdatePackage, base_digest, base_size: int | None = None) -> bool:
    """Structural check only. ``apply`` remains the authoritative check,
    since tampered insert bytes are only caught by the target digest."""
    if isinstance(base_digest, str):
        base_digest = bytes.fromhex(base_digest)
    if pkg.base_digest != base_digest:
        return False
    return _structural_problem(pkg, base_size) is None


def apply(pkg: UpdatePackage, base: Image) -> Image:
    """Rebuild the target image. The base is never modified; on error no
    partial image escapes."""
    if base.digest != pkg.base_digest:
        raise WrongBaseError(
            f"package expects base {pkg.base_digest.hex()[:16]}…, got {base.fingerprint[:16]}…"
        )
    problem = _structural_problem(pkg, len(base.data))
    if problem:
        raise CorruptPackageError(problem)
    src = memoryview(base.data)
    out = bytearray()
    for op in pkg.ops:
        if isinstance(op, Copy):
            out += src[op.offset:op.offset + op.length]
        else:
            out += op.data
    data = bytes(out)
    if hashlib.sha256(data).digest() != pkg.target_digest:
        raise CorruptPackageError("result digest does not match target digest")
    return Image(pkg.target_version, data)
