"""Record files and their companion indexes.

A stored file is an opaque byte blob plus an index listing the (offset,
size) of every record, kept in a sibling file with an ".idx" suffix.
Index entries are 16 bytes each: offset and size as little-endian u64.
"""

from __future__ import annotations

import struct
from pathlib import Path

from .errors import IntegrityError, RangeError

INDEX_SUFFIX = ".idx"
_ENTRY = struct.Struct("<QQ")


class RecordIndex:
    def __init__(self, entries):
        self.entries: tuple[tuple[int, int], ...] = tuple((int(o), int(s)) for o, s in entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, RecordIndex) and self.entries == other.entries

    def __repr__(self) -> str:
        return "RecordIndex(%d records)" % len(self.entries)

    @classmethod
    def uniform(cls, count: int, record_size: int) -> "RecordIndex":
        return cls((i * record_size, record_size) for i in range(count))

    @classmethod
    def from_sizes(cls, sizes) -> "RecordIndex":
        entries = []
        offset = 0
        for size in sizes:
            entries.append((offset, size))
            offset += size
        return cls(entries)

    def validate(self, data_length: int) -> None:
        """Entries must be in-bounds, strictly increasing, non-overlapping."""
        previous_end = 0
        for i, (offset, size) in enumerate(self.entries):
            if offset < 0 or size < 0:
                raise IntegrityError("index entry %d is negative" % i)
            if offset < previous_end:
                raise IntegrityError(
                    "index entry %d at offset %d overlaps the previous record" % (i, offset))
            if offset + size > data_length:
                raise IntegrityError(
                    "index entry %d (offset %d, size %d) overruns file length %d"
                    % (i, offset, size, data_length))
            previous_end = offset + size

    def slice(self, start: int, rows: int) -> tuple[tuple[int, int], ...]:
        if start < 0 or rows < 0 or start + rows > len(self.entries):
            raise RangeError(
                "record range [%d, %d) outside 0..%d" % (start, start + rows, len(self.entries)))
        return self.entries[start:start + rows]

    def to_bytes(self) -> bytes:
        return b"".join(_ENTRY.pack(o, s) for o, s in self.entries)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RecordIndex":
        if len(blob) % _ENTRY.size:
            raise IntegrityError("index blob length %d is not a multiple of %d"
                                 % (len(blob), _ENTRY.size))
        return cls(_ENTRY.iter_unpack(blob))


def index_path(data_path) -> Path:
    path = Path(data_path)
    return path.with_name(path.name + INDEX_SUFFIX)


def write_record_file(path, data: bytes, index: RecordIndex | None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    if index is not None:
        index.validate(len(data))
        index_path(path).write_bytes(index.to_bytes())


def read_record_file(path) -> tuple[bytes, RecordIndex | None]:
    path = Path(path)
    data = path.read_bytes()
    idx = index_path(path)
    index = RecordIndex.from_bytes(idx.read_bytes()) if idx.exists() else None
    if index is not None:
        index.validate(len(data))
    return data, index


def slice_records(data: bytes, entries) -> list[bytes]:
    return [data[offset:offset + size] for offset, size in entries]
