"""Sorting and tree-split benchmarks.

teragen writes files of 100-byte records with 10-byte keys. terasort is a
two-phase job: a shuffle bucketing records by sampled key ranges across
nodes, then a local sort of each bucket; concatenating buckets in range
order yields a globally key-sorted stream. terasplit scans a sorted,
labeled stream once and picks the key threshold with maximal information
gain.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import math
import random
import struct
from dataclasses import dataclass
from pathlib import Path

from . import sphere
from .records import INDEX_SUFFIX

RECORD_SIZE = 100
KEY_SIZE = 10

_GEN_CHUNK_RECORDS = 65536
_ENTRY = struct.Struct("<QQ")


def teragen(n_records: int, seed: int, destination) -> Path:
    """Write n_records pseudo-random 100-byte records plus the companion
    index; deterministic for a given seed."""
    if n_records < 0:
        raise ValueError("record count must be >= 0")
    path = Path(destination)
    path.parent.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    index_file = path.with_name(path.name + INDEX_SUFFIX)
    with path.open("wb") as data, index_file.open("wb") as idx:
        written = 0
        while written < n_records:
            batch = min(_GEN_CHUNK_RECORDS, n_records - written)
            data.write(rng.randbytes(batch * RECORD_SIZE))
            idx.write(b"".join(
                _ENTRY.pack((written + i) * RECORD_SIZE, RECORD_SIZE)
                for i in range(batch)))
            written += batch
    return path


def record_key(record: bytes) -> bytes:
    return record[:KEY_SIZE]


def record_label(record: bytes) -> int:
    """Records label themselves: the parity of the first payload byte."""
    return record[KEY_SIZE] & 1


# ------------------------------------------------------------------ sorting

_boundary_cache: dict[bytes, list[bytes]] = {}


def _boundaries_from_params(params: bytes) -> list[bytes]:
    cached = _boundary_cache.get(params)
    if cached is None:
        cached = [bytes.fromhex(h) for h in json.loads(params.decode())["boundaries"]]
        _boundary_cache[params] = cached
    return cached


def _key_range_bucket(record: bytes, params: bytes) -> int:
    return bisect.bisect_right(_boundaries_from_params(params), record[:KEY_SIZE])


def _sort_segment(records, params: bytes):
    return sorted(records, key=record_key)


sphere.register_bucket("key-range", _key_range_bucket)
sphere.register_operator("sort-records", _sort_segment, scope="segment")


def sample_boundaries(session, stream: sphere.Stream, parts: int,
                      sample_target: int = 10000) -> list[bytes]:
    """Pick parts-1 range boundaries from key quantiles of a sample.

    The sample is read as up to three contiguous runs per file (head,
    middle, tail) totalling about sample_target records.
    """
    if parts < 1:
        raise ValueError("need at least one partition")
    total = stream.total_records
    if total == 0 or parts == 1:
        return []
    keys: list[bytes] = []
    per_file = max(1, sample_target // max(1, len(stream.files)))
    for f in stream.files:
        if f.records == 0:
            continue
        quota = min(per_file, f.records)
        run = max(1, quota // 3)
        starts = sorted({0, max(0, f.records // 2 - run // 2),
                         max(0, f.records - run)})
        taken = 0
        for start in starts:
            if taken >= quota:
                break
            rows = min(run, f.records - start, quota - taken)
            for record in session.read_records(f.name, start, rows):
                keys.append(record[:KEY_SIZE])
            taken += rows
    keys.sort()
    boundaries = []
    for i in range(1, parts):
        boundaries.append(keys[min(len(keys) - 1, i * len(keys) // parts)])
    return boundaries


def terasort(session, stream, destinations=None, job_id: str | None = None,
             sample_target: int = 10000,
             limits: sphere.SegmentLimits | None = None,
             spe_per_node: int = 1):
    """Sort a stream of fixed-size records by key across the cluster.

    Returns (sorted output stream, {"shuffle": report, "sort": report});
    concatenating the output files in order is globally sorted.
    """
    if not isinstance(stream, sphere.Stream):
        stream = session.resolve_stream(stream)
    destinations = list(destinations or session.members())
    boundaries = sample_boundaries(session, stream, len(destinations),
                                   sample_target=sample_target)
    params = json.dumps({"boundaries": [b.hex() for b in boundaries]}).encode()
    shuffle_spec = sphere.OutputSpec(mode=sphere.OutputMode.SHUFFLE,
                                     bucket="key-range",
                                     destinations=tuple(destinations))
    bucketed, shuffle_report = session.run_job(
        stream, "identity", params=params, output=shuffle_spec,
        limits=limits or sphere.DEFAULT_LIMITS, job_id=job_id,
        spe_per_node=spe_per_node)
    if not bucketed.files:
        return bucketed, {"shuffle": shuffle_report, "sort": None}
    sorted_stream, sort_report = session.run_job(
        bucketed, "sort-records", output=sphere.OutputSpec(sphere.OutputMode.LOCAL),
        limits=sphere.WHOLE_FILE_LIMITS,
        job_id=(job_id + "-sorted") if job_id else None,
        spe_per_node=spe_per_node)
    return sorted_stream, {"shuffle": shuffle_report, "sort": sort_report}


# ------------------------------------------------------------ verification

def multiset_checksum(records) -> tuple[int, int]:
    """Order-independent stream checksum: record count and the sum of
    per-record digests."""
    count = 0
    total = 0
    for record in records:
        count += 1
        total = (total + int.from_bytes(
            hashlib.sha1(record).digest()[:16], "big")) % (1 << 128)
    return count, total


def check_sorted(records) -> bool:
    previous = None
    for record in records:
        key = record[:KEY_SIZE]
        if previous is not None and key < previous:
            return False
        previous = key
    return True


# ------------------------------------------------------------- entropy/split

def entropy(class_counts) -> float:
    """Shannon entropy in bits of a count vector; 0*log(0) = 0."""
    counts = list(class_counts)
    if any(c < 0 for c in counts):
        raise ValueError("class counts must be non-negative")
    total = sum(counts)
    if total == 0:
        raise ValueError("entropy of an empty distribution is undefined")
    h = 0.0
    for c in counts:
        if c:
            p = c / total
            h -= p * math.log2(p)
    return h


def split_gain(parent_entropy: float, left: tuple[int, int],
               right: tuple[int, int]) -> float:
    nl = left[0] + left[1]
    nr = right[0] + right[1]
    n = nl + nr
    return parent_entropy - (nl / n) * entropy(left) - (nr / n) * entropy(right)


def midpoint_key(a: bytes, b: bytes) -> bytes:
    width = max(len(a), len(b))
    mid = (int.from_bytes(a, "big") + int.from_bytes(b, "big")) // 2
    return mid.to_bytes(width, "big")


@dataclass
class SplitResult:
    threshold: bytes | None
    gain: float
    left_counts: tuple[int, int]
    right_counts: tuple[int, int]

    def to_line(self) -> str:
        return json.dumps({
            "threshold": self.threshold.hex() if self.threshold is not None else None,
            "gain": self.gain,
            "left": list(self.left_counts),
            "right": list(self.right_counts),
        })


def terasplit_pairs(pairs) -> SplitResult:
    """Best single entropy split of a key-sorted (key, label) sequence.

    One pass over the records builds per-distinct-key class counts; the
    candidate thresholds are the midpoints between adjacent distinct keys,
    ties broken toward the smallest threshold.
    """
    groups: list[list] = []  # [key, count0, count1]
    previous = None
    for key, label in pairs:
        if previous is not None and key < previous:
            raise ValueError("input is not sorted by key")
        if previous is not None and key == previous:
            groups[-1][1 + label] += 1
        else:
            groups.append([key, 0, 0])
            groups[-1][1 + label] += 1
        previous = key
    if not groups:
        raise ValueError("cannot split an empty stream")
    total0 = sum(g[1] for g in groups)
    total1 = sum(g[2] for g in groups)
    if total0 == 0 or total1 == 0:
        return SplitResult(None, 0.0, (0, 0), (total0, total1))
    parent = entropy((total0, total1))
    best = None
    left0 = left1 = 0
    for i in range(len(groups) - 1):
        left0 += groups[i][1]
        left1 += groups[i][2]
        gain = split_gain(parent, (left0, left1), (total0 - left0, total1 - left1))
        if best is None or gain > best[1]:
            best = (midpoint_key(groups[i][0], groups[i + 1][0]), gain,
                    (left0, left1), (total0 - left0, total1 - left1))
    if best is None:  # single distinct key with mixed labels: nothing to cut
        return SplitResult(None, 0.0, (0, 0), (total0, total1))
    return SplitResult(best[0], max(best[1], 0.0), best[2], best[3])


def terasplit(session, stream) -> SplitResult:
    """Read a sorted stream into the client and compute its best split."""
    names = stream.names if isinstance(stream, sphere.Stream) else list(stream)
    return terasplit_pairs((record[:KEY_SIZE], record_label(record))
                           for record in session.iter_records(names))


def terasplit_local(path) -> SplitResult:
    from .records import read_record_file, slice_records

    data, index = read_record_file(path)
    if index is None:
        raise ValueError("%s has no record index" % path)
    records = slice_records(data, index.entries)
    return terasplit_pairs((r[:KEY_SIZE], record_label(r)) for r in records)
