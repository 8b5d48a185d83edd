"""Stream compute engine.

A job applies a registered operator to every record of a stream of
indexed files. The stream is cut into contiguous data segments, segments
are scheduled onto per-node processing elements with locality preference,
each element runs the accept / read / apply / write loop, and outputs are
routed back to the data's origin, written locally, or shuffled to a list
of destination nodes by bucket.
"""

from __future__ import annotations

import logging
import math
import threading
import time
import uuid
from collections import defaultdict
from dataclasses import dataclass, field

from .errors import JobError, NotFoundError, SectorError, TransportError
from .fileops import read_records_over
from .records import RecordIndex
from .scheduler import Scheduler, SpeHandle
from .wire import MessageKind

log = logging.getLogger(__name__)

SHUFFLE_BATCH_BYTES = 2 * 1024 * 1024


# ----------------------------------------------------------------- registry

_OPERATORS: dict[str, tuple] = {}
_BUCKET_FNS: dict[str, object] = {}


def register_operator(name: str, fn, scope: str = "record") -> None:
    """Register a user-defined function.

    Record scope: fn(record, params) -> iterable of output records (or one
    record, or None). Segment scope: fn(records, params) -> iterable of
    output records; used for computations that need a whole segment, such
    as a local sort.
    """
    if scope not in ("record", "segment"):
        raise ValueError("operator scope must be 'record' or 'segment'")
    _OPERATORS[name] = (fn, scope)


def register_bucket(name: str, fn) -> None:
    """Register a bucket function fn(record, params) -> non-negative int."""
    _BUCKET_FNS[name] = fn


def get_operator(name: str):
    try:
        return _OPERATORS[name]
    except KeyError:
        raise NotFoundError("operator %r is not registered" % name)


def get_bucket_fn(name: str):
    try:
        return _BUCKET_FNS[name]
    except KeyError:
        raise NotFoundError("bucket function %r is not registered" % name)


def operator_registered(name: str) -> bool:
    return name in _OPERATORS


register_operator("identity", lambda record, params: (record,))
register_operator("one-per-record", lambda record, params: (b"\x01",))


# -------------------------------------------------------------------- types

@dataclass(frozen=True)
class StreamFile:
    name: str
    records: int
    size: int
    locations: tuple[str, ...] = ()
    file_level: bool = False


@dataclass(frozen=True)
class Stream:
    files: tuple[StreamFile, ...]

    @property
    def total_size(self) -> int:
        return sum(f.size for f in self.files)

    @property
    def total_records(self) -> int:
        return sum(f.records for f in self.files)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.files)


@dataclass(frozen=True)
class SegmentLimits:
    s_min: int
    s_max: int

    def __post_init__(self):
        if not (0 < self.s_min <= self.s_max):
            raise ValueError("need 0 < s_min <= s_max, got (%d, %d)"
                             % (self.s_min, self.s_max))


DEFAULT_LIMITS = SegmentLimits(1, 8 * 1024 * 1024)
WHOLE_FILE_LIMITS = SegmentLimits(2 ** 62, 2 ** 62)


@dataclass(frozen=True)
class DataSegment:
    file: str
    offset: int
    rows: int
    params: bytes = b""
    ordinal: int = 0
    locations: tuple[str, ...] = ()
    file_level: bool = False


class OutputMode:
    ORIGIN = "origin"
    LOCAL = "local"
    SHUFFLE = "shuffle"


@dataclass(frozen=True)
class OutputSpec:
    mode: str = OutputMode.LOCAL
    bucket: str | None = None
    destinations: tuple[str, ...] = ()

    def __post_init__(self):
        if self.mode not in (OutputMode.ORIGIN, OutputMode.LOCAL, OutputMode.SHUFFLE):
            raise ValueError("unknown output mode %r" % self.mode)
        if self.mode == OutputMode.SHUFFLE:
            if not self.destinations:
                raise ValueError("shuffle output needs a destination list")
            if not self.bucket:
                raise ValueError("shuffle output needs a bucket function name")

    def to_header(self) -> dict:
        return {"mode": self.mode, "bucket": self.bucket,
                "destinations": list(self.destinations)}

    @classmethod
    def from_header(cls, header: dict) -> "OutputSpec":
        return cls(mode=header["mode"], bucket=header.get("bucket"),
                   destinations=tuple(header.get("destinations") or ()))


def seg_file_name(job: str, ordinal: int) -> str:
    return "%s/seg_%05d.dat" % (job, ordinal)


def bucket_file_name(job: str, bucket: int) -> str:
    return "%s/bucket_%05d.dat" % (job, bucket)


# ------------------------------------------------------------- segmentation

def segment_stream(stream: Stream, n_spe: int, limits: SegmentLimits = DEFAULT_LIMITS,
                   params: bytes = b"") -> list[DataSegment]:
    """Cut a stream into per-file contiguous segments.

    The byte target per segment is S/N clamped into [s_min, s_max]; each
    file is tiled exactly with no overlap, converting the byte target to a
    record count through the file's mean record size. Segments never span
    files; the last segment of a file may be short.
    """
    if n_spe < 1:
        raise ValueError("need at least one processing element")
    if not stream.files:
        raise SectorError("cannot segment an empty stream")
    target = target_segment_bytes(stream.total_size, n_spe, limits)
    segments: list[DataSegment] = []
    ordinal = 0
    for f in stream.files:
        if f.records == 0:
            continue
        if f.file_level:
            rows_per = f.records  # unindexed files are processed whole
        else:
            mean = f.size / f.records if f.records else 1.0
            rows_per = max(1, math.ceil(target / mean)) if mean > 0 else f.records
        for offset in range(0, f.records, rows_per):
            segments.append(DataSegment(
                file=f.name, offset=offset,
                rows=min(rows_per, f.records - offset),
                params=params, ordinal=ordinal,
                locations=tuple(f.locations), file_level=f.file_level))
            ordinal += 1
    return segments


def target_segment_bytes(total_size: int, n_spe: int, limits: SegmentLimits) -> float:
    return min(max(total_size / n_spe, limits.s_min), limits.s_max)


# ------------------------------------------------------------------ shuffle

def shuffle_route(tagged_records, destinations) -> dict[str, list[tuple[int, bytes]]]:
    """Map (bucket, record) pairs to destination nodes: bucket b goes to
    destinations[b mod len(destinations)]."""
    destinations = list(destinations)
    if not destinations:
        raise ValueError("no shuffle destinations")
    batches: dict[str, list[tuple[int, bytes]]] = defaultdict(list)
    for bucket, record in tagged_records:
        batches[destinations[bucket % len(destinations)]].append((bucket, record))
    return dict(batches)


# ------------------------------------------------------------ worker (SPE)

class SpeHost:
    """Per-node execution host: one slot per configured core, each running
    one segment at a time through the four-step loop."""

    def __init__(self, node, slots: int = 1):
        self.node = node
        self.slots = threading.Semaphore(slots)
        self.active: dict[str, set[int]] = defaultdict(set)
        self._lock = threading.Lock()

    def release(self, job: str | None) -> None:
        with self._lock:
            self.active.pop(job, None)

    def run_segment(self, origin: str, header: dict) -> dict:
        job = header["job"]
        segment = DataSegment(
            file=header["file"], offset=header["offset"], rows=header["rows"],
            params=bytes.fromhex(header.get("params", "")),
            ordinal=header["ordinal"],
            locations=tuple(header.get("locations", ())),
            file_level=bool(header.get("file_level")))
        output = OutputSpec.from_header(header["output"])
        client = header.get("client")
        started = time.monotonic()
        with self._lock:
            self.active[job].add(segment.ordinal)
        self.slots.acquire()
        try:
            report = self._execute(job, segment, header["operator"], output, client)
        finally:
            self.slots.release()
            with self._lock:
                self.active.get(job, set()).discard(segment.ordinal)
        report["duration"] = time.monotonic() - started
        report["node"] = self.node.address
        report["ordinal"] = segment.ordinal
        return report

    def _execute(self, job: str, segment: DataSegment, operator_name: str,
                 output: OutputSpec, client: str | None) -> dict:
        node = self.node
        fn, scope = get_operator(operator_name)

        # step 2: read the segment and its record index, locally if held
        if node.holds(segment.file):
            source = node.address
            records, _ = node.read_local(segment.file, segment.offset, segment.rows)
        else:
            candidates = [a for a in segment.locations if a != node.address]
            if not candidates:
                raise NotFoundError("segment file %s has no locations" % segment.file)
            records = None
            source = candidates[0]
            last_error: SectorError | None = None
            for candidate in candidates:
                try:
                    channel = node.transport.open_channel(candidate)
                    records, _ = read_records_over(channel, segment.file,
                                                   segment.offset, segment.rows)
                    source = candidate
                    break
                except (TransportError, NotFoundError) as exc:
                    last_error = exc
            if records is None:
                raise last_error if last_error else NotFoundError(segment.file)

        # step 3: apply the operator into a temporary buffer, acking progress
        buffer: list[bytes] = []
        acks: list[int] = []
        every = max(1, segment.rows // 10)
        try:
            if scope == "segment":
                buffer.extend(_normalize(fn(records, segment.params)))
                self._ack(acks, client, job, segment, len(records))
            else:
                for i, record in enumerate(records, 1):
                    buffer.extend(_normalize(fn(record, segment.params)))
                    if i % every == 0 or i == len(records):
                        self._ack(acks, client, job, segment, i)
        except Exception as exc:
            log.warning("operator %r failed on segment %d of %s: %s",
                        operator_name, segment.ordinal, segment.file, exc)
            return {"status": "failed", "error": str(exc),
                    "rows": segment.rows, "acks": acks, "outputs": []}

        # step 4: final acknowledgment, then write results where they belong
        outputs = self._write_outputs(job, segment, buffer, output, source)
        return {"status": "ok", "rows": segment.rows, "acks": acks,
                "final_ack": segment.rows, "outputs": outputs,
                "produced": len(buffer)}

    def _ack(self, acks: list[int], client: str | None, job: str,
             segment: DataSegment, processed: int) -> None:
        acks.append(processed)
        if client:
            try:
                channel = self.node.transport.open_channel(client)
                channel.send_oneway(MessageKind.PROGRESS,
                                    {"job": job, "ordinal": segment.ordinal,
                                     "processed": processed, "rows": segment.rows,
                                     "node": self.node.address})
            except TransportError:
                pass

    def _write_outputs(self, job: str, segment: DataSegment, buffer: list[bytes],
                       output: OutputSpec, source: str) -> list[dict]:
        node = self.node
        if output.mode == OutputMode.SHUFFLE:
            bucket_fn = get_bucket_fn(output.bucket)
            tagged = [(bucket_fn(record, segment.params), record) for record in buffer]
            self._send_shuffle(job, tagged, output.destinations)
            return []
        if not buffer:
            return []
        target = source if output.mode == OutputMode.ORIGIN else node.address
        name = seg_file_name(job, segment.ordinal)
        data = b"".join(buffer)
        index = RecordIndex.from_sizes(len(r) for r in buffer)
        node.write_output(name, data, index, target=target)
        return [{"name": name, "target": target,
                 "records": len(buffer), "size": len(data)}]

    def _send_shuffle(self, job: str, tagged, destinations) -> None:
        by_bucket: dict[int, list[bytes]] = defaultdict(list)
        for bucket, record in tagged:
            by_bucket[bucket].append(record)
        destinations = list(destinations)
        for bucket in sorted(by_bucket):
            records = by_bucket[bucket]
            start = destinations[bucket % len(destinations)]
            batch: list[bytes] = []
            size = 0
            for record in records:
                batch.append(record)
                size += len(record)
                if size >= SHUFFLE_BATCH_BYTES:
                    self._flush_batch(job, bucket, batch, start, destinations)
                    batch, size = [], 0
            if batch:
                self._flush_batch(job, bucket, batch, start, destinations)

    def _flush_batch(self, job: str, bucket: int, batch: list[bytes],
                     dest: str, destinations: list[str]) -> None:
        header = {"job": job, "bucket": bucket, "sizes": [len(r) for r in batch]}
        body = b"".join(batch)
        order = [dest] + [d for d in destinations if d != dest]
        last: TransportError | None = None
        for candidate in order:
            try:
                channel = self.node.transport.open_channel(candidate)
                channel.call(MessageKind.SHUFFLE_APPEND, header, body)
                if candidate != dest:
                    log.warning("bucket %d redirected from %s to %s",
                                bucket, dest, candidate)
                return
            except TransportError as exc:
                last = exc
        raise last if last is not None else TransportError("no shuffle destination up")


def _normalize(result) -> list[bytes]:
    if result is None:
        return []
    if isinstance(result, (bytes, bytearray)):
        return [bytes(result)]
    return [bytes(r) for r in result]


# --------------------------------------------------------------- job client

@dataclass
class JobReport:
    job_id: str
    segments: list[dict] = field(default_factory=list)
    events: list = field(default_factory=list)
    output_files: list[dict] = field(default_factory=list)
    node_seconds: dict = field(default_factory=dict)
    failed: list[dict] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failed


def run_job(session, stream: Stream, operator_name: str, params: bytes = b"",
            output: OutputSpec = OutputSpec(), limits: SegmentLimits = DEFAULT_LIMITS,
            job_id: str | None = None, spe_per_node: int = 1) -> tuple[Stream, JobReport]:
    """Apply a registered operator to every record of the stream exactly once.

    Returns the output stream (files registered in storage) and the job
    report. Failed segments are retried once on a different node before
    the whole job raises.
    """
    if not operator_registered(operator_name):
        raise JobError("operator %r is not registered" % operator_name)
    if output.mode == OutputMode.SHUFFLE and output.bucket not in _BUCKET_FNS:
        raise JobError("bucket function %r is not registered" % output.bucket)
    job_id = job_id or "job-%s" % uuid.uuid4().hex[:10]
    nodes = session.members()
    spes = [SpeHandle(node=n, slot=slot) for n in nodes for slot in range(spe_per_node)]
    segments = segment_stream(stream, len(spes), limits, params)
    report = JobReport(job_id=job_id)
    started = time.monotonic()

    sched = Scheduler(segments, spes)
    reports_lock = threading.Lock()

    def worker(spe: SpeHandle):
        while True:
            task = sched.next_for(spe)
            if task is None:
                return
            header = {
                "job": job_id, "ordinal": task.segment.ordinal,
                "file": task.segment.file, "offset": task.segment.offset,
                "rows": task.segment.rows, "params": task.segment.params.hex(),
                "locations": list(task.segment.locations),
                "file_level": task.segment.file_level,
                "operator": operator_name, "output": output.to_header(),
                "client": getattr(session, "inbox_address", None),
            }
            try:
                channel = session.transport.open_channel(spe.node)
                result, _ = channel.call(MessageKind.SPE_RUN, header,
                                         timeout=session.job_timeout)
            except Exception as exc:  # a worker must never die mid-job
                result = {"status": "failed", "error": str(exc),
                          "node": spe.node, "ordinal": task.segment.ordinal,
                          "acks": [], "outputs": [], "duration": 0.0}
            with reports_lock:
                result.setdefault("node", spe.node)
                result["attempt"] = task.attempts
                report.segments.append(result)
                report.node_seconds[spe.node] = (
                    report.node_seconds.get(spe.node, 0.0)
                    + float(result.get("duration", 0.0)))
            if result.get("status") == "ok":
                sched.complete(spe, task)
            else:
                sched.fail(spe, task, result.get("error", "segment failed"))

    threads = [threading.Thread(target=worker, args=(spe,), daemon=True) for spe in spes]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    report.events = sched.events
    report.failed = sched.failures
    for node_address in nodes:
        try:
            channel = session.transport.open_channel(node_address)
            channel.call(MessageKind.SPE_RELEASE, {"job": job_id})
        except TransportError:
            pass

    output_files: list[dict] = []
    if output.mode == OutputMode.SHUFFLE:
        # a down destination is fine: its batches were redirected, so its
        # buckets are finalized wherever they landed
        finalize_targets = dict.fromkeys(list(output.destinations) + nodes)
        for dest in finalize_targets:
            try:
                channel = session.transport.open_channel(dest)
                header, _ = channel.call(MessageKind.FINALIZE_JOB, {"job": job_id})
            except TransportError as exc:
                log.warning("cannot finalize %s on %s: %s", job_id, dest, exc)
                continue
            for info in header["files"]:
                output_files.append({**info, "target": dest})
        output_files.sort(key=lambda f: f["bucket"])
    else:
        for seg_report in sorted(report.segments, key=lambda r: r["ordinal"]):
            if seg_report.get("status") == "ok":
                output_files.extend(seg_report["outputs"])
    report.output_files = output_files
    report.elapsed = time.monotonic() - started

    if report.failed:
        raise JobError("job %s failed on %d segment(s): %s"
                       % (job_id, len(report.failed),
                          sorted(f["ordinal"] for f in report.failed)),
                       failed_segments=report.failed)

    out_stream = Stream(files=tuple(
        StreamFile(name=f["name"], records=f["records"], size=f["size"],
                   locations=(f["target"],))
        for f in output_files))
    return out_stream, report
