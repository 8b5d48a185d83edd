"""Client library.

Access follows the four-step protocol: connect to a known entry server,
resolve replica locations through the server network's routing layer,
open a (cached) data channel to a holder, then transfer. The client also
listens on its own address so workers can stream progress back to it
during jobs.
"""

from __future__ import annotations

import logging
import threading
from pathlib import Path

from . import sphere
from .errors import JobError, NotFoundError, SectorError, TransportError
from .fileops import fetch_file, push_file, read_records_over
from .records import INDEX_SUFFIX, RecordIndex
from .transport import Transport, error_reply, reply
from .wire import Message, MessageKind, unpack_payload

log = logging.getLogger(__name__)


class ClientSession:
    def __init__(self, transport: Transport, entry_server: str,
                 profile=None, job_timeout: float = 600.0, listen: bool = True):
        self.transport = transport
        self.entry_server = entry_server
        self.profile = profile
        self.job_timeout = job_timeout
        self.resolved: dict[str, list[str]] = {}
        self.progress_events: list[dict] = []
        self._lock = threading.Lock()
        self._listening = listen
        if listen:
            transport.listen(self._handle_message)

    @property
    def address(self) -> str:
        return self.transport.address

    @property
    def inbox_address(self) -> str | None:
        """Where workers may send progress messages; None when not listening."""
        return self.transport.address if self._listening else None

    def close(self) -> None:
        self.transport.close()

    def _handle_message(self, origin: str, msg: Message) -> Message:
        if msg.kind == MessageKind.PROGRESS:
            header, _ = unpack_payload(msg.payload)
            with self._lock:
                self.progress_events.append(header)
            return reply(msg, MessageKind.OK, {})
        if msg.kind == MessageKind.PING:
            return reply(msg, MessageKind.OK, {"pong": True})
        return error_reply(msg, "internal", "clients only accept progress messages")

    # ---------------------------------------------------------------- lookup

    def _entry(self):
        return self.transport.open_channel(self.entry_server)

    def locate(self, name: str) -> list[str]:
        """Resolve every node holding a replica, nearest (by rtt) first."""
        with self._lock:
            cached = self.resolved.get(name)
        if cached:
            return list(cached)
        try:
            header, _ = self._entry().call(MessageKind.LOOKUP, {"name": name})
        except NotFoundError:
            with self._lock:
                self.resolved.pop(name, None)
            raise
        locations = header["locations"]
        if self.profile is not None:
            locations.sort(key=lambda a: (self.profile.rtt(self.address, a), a))
        with self._lock:
            self.resolved[name] = list(locations)
        return locations

    def forget(self, name: str) -> None:
        with self._lock:
            self.resolved.pop(name, None)

    def owner_of(self, name: str) -> str:
        header, _ = self._entry().call(MessageKind.OWNER, {"name": name})
        return header["owner"]

    def members(self) -> list[str]:
        header, _ = self._entry().call(MessageKind.MEMBERS, {})
        return header["addresses"]

    # -------------------------------------------------------------- transfer

    def upload(self, source, name: str, index: RecordIndex | None = None) -> list[str]:
        """Store a file (and its index) on the node responsible for the name.

        `source` is a path or a bytes object. When a path is given without
        an explicit index, a sibling .idx file is used if present.
        """
        if isinstance(source, (bytes, bytearray)):
            data = bytes(source)
        else:
            path = Path(source)
            data = path.read_bytes()
            if index is None:
                sibling = path.with_name(path.name + INDEX_SUFFIX)
                if sibling.exists():
                    index = RecordIndex.from_bytes(sibling.read_bytes())
        if index is not None:
            index.validate(len(data))
        target = self.owner_of(name)
        channel = self.transport.open_channel(target)
        push_file(channel, name, data,
                  index.to_bytes() if index is not None else None)
        self.forget(name)
        return [target]

    def download(self, name: str, destination) -> int:
        """Fetch a file (and its index) to a local path; tries each replica
        once, nearest first. A failed download leaves no destination file."""
        destination = Path(destination)
        last_error: SectorError = NotFoundError("%s has no replicas" % name)
        for attempt in range(2):
            try:
                locations = self.locate(name)
            except NotFoundError as exc:
                raise exc
            for location in locations:
                try:
                    channel = self.transport.open_channel(location)
                    data, index_bytes = fetch_file(channel, name)
                except (TransportError, NotFoundError) as exc:
                    last_error = exc
                    self.transport.drop_channel(location)
                    continue
                part = destination.with_name(destination.name + ".part")
                destination.parent.mkdir(parents=True, exist_ok=True)
                part.write_bytes(data)
                part.replace(destination)
                if index_bytes is not None:
                    Path(str(destination) + INDEX_SUFFIX).write_bytes(index_bytes)
                return len(data)
            # every cached location failed: refresh the cache once and retry
            self.forget(name)
        raise last_error

    def stat(self, name: str) -> dict:
        last_error: SectorError = NotFoundError(name)
        for location in self.locate(name):
            try:
                channel = self.transport.open_channel(location)
                header, _ = channel.call(MessageKind.STAT, {"name": name})
                return header
            except (TransportError, NotFoundError) as exc:
                last_error = exc
        raise last_error

    def read_records(self, name: str, offset: int, rows: int) -> list[bytes]:
        last_error: SectorError = NotFoundError(name)
        for location in self.locate(name):
            try:
                channel = self.transport.open_channel(location)
                records, _ = read_records_over(channel, name, offset, rows)
                return records
            except (TransportError, NotFoundError) as exc:
                last_error = exc
        raise last_error

    def iter_records(self, names, batch_rows: int = 65536):
        """Iterate records of the named files in order, batching reads."""
        for name in names:
            info = self.stat(name)
            offset = 0
            while offset < info["records"]:
                rows = min(batch_rows, info["records"] - offset)
                for record in self.read_records(name, offset, rows):
                    yield record
                offset += rows

    # ------------------------------------------------------------------ jobs

    def resolve_stream(self, names) -> sphere.Stream:
        """Build a job input stream from stored file names."""
        files = []
        for name in names:
            locations = self.locate(name)
            info = self.stat(name)
            files.append(sphere.StreamFile(
                name=name, records=info["records"], size=info["size"],
                locations=tuple(locations), file_level=not info["indexed"]))
        return sphere.Stream(files=tuple(files))

    def run_job(self, stream, operator_name: str, params: bytes = b"",
                output: sphere.OutputSpec = sphere.OutputSpec(),
                limits: sphere.SegmentLimits = sphere.DEFAULT_LIMITS,
                job_id: str | None = None, spe_per_node: int = 1):
        if not sphere.operator_registered(operator_name):
            raise JobError("operator %r is not registered" % operator_name)
        if isinstance(stream, (list, tuple)) and stream and isinstance(stream[0], str):
            stream = self.resolve_stream(stream)
        return sphere.run_job(self, stream, operator_name, params=params,
                              output=output, limits=limits, job_id=job_id,
                              spe_per_node=spe_per_node)
