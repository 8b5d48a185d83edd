"""Storage node daemon.

Each node persists record files with their companion indexes under a
local data directory, answers lookups for names it owns on the ring,
serves record reads and whole-file fetches, gates client uploads by an
address ACL, coordinates replication for owned names, and hosts the
compute workers that execute job segments.
"""

from __future__ import annotations

import logging
import random
import threading
from dataclasses import dataclass
from pathlib import Path

from . import sphere
from .errors import (
    AccessDeniedError,
    IntegrityError,
    NotFoundError,
    RangeError,
    SectorError,
    TransportError,
)
from .fileops import TRANSFER_CHUNK, fetch_file, new_token, push_file, read_records_over
from .records import RecordIndex, index_path
from .routing import RingView
from .transport import Transport, error_reply, reply
from .wire import Message, MessageKind, unpack_payload

log = logging.getLogger(__name__)

DAY_SECONDS = 86400.0


@dataclass
class NodeConfig:
    address: str
    data_dir: str
    acl_writers: frozenset = frozenset()
    replica_target: int = 3
    check_interval: float = DAY_SECONDS
    spe_slots: int = 1
    seed: int | None = None

    def __post_init__(self):
        if self.replica_target < 1:
            raise ValueError("replica target must be >= 1")


@dataclass
class FileMeta:
    records: int
    size: int
    indexed: bool
    origin: str
    index_bytes: int = 0


@dataclass
class _StoreBuffer:
    name: str
    data: bytearray
    index: bytearray | None
    sender: str          # transport origin; what access control judges
    origin: str          # file origin metadata, carried along on replication
    internal: bool
    received: int = 0
    index_received: int = 0


class StorageNode:
    def __init__(self, config: NodeConfig, transport: Transport, ring: RingView):
        self.config = config
        self.transport = transport
        self.ring = ring
        self.address = config.address
        self.data_dir = Path(config.data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, FileMeta] = {}
        self.registry: dict[str, list[str]] = {}
        self._meta_lock = threading.RLock()
        self._name_locks: dict[str, threading.Lock] = {}
        self._stores: dict[str, _StoreBuffer] = {}
        self._shuffle: dict[tuple[str, int], list[tuple[int, int]]] = {}
        self._rng = random.Random(config.seed)
        self.spe_host = sphere.SpeHost(self, slots=config.spe_slots)
        self._stop = threading.Event()
        self._replication_thread = None

    # ------------------------------------------------------------------ setup

    def start(self, replicate_in_background: bool = False) -> None:
        self.transport.listen(self.handle_message)
        if replicate_in_background:
            self._replication_thread = threading.Thread(
                target=self._replication_loop, daemon=True)
            self._replication_thread.start()

    def stop(self) -> None:
        self._stop.set()
        self.transport.close()

    def _replication_loop(self) -> None:
        while not self._stop.wait(self.config.check_interval):
            try:
                self.replicate_check()
            except SectorError as exc:
                log.warning("replication cycle failed: %s", exc)

    # ------------------------------------------------------------ ring epochs

    def prepare_ring(self, ring: RingView) -> None:
        """Phase 1 of a membership change: adopt the epoch, forget registrations."""
        with self._meta_lock:
            self.ring = ring
            self.registry = {}

    def reannounce(self) -> None:
        """Phase 2: re-register local holdings with their (possibly new) owners."""
        with self._meta_lock:
            names = list(self.files)
        for name in names:
            try:
                self._register(name, self.address)
            except TransportError as exc:
                log.warning("could not re-register %s: %s", name, exc)

    # ----------------------------------------------------------------- paths

    def _path_for(self, name: str) -> Path:
        relative = Path(name)
        if relative.is_absolute() or ".." in relative.parts:
            raise IntegrityError("illegal file name %r" % name)
        return self.data_dir / relative

    def _lock_for(self, name: str) -> threading.Lock:
        with self._meta_lock:
            lock = self._name_locks.get(name)
            if lock is None:
                lock = self._name_locks[name] = threading.Lock()
            return lock

    def holds(self, name: str) -> bool:
        with self._meta_lock:
            return name in self.files

    def meta(self, name: str) -> FileMeta:
        with self._meta_lock:
            meta = self.files.get(name)
        if meta is None:
            raise NotFoundError("%s is not stored on %s" % (name, self.address))
        return meta

    # ----------------------------------------------------------------- store

    def store_file(self, sender: str, name: str, data: bytes,
                   index: RecordIndex | None, internal: bool = False,
                   origin: str | None = None) -> FileMeta:
        self._check_write_access(sender, internal)
        if index is not None:
            index.validate(len(data))
        path = self._path_for(name)
        with self._lock_for(name):
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
            if index is not None:
                index_path(path).write_bytes(index.to_bytes())
            meta = FileMeta(
                records=len(index) if index is not None else 1,
                size=len(data),
                indexed=index is not None,
                origin=(origin or sender) if internal else self.address,
                index_bytes=len(index.to_bytes()) if index is not None else 0,
            )
            with self._meta_lock:
                self.files[name] = meta
        self._register(name, self.address)
        return meta

    def _check_write_access(self, origin: str, internal: bool) -> None:
        if internal:
            # over sockets the visible origin is the peer host, without the
            # port, so membership is matched on the host part too
            members = set(self.ring.addresses) | {self.address}
            hosts = {a.rsplit(":", 1)[0] for a in members}
            if origin not in members and origin not in hosts:
                raise AccessDeniedError(
                    "internal store from %s, which is not a ring member" % origin)
            return
        if origin not in self.config.acl_writers:
            raise AccessDeniedError(
                "%s is not in the write ACL of %s" % (origin, self.address))

    def _register(self, name: str, holder: str) -> None:
        owner = self.ring.owner(name)
        if owner.address == self.address:
            self.register_holder(name, holder)
        else:
            channel = self.transport.open_channel(owner.address)
            channel.call(MessageKind.REGISTER, {"name": name, "holder": holder})

    def register_holder(self, name: str, holder: str) -> None:
        with self._meta_lock:
            holders = self.registry.setdefault(name, [])
            if holder not in holders:
                holders.append(holder)

    # ---------------------------------------------------------------- lookup

    def lookup(self, name: str) -> list[str]:
        owner = self.ring.owner(name)
        if owner.address == self.address:
            with self._meta_lock:
                holders = list(self.registry.get(name, ()))
            if not holders:
                raise NotFoundError("no replica of %s is registered" % name)
            return holders
        channel = self.transport.open_channel(owner.address)
        header, _ = channel.call(MessageKind.LOOKUP, {"name": name})
        return header["locations"]

    # ----------------------------------------------------------------- reads

    def read_records(self, name: str, offset: int, rows: int) -> tuple[list[bytes], list]:
        """Read records locally when held, otherwise from a replica holder."""
        if self.holds(name):
            return self.read_local(name, offset, rows)
        last_error: SectorError = NotFoundError("%s has no reachable replica" % name)
        for location in self.lookup(name):
            if location == self.address:
                continue
            try:
                channel = self.transport.open_channel(location)
                return read_records_over(channel, name, offset, rows)
            except (TransportError, NotFoundError) as exc:
                last_error = exc
        raise last_error

    def read_local(self, name: str, offset: int, rows: int,
                    max_bytes: int | None = None) -> tuple[list[bytes], list]:
        meta = self.meta(name)
        path = self._path_for(name)
        if not meta.indexed:
            if offset != 0 or rows != 1:
                raise RangeError("%s has no index; only (0, 1) reads are valid" % name)
            data = path.read_bytes()
            return [data], [(0, len(data))]
        if offset < 0 or rows < 0 or offset + rows > meta.records:
            raise RangeError("record range [%d, %d) outside %s's %d records"
                             % (offset, offset + rows, name, meta.records))
        index = RecordIndex.from_bytes(index_path(path).read_bytes())
        entries = index.slice(offset, rows)
        if max_bytes is not None and entries:
            kept, total = [], 0
            for entry in entries:
                if kept and total + entry[1] > max_bytes:
                    break
                kept.append(entry)
                total += entry[1]
            entries = tuple(kept)
        if not entries:
            return [], []
        first = entries[0][0]
        last = entries[-1][0] + entries[-1][1]
        with path.open("rb") as fh:
            fh.seek(first)
            span = fh.read(last - first)
        recs = [span[o - first:o - first + s] for o, s in entries]
        return recs, list(entries)

    # ------------------------------------------------------------ replication

    def replicate_check(self) -> list[dict]:
        """One maintenance cycle: bring every owned name up to the replica target."""
        target = self.config.replica_target
        with self._meta_lock:
            owned = [(name, list(holders)) for name, holders in self.registry.items()
                     if self.ring.owner(name).address == self.address]
        actions = []
        for name, holders in owned:
            need = target - len(holders)
            if need <= 0:
                continue
            candidates = [a for a in self.ring.addresses if a not in holders]
            if len(candidates) < need:
                log.warning("only %d candidate nodes for %s (need %d more replicas)",
                            len(candidates), name, need)
                actions.append({"name": name, "warning": "insufficient nodes",
                                "available": len(candidates), "needed": need})
            picks = self._rng.sample(candidates, min(need, len(candidates)))
            source = self.address if self.holds(name) else holders[0]
            for dest in picks:
                try:
                    self._replicate_one(name, source, dest)
                except (TransportError, SectorError) as exc:
                    log.warning("replica push %s -> %s failed: %s", name, dest, exc)
                    continue
                self.register_holder(name, dest)
                actions.append({"name": name, "source": source, "dest": dest})
        return actions

    def _replicate_one(self, name: str, source: str, dest: str) -> None:
        if source == self.address:
            self.push_replica(name, dest)
        else:
            channel = self.transport.open_channel(source)
            channel.call(MessageKind.REPLICATE, {"name": name, "dest": dest})

    def push_replica(self, name: str, dest: str) -> None:
        """Copy a local file and its index to another node."""
        meta = self.meta(name)
        path = self._path_for(name)
        data = path.read_bytes()
        index_bytes = index_path(path).read_bytes() if meta.indexed else None
        channel = self.transport.open_channel(dest)
        push_file(channel, name, data, index_bytes, internal=True, origin=meta.origin)

    # ------------------------------------------------------------ job output

    def write_output(self, name: str, data: bytes, index: RecordIndex,
                     target: str | None = None) -> None:
        """Persist a job output file locally or on the target node, registered
        in the ring either way."""
        if target is None or target == self.address:
            self.store_file(self.address, name, data, index, internal=True)
        else:
            channel = self.transport.open_channel(target)
            push_file(channel, name, data, index.to_bytes(), internal=True,
                      origin=self.address)

    def shuffle_append(self, job: str, bucket: int, sizes: list[int], body: bytes) -> None:
        name = sphere.bucket_file_name(job, bucket)
        path = self._path_for(name)
        with self._lock_for(name):
            path.parent.mkdir(parents=True, exist_ok=True)
            with self._meta_lock:
                entries = self._shuffle.setdefault((job, bucket), [])
            with path.open("ab") as fh:
                offset = fh.tell()
                fh.write(body)
            for size in sizes:
                entries.append((offset, size))
                offset += size

    def finalize_job(self, job: str) -> list[dict]:
        with self._meta_lock:
            keys = [key for key in self._shuffle if key[0] == job]
        results = []
        for key in sorted(keys):
            _, bucket = key
            name = sphere.bucket_file_name(job, bucket)
            with self._lock_for(name):
                with self._meta_lock:
                    entries = self._shuffle.pop(key, [])
                index = RecordIndex(entries)
                path = self._path_for(name)
                data_len = path.stat().st_size
                index.validate(data_len)
                index_path(path).write_bytes(index.to_bytes())
                meta = FileMeta(records=len(index), size=data_len, indexed=True,
                                origin=self.address,
                                index_bytes=len(index.to_bytes()))
                with self._meta_lock:
                    self.files[name] = meta
            self._register(name, self.address)
            results.append({"name": name, "bucket": bucket,
                            "records": meta.records, "size": meta.size})
        return results

    # -------------------------------------------------------------- dispatch

    def handle_message(self, origin: str, msg: Message) -> Message:
        try:
            header, body = unpack_payload(msg.payload) if msg.payload else ({}, b"")
            return self._dispatch(origin, msg, header, body)
        except SectorError as exc:
            return error_reply(msg, exc.code, str(exc))
        except Exception as exc:  # defensive: never tear down the daemon
            log.exception("internal error handling kind=%s", msg.kind)
            return error_reply(msg, "internal", str(exc))

    def _dispatch(self, origin: str, msg: Message, header: dict, body: bytes) -> Message:
        kind = msg.kind
        if kind == MessageKind.PING:
            return reply(msg, MessageKind.OK, {"pong": True, "node": self.address})
        if kind == MessageKind.LOOKUP:
            return reply(msg, MessageKind.OK, {"locations": self.lookup(header["name"])})
        if kind == MessageKind.OWNER:
            return reply(msg, MessageKind.OK,
                         {"owner": self.ring.owner(header["name"]).address})
        if kind == MessageKind.MEMBERS:
            return reply(msg, MessageKind.OK, {"addresses": list(self.ring.addresses)})
        if kind == MessageKind.REGISTER:
            self.register_holder(header["name"], header["holder"])
            return reply(msg, MessageKind.OK, {})
        if kind == MessageKind.STAT:
            meta = self.meta(header["name"])
            return reply(msg, MessageKind.OK,
                         {"records": meta.records, "size": meta.size,
                          "indexed": meta.indexed, "index_bytes": meta.index_bytes,
                          "origin": meta.origin})
        if kind == MessageKind.STORE_BEGIN:
            return self._op_store_begin(origin, msg, header)
        if kind == MessageKind.STORE_DATA:
            return self._op_store_chunk(msg, header, body, into_index=False)
        if kind == MessageKind.STORE_INDEX:
            return self._op_store_chunk(msg, header, body, into_index=True)
        if kind == MessageKind.STORE_END:
            return self._op_store_end(msg, header)
        if kind == MessageKind.READ:
            records, entries = self.read_local(header["name"], header["offset"],
                                                header["rows"], max_bytes=TRANSFER_CHUNK)
            return reply(msg, MessageKind.OK,
                         {"entries": entries, "rows": len(entries)}, b"".join(records))
        if kind == MessageKind.FETCH:
            return self._op_fetch(msg, header, index_file=False)
        if kind == MessageKind.FETCH_INDEX:
            return self._op_fetch(msg, header, index_file=True)
        if kind == MessageKind.REPLICATE:
            self.push_replica(header["name"], header["dest"])
            return reply(msg, MessageKind.OK, {})
        if kind == MessageKind.SPE_RUN:
            report = self.spe_host.run_segment(origin, header)
            return reply(msg, MessageKind.OK, report)
        if kind == MessageKind.SPE_RELEASE:
            self.spe_host.release(header.get("job"))
            return reply(msg, MessageKind.OK, {})
        if kind == MessageKind.SHUFFLE_APPEND:
            self.shuffle_append(header["job"], header["bucket"], header["sizes"], body)
            return reply(msg, MessageKind.OK, {})
        if kind == MessageKind.FINALIZE_JOB:
            return reply(msg, MessageKind.OK, {"files": self.finalize_job(header["job"])})
        if kind == MessageKind.RING:
            return self._op_ring(msg, header)
        raise SectorError("unsupported message kind %s" % kind)

    def _op_store_begin(self, origin: str, msg: Message, header: dict) -> Message:
        internal = bool(header.get("internal"))
        self._check_write_access(origin, internal)
        index_size = header["index_size"]
        buffer = _StoreBuffer(
            name=header["name"],
            data=bytearray(header["data_size"]),
            index=bytearray(index_size) if index_size >= 0 else None,
            sender=origin,
            origin=header.get("origin", origin),
            internal=internal,
        )
        token = new_token()
        with self._meta_lock:
            self._stores[token] = buffer
        return reply(msg, MessageKind.OK, {"token": token})

    def _store_buffer(self, token: str) -> _StoreBuffer:
        with self._meta_lock:
            buffer = self._stores.get(token)
        if buffer is None:
            raise SectorError("unknown store token")
        return buffer

    def _op_store_chunk(self, msg: Message, header: dict, body: bytes,
                        into_index: bool) -> Message:
        buffer = self._store_buffer(header["token"])
        offset = header["offset"]
        target = buffer.index if into_index else buffer.data
        if target is None or offset + len(body) > len(target):
            raise IntegrityError("store chunk outside announced size")
        target[offset:offset + len(body)] = body
        if into_index:
            buffer.index_received += len(body)
        else:
            buffer.received += len(body)
        return reply(msg, MessageKind.OK, {})

    def _op_store_end(self, msg: Message, header: dict) -> Message:
        token = header["token"]
        buffer = self._store_buffer(token)
        if buffer.received != len(buffer.data):
            raise IntegrityError("store of %s incomplete: %d of %d data bytes"
                                 % (buffer.name, buffer.received, len(buffer.data)))
        if buffer.index is not None and buffer.index_received != len(buffer.index):
            raise IntegrityError("store of %s incomplete: %d of %d index bytes"
                                 % (buffer.name, buffer.index_received, len(buffer.index)))
        index = RecordIndex.from_bytes(bytes(buffer.index)) if buffer.index is not None else None
        meta = self.store_file(buffer.sender, buffer.name, bytes(buffer.data),
                               index, internal=buffer.internal, origin=buffer.origin)
        with self._meta_lock:
            self._stores.pop(token, None)
        return reply(msg, MessageKind.OK, {"records": meta.records, "size": meta.size})

    def _op_fetch(self, msg: Message, header: dict, index_file: bool) -> Message:
        meta = self.meta(header["name"])
        path = self._path_for(header["name"])
        if index_file:
            if not meta.indexed:
                raise NotFoundError("%s has no index" % header["name"])
            path = index_path(path)
        offset, length = header["offset"], header["length"]
        if length > TRANSFER_CHUNK:
            raise RangeError("fetch of %d bytes exceeds chunk limit" % length)
        with path.open("rb") as fh:
            fh.seek(offset)
            body = fh.read(length)
        if len(body) != length:
            raise RangeError("fetch range beyond end of %s" % header["name"])
        return reply(msg, MessageKind.OK, {}, body)

    def _op_ring(self, msg: Message, header: dict) -> Message:
        phase = header.get("phase", "prepare")
        if phase == "prepare":
            self.prepare_ring(RingView.from_addresses(header["addresses"]))
        elif phase == "announce":
            self.reannounce()
        else:
            raise SectorError("unknown ring phase %r" % phase)
        return reply(msg, MessageKind.OK, {})

    # ------------------------------------------------------------------ misc

    def fetch_whole(self, name: str) -> tuple[bytes, RecordIndex | None]:
        """Fetch a file wherever it lives (local fast path, else a replica)."""
        if self.holds(name):
            meta = self.meta(name)
            path = self._path_for(name)
            data = path.read_bytes()
            index = (RecordIndex.from_bytes(index_path(path).read_bytes())
                     if meta.indexed else None)
            return data, index
        for location in self.lookup(name):
            if location == self.address:
                continue
            try:
                channel = self.transport.open_channel(location)
                data, index_bytes = fetch_file(channel, name)
                index = RecordIndex.from_bytes(index_bytes) if index_bytes is not None else None
                return data, index
            except (TransportError, NotFoundError):
                continue
        raise NotFoundError("%s has no reachable replica" % name)
