"""Log-structured record store: bounded memory tier plus an append-only spill log."""

from __future__ import annotations

import enum
import errno
import os
import threading
from dataclasses import dataclass

from .placement import RecordKey
from .wire import RECORD_HEADER, pack_record, unpack_record

DEFAULT_MEM_CAPACITY = 1 << 30


class StoreError(Exception):
    pass


class NotFound(StoreError, KeyError):
    pass


class StorageExhausted(StoreError):
    pass


class Tier(enum.Enum):
    MEMORY = "memory"
    SPILL = "spill"


@dataclass(frozen=True)
class StorageLocation:
    tier: Tier
    log_offset: int
    length: int


@dataclass(frozen=True)
class MemBudget:
    capacity_bytes: int
    used_bytes: int

    @property
    def free_bytes(self) -> int:
        return self.capacity_bytes - self.used_bytes


@dataclass(frozen=True)
class WriteRecord:
    file_id: str
    offset: int
    payload: bytes
    epoch: int = 0
    seq: int = 0
    client: int = 0

    @property
    def key(self) -> RecordKey:
        return RecordKey(self.file_id, self.offset)

    @property
    def length(self) -> int:
        return len(self.payload)

    @property
    def end(self) -> int:
        return self.offset + len(self.payload)

    @property
    def size(self) -> int:
        return record_size(self.file_id, len(self.payload))

    @property
    def version(self) -> tuple[int, int, int]:
        # precedence among writes to the same bytes
        return (self.epoch, self.seq, self.client)

    def encode(self) -> bytes:
        return pack_record(self.file_id, self.offset, self.epoch, self.seq, self.client, self.payload)

    @classmethod
    def decode(cls, buf, pos: int = 0) -> tuple["WriteRecord", int]:
        file_id, offset, epoch, seq, client, payload, end = unpack_record(buf, pos)
        return cls(file_id, offset, payload, epoch, seq, client), end


def record_size(file_id: str, payload_len: int) -> int:
    return RECORD_HEADER.size + len(file_id.encode()) + payload_len


@dataclass
class Entry:
    location: StorageLocation
    file_id: str
    offset: int
    length: int
    epoch: int
    seq: int
    client: int
    size: int
    chain: tuple = ()  # holders in replication order; chain[0] is the primary

    @property
    def version(self) -> tuple[int, int, int]:
        return (self.epoch, self.seq, self.client)


@dataclass(frozen=True)
class Segment:
    offset: int
    length: int
    location: StorageLocation
    epoch: int
    seq: int = 0
    client: int = 0

    @property
    def end(self) -> int:
        return self.offset + self.length


class Store:
    """One per server.  Tier is chosen at append time; nothing migrates later."""

    def __init__(self, capacity_bytes: int = DEFAULT_MEM_CAPACITY, spill_dir: str | None = None,
                 server_name: str = "0", spill_limit: int | None = None, spill_sync: bool = False):
        if capacity_bytes < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity_bytes = capacity_bytes
        self.used_bytes = 0
        self.spill_limit = spill_limit
        self.spill_sync = spill_sync
        self._mem: dict[int, bytes] = {}
        self._mem_tail = 0
        self._index: dict[tuple[str, int, int], Entry] = {}
        self._by_file: dict[str, set[tuple[str, int, int]]] = {}
        self._lock = threading.RLock()
        self.spill_dir = spill_dir
        self.spill_path = None
        self._spill_fd = None
        self.spill_len = 0
        self.server_name = str(server_name)
        self.closed = False
        if spill_dir is not None:
            os.makedirs(spill_dir, exist_ok=True)

    def set_name(self, server_name) -> None:
        """Rename the spill file; only possible before anything has spilled."""
        with self._lock:
            if self._spill_fd is None:
                self.server_name = str(server_name)

    def _open_spill(self):
        self.spill_path = os.path.join(self.spill_dir, f"bb_spill_{self.server_name}.log")
        self._spill_fd = os.open(self.spill_path, os.O_RDWR | os.O_CREAT | os.O_TRUNC | os.O_APPEND, 0o644)

    def close(self):
        with self._lock:
            self.closed = True
            if self._spill_fd is not None:
                os.close(self._spill_fd)
                self._spill_fd = None

    # -- write path -----------------------------------------------------------

    def fits_memory(self, nbytes: int) -> bool:
        return self.used_bytes + nbytes <= self.capacity_bytes

    def append(self, record: WriteRecord, chain: tuple = (), allow_spill: bool = True) -> StorageLocation:
        ident = (record.file_id, record.offset, record.epoch)
        size = record.size
        with self._lock:
            old = self._index.get(ident)
            if old is not None:
                if old.version >= record.version:
                    # resend or stale write: keep what we have
                    if old.version == record.version and chain and not old.chain:
                        old.chain = tuple(chain)
                    return old.location
            if self.fits_memory(size):
                loc = StorageLocation(Tier.MEMORY, self._mem_tail, size)
                self._mem[self._mem_tail] = record.encode()
                self._mem_tail += size
                self.used_bytes += size
            elif allow_spill:
                loc = self._spill(record, size)
            else:
                raise StorageExhausted("memory tier full")
            assert self.used_bytes <= self.capacity_bytes
            if old is not None:
                self._release(old)
            entry = Entry(loc, record.file_id, record.offset, record.length, record.epoch,
                          record.seq, record.client, size, tuple(chain))
            self._index[ident] = entry
            self._by_file.setdefault(record.file_id, set()).add(ident)
            return loc

    def _spill(self, record: WriteRecord, size: int) -> StorageLocation:
        if self._spill_fd is None:
            if self.closed:
                raise StoreError("store is closed")
            if self.spill_dir is None:
                raise StorageExhausted("memory tier full and no spill device configured")
            self._open_spill()
        if self.spill_limit is not None and self.spill_len + size > self.spill_limit:
            raise StorageExhausted("spill device full")
        data = record.encode()
        try:
            written = os.write(self._spill_fd, data)
            while written < len(data):
                written += os.write(self._spill_fd, data[written:])
            if self.spill_sync:
                os.fdatasync(self._spill_fd)
        except OSError as e:
            if e.errno in (errno.ENOSPC, errno.EDQUOT):
                raise StorageExhausted(str(e)) from e
            raise
        loc = StorageLocation(Tier.SPILL, self.spill_len, size)
        self.spill_len += size
        return loc

    def _release(self, entry: Entry):
        if entry.location.tier is Tier.MEMORY:
            del self._mem[entry.location.log_offset]
            self.used_bytes -= entry.size

    # -- read path ------------------------------------------------------------

    def _read(self, loc: StorageLocation) -> WriteRecord:
        if loc.tier is Tier.MEMORY:
            raw = self._mem[loc.log_offset]
        else:
            raw = os.pread(self._spill_fd, loc.length, loc.log_offset)
        rec, _ = WriteRecord.decode(raw)
        return rec

    def get(self, key: RecordKey, epoch: int) -> WriteRecord:
        with self._lock:
            entry = self._index.get((key.file_id, key.offset, epoch))
            if entry is None:
                raise NotFound(f"{key} epoch {epoch}")
            return self._read(entry.location)

    def read_entry(self, entry: Entry) -> bytes:
        with self._lock:
            return self._read(entry.location).payload

    def usage(self) -> MemBudget:
        return MemBudget(self.capacity_bytes, self.used_bytes)

    def entries(self, file_id: str | None = None) -> list[Entry]:
        with self._lock:
            if file_id is None:
                return list(self._index.values())
            return [self._index[i] for i in self._by_file.get(file_id, ())]

    def files(self) -> list[str]:
        with self._lock:
            return [f for f, ids in self._by_file.items() if ids]

    def scan_file(self, file_id: str, epoch: int | None = None) -> list[Segment]:
        """Per offset, the newest segment (epochs above ``epoch`` ignored), sorted by offset."""
        best: dict[int, Entry] = {}
        for e in self.entries(file_id):
            if epoch is not None and e.epoch > epoch:
                continue
            cur = best.get(e.offset)
            if cur is None or e.version > cur.version:
                best[e.offset] = e
        return [Segment(e.offset, e.length, e.location, e.epoch, e.seq, e.client)
                for _, e in sorted(best.items())]

    def __len__(self) -> int:
        return len(self._index)

    # -- maintenance ----------------------------------------------------------

    def remove(self, entry: Entry):
        ident = (entry.file_id, entry.offset, entry.epoch)
        with self._lock:
            cur = self._index.get(ident)
            if cur is entry:
                del self._index[ident]
                self._by_file[entry.file_id].discard(ident)
                self._release(entry)

    def purge(self, predicate) -> int:
        with self._lock:
            doomed = [e for e in self._index.values() if predicate(e)]
            for e in doomed:
                self.remove(e)
            return len(doomed)

    def check(self, sample: int | None = None) -> None:
        """fsck-style consistency check; raises AssertionError on violation."""
        with self._lock:
            mem_total = sum(e.size for e in self._index.values() if e.location.tier is Tier.MEMORY)
            assert mem_total == self.used_bytes, (mem_total, self.used_bytes)
            assert self.used_bytes <= self.capacity_bytes
            if self._spill_fd is not None:
                assert os.fstat(self._spill_fd).st_size == self.spill_len
            entries = list(self._index.values())
            if sample is not None:
                entries = entries[:sample]
            for e in entries:
                rec = self._read(e.location)
                assert (rec.file_id, rec.offset, rec.epoch) == (e.file_id, e.offset, e.epoch)
                assert len(rec.payload) == e.length
