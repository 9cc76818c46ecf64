"""Client library: write / wait / read / flush over the burst buffer.

Writes are pipelined.  Each PUT is sent and a copy kept in the ACK window
until the primary's PUT_ACK arrives; ACKs, redirects and timeouts are handled
by background threads, so ``write`` returns right after the send.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass

from .placement import Placement, RecordKey
from .ring import EventKind, MembershipEvent, ServerId, ServerList
from .store import WriteRecord
from .transport import Connection, PeerPool, Unreachable
from .wire import FLAG_FORCE, PUT_FLAGS, Frame, MsgType, pack_json

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 16
DEFAULT_ACK_TIMEOUT = 5.0
READ_CHUNK = 8 * 1024 * 1024


class ClientError(Exception):
    pass


class SessionClosed(ClientError):
    pass


class NotFoundError(ClientError, KeyError):
    pass


class FatalSessionError(ClientError):
    pass


@dataclass
class PendingWrite:
    record: WriteRecord
    target: ServerId
    sent_at: float
    redirected: bool = False
    force: bool = False


class AckWindow:
    """At most ``capacity`` unacknowledged records; ``add`` blocks when full."""

    def __init__(self, capacity: int = DEFAULT_WINDOW):
        if capacity < 1:
            raise ValueError("window capacity must be >= 1")
        self.capacity = capacity
        self.pending: dict[int, PendingWrite] = {}
        self.high_water = 0
        self._cv = threading.Condition()

    def __len__(self) -> int:
        return len(self.pending)

    def add(self, seq: int, item: PendingWrite, abort: threading.Event | None = None):
        with self._cv:
            while len(self.pending) >= self.capacity:
                if abort is not None and abort.is_set():
                    raise FatalSessionError("session failed")
                self._cv.wait(0.1)
            self.pending[seq] = item
            self.high_water = max(self.high_water, len(self.pending))

    def complete(self, seq: int) -> PendingWrite | None:
        with self._cv:
            item = self.pending.pop(seq, None)
            self._cv.notify_all()
            return item

    def get(self, seq: int) -> PendingWrite | None:
        with self._cv:
            return self.pending.get(seq)

    def items(self) -> list[tuple[int, PendingWrite]]:
        with self._cv:
            return list(self.pending.items())

    def wait_empty(self, abort: threading.Event | None = None, timeout: float | None = None) -> bool:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            while self.pending:
                if abort is not None and abort.is_set():
                    raise FatalSessionError("session failed")
                if deadline is not None and time.monotonic() >= deadline:
                    return False
                self._cv.wait(0.1)
            return True


class Client:
    def __init__(self, manager_addr: str, rank: int = 0, placement: str = "ketama", window: int = DEFAULT_WINDOW,
                 ack_timeout: float = DEFAULT_ACK_TIMEOUT, epoch: int = 0):
        self.manager_addr = manager_addr
        self.rank = rank
        self.strategy = placement
        self.ack_timeout = ack_timeout
        self.epoch = epoch
        self.window = AckWindow(window)
        self.server_list: ServerList | None = None
        self.placement: Placement | None = None
        self.pool = PeerPool(handler=self._on_frame)
        self._mgr: Connection | None = None
        self._seq = 0
        self._lock = threading.RLock()
        self._closed = threading.Event()
        self._fatal = threading.Event()
        self.error: Exception | None = None
        self._detecting: set[ServerId] = set()
        self._monitor = threading.Thread(target=self._watch, name=f"acks-{rank}", daemon=True)
        self.stats = {"redirects": 0, "resends": 0, "failures_reported": 0, "false_alarms": 0}

    # -- session --------------------------------------------------------------

    def open(self, timeout: float = 60.0) -> "Client":
        self._mgr = Connection.connect(self.manager_addr, handler=self._on_manager_frame)
        resp = self._mgr.request(MsgType.REGISTER, pack_json({"role": "client", "rank": self.rank}), timeout=timeout)
        self._apply_server_list(ServerList.from_wire(resp.json()["server_list"]))
        self._monitor.start()
        return self

    def close(self):
        self._closed.set()
        if self._mgr is not None:
            self._mgr.close()
        self.pool.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _check_open(self):
        if self._closed.is_set():
            raise SessionClosed("session is closed")
        if self._fatal.is_set():
            raise FatalSessionError(str(self.error))

    def _apply_server_list(self, sl: ServerList) -> bool:
        with self._lock:
            if self.server_list is not None and sl.version <= self.server_list.version:
                return False
            self.server_list = sl
            self.placement = Placement(self.strategy, list(sl.servers), self.rank)
        log.info("client %d: server list v%d (%d servers)", self.rank, sl.version, len(sl.servers))
        self._relocate()
        return True

    def _on_manager_frame(self, conn, frame: Frame):
        if frame.msg_type is MsgType.RING_UPDATE:
            self._apply_server_list(ServerList.from_wire(frame.json()["server_list"]))

    # -- writes ---------------------------------------------------------------

    def home(self, file_id: str, offset: int) -> ServerId:
        with self._lock:
            return self.placement.locate(RecordKey(file_id, offset))

    def write(self, file_id: str, offset: int, payload: bytes) -> int:
        self._check_open()
        with self._lock:
            self._seq += 1
            seq = self._seq
        rec = WriteRecord(file_id, offset, bytes(payload), self.epoch, seq, self.rank)
        target = self.home(file_id, offset)
        item = PendingWrite(rec, target, time.monotonic())
        self.window.add(seq, item, self._fatal)
        self._send(item)
        return seq

    def _send(self, item: PendingWrite):
        item.sent_at = time.monotonic()
        flags = FLAG_FORCE if item.force else 0
        try:
            self.pool.send(item.target.address, MsgType.PUT, item.record.seq,
                           PUT_FLAGS.pack(flags) + item.record.encode())
        except Unreachable:
            # let the monitor treat it like a timeout right away
            item.sent_at = 0.0

    def wait(self, timeout: float | None = None) -> bool:
        """Block until every outstanding write is acknowledged."""
        if self._closed.is_set():
            raise SessionClosed("session is closed")
        ok = self.window.wait_empty(self._fatal, timeout)
        if self._fatal.is_set():
            raise FatalSessionError(str(self.error))
        return ok

    def _on_frame(self, conn, frame: Frame):
        t = frame.msg_type
        if t is MsgType.PUT_ACK:
            self.window.complete(frame.seq)
        elif t is MsgType.REDIRECT:
            item = self.window.get(frame.seq)
            if item is None:
                return
            self.stats["redirects"] += 1
            if not item.redirected:
                item.redirected = True
                item.target = ServerId.from_wire(frame.json()["target"])
            else:
                item.target = self.home(item.record.file_id, item.record.offset)
                item.force = True
            self._send(item)
        elif t is MsgType.ERROR:
            item = self.window.get(frame.seq)
            if item is None:
                return
            body = frame.json()
            if not body.get("retryable"):
                self._fail(ClientError(f"write {frame.seq} rejected: {body.get('error')}"))
                return
            delay = float(body.get("retry_after", 0.1))
            threading.Timer(delay, self._retry, args=(frame.seq,)).start()

    def _retry(self, seq: int):
        item = self.window.get(seq)
        if item is None or self._closed.is_set():
            return
        item.target = self.home(item.record.file_id, item.record.offset)
        item.redirected = False
        self.stats["resends"] += 1
        self._send(item)

    def _fail(self, err: Exception):
        self.error = err
        self._fatal.set()

    # -- failure handling -----------------------------------------------------

    def _watch(self):
        while not self._closed.is_set():
            time.sleep(min(0.05, self.ack_timeout / 4))
            now = time.monotonic()
            late = {}
            for seq, item in self.window.items():
                if now - item.sent_at >= self.ack_timeout:
                    late.setdefault(item.target, []).append(seq)
            for target in late:
                if target in self._detecting:
                    continue
                self._detecting.add(target)
                threading.Thread(target=self._detect, args=(target,), daemon=True).start()

    def _detect(self, target: ServerId):
        try:
            self.detect_failure(target)
        except FatalSessionError as e:
            self._fail(e)
        except Exception as e:  # keep the session alive; the next timeout retries
            log.warning("client %d: failure detection for %s failed: %s", self.rank, target, e)
        finally:
            self._detecting.discard(target)

    def detect_failure(self, target: ServerId) -> ServerList:
        """Confirm a suspected failure via the target's predecessor and report it."""
        with self._lock:
            sl = self.server_list
        pred = sl.predecessor_of(target)
        confirmed = None
        if pred is not None and pred != target:
            try:
                resp = self.pool.request(pred.address, MsgType.FAIL_CONFIRM_REQ,
                                         pack_json({"target": target.to_wire()}), timeout=self.ack_timeout)
                confirmed = bool(resp.json().get("failed"))
            except Unreachable:
                confirmed = None
        if confirmed is False:
            self.stats["false_alarms"] += 1
            self._resend_to(target)
            return sl
        if target not in sl.servers:
            self._relocate()
            return sl
        ev = MembershipEvent(EventKind.FAILED, target, None, sl.version + 1)
        try:
            resp = self._mgr.request(MsgType.FAIL_REPORT,
                                     pack_json({"event": ev.to_wire(), "verify": confirmed is None}),
                                     timeout=max(self.ack_timeout, 5.0))
        except (Unreachable, TimeoutError, OSError) as e:
            raise FatalSessionError(f"manager unreachable: {e}") from e
        self.stats["failures_reported"] += 1
        new = ServerList.from_wire(resp.json()["server_list"])
        if not self._apply_server_list(new):
            self._relocate()
        return self.server_list

    def _resend_to(self, target: ServerId):
        for seq, item in self.window.items():
            if item.target == target:
                self.stats["resends"] += 1
                self._send(item)

    def _relocate(self):
        """Re-send every pending record whose primary is no longer listed, or that timed out."""
        with self._lock:
            if self.placement is None:
                return
            live = set(self.server_list.servers)
        now = time.monotonic()
        for seq, item in self.window.items():
            if item.target not in live or now - item.sent_at >= self.ack_timeout:
                item.target = self.home(item.record.file_id, item.record.offset)
                item.redirected = False
                item.force = False
                self.stats["resends"] += 1
                self._send(item)

    # -- reads ----------------------------------------------------------------

    def _servers(self) -> list[ServerId]:
        with self._lock:
            return list(self.server_list.servers)

    def read(self, file_id: str, offset: int, length: int) -> bytes:
        self._check_open()
        route = None
        for s in self._servers():
            try:
                resp = self.pool.request(s.address, MsgType.LOOKUP_REQ,
                                         pack_json({"file": file_id, "offset": offset, "length": length}),
                                         timeout=60.0)
            except Unreachable:
                continue
            if resp.msg_type is MsgType.ERROR:
                body = resp.json()
                if body.get("kind") == "not-found":
                    raise NotFoundError(f"{file_id}: {body.get('error')}")
                continue
            route = resp.json()
            break
        if route is None:
            raise ClientError("no server could route the read")
        out = bytearray(length)
        for sid, addr, off, n in route["sources"]:
            out[off - offset:off - offset + n] = self._fetch(ServerId(sid, addr), file_id, off, n)
        return bytes(out)

    def _fetch(self, server: ServerId, file_id: str, offset: int, length: int, hops: int = 2) -> bytes:
        parts = []
        for lo in range(offset, offset + length, READ_CHUNK):
            n = min(READ_CHUNK, offset + length - lo)
            resp = self.pool.request(server.address, MsgType.GET,
                                     pack_json({"file": file_id, "offset": lo, "length": n}), timeout=60.0)
            if resp.msg_type is MsgType.GET_RESP:
                parts.append(resp.payload)
            elif resp.msg_type is MsgType.LOOKUP_RESP and hops > 0:
                buf = bytearray(n)
                for sid, addr, off, m in resp.json()["sources"]:
                    buf[off - lo:off - lo + m] = self._fetch(ServerId(sid, addr), file_id, off, m, hops - 1)
                parts.append(bytes(buf))
            else:
                raise NotFoundError(f"{file_id}[{lo}:{lo + n}] from {server}: {resp.json().get('error')}")
        return b"".join(parts)

    # -- flush ----------------------------------------------------------------

    def flush(self, epoch: int | None = None, pfs_dir: str | None = None, timeout: float = 600.0) -> dict:
        """Ask the manager to drain ``epoch`` (default: this session's) to the backing filesystem."""
        self._check_open()
        epoch = self.epoch if epoch is None else epoch
        body = {"epoch": epoch}
        if pfs_dir is not None:
            body["pfs_dir"] = pfs_dir
        resp = self._mgr.request(MsgType.FLUSH_CMD, pack_json(body), timeout=timeout)
        if resp.msg_type is MsgType.ERROR:
            raise ClientError(resp.json().get("error"))
        if epoch == self.epoch:
            self.epoch += 1
        return resp.json()


def bb_open(manager_addr: str, rank: int = 0, placement: str = "ketama", **kw) -> Client:
    return Client(manager_addr, rank, placement, **kw).open()


def bb_write(session: Client, file_id: str, offset: int, payload: bytes) -> int:
    return session.write(file_id, offset, payload)


def bb_wait(session: Client) -> None:
    session.wait()


def bb_read(session: Client, file_id: str, offset: int, length: int) -> bytes:
    return session.read(file_id, offset, length)


def bb_flush(session: Client, epoch: int | None = None) -> dict:
    return session.flush(epoch)


def bb_close(session: Client) -> None:
    session.close()
