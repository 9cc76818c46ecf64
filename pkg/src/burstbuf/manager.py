"""The manager: ring bootstrap, join and failure bookkeeping, client server
lists, and coordination of flush epochs."""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor

from . import flush as fl
from .ring import (DEFAULT_SUCCESSORS, EventKind, MembershipEvent, RingError, ServerId, ServerList, ring_order)
from .transport import Listener, PeerPool, Unreachable
from .wire import Frame, MsgType, pack_json

log = logging.getLogger(__name__)

FLUSH_PHASE_TIMEOUT = 600.0


class FlushFailed(RuntimeError):
    pass


class ManagerCore:
    def __init__(self, net, expected_servers: int | None = None, k: int = DEFAULT_SUCCESSORS,
                 ping_timeout: float = 1.0, flush_attempts: int = 3, retry_delay: float = 0.5, parallel: bool = True):
        self.net = net
        self.expected = expected_servers
        self.k = k
        self.ping_timeout = ping_timeout
        self.flush_attempts = flush_attempts
        self.retry_delay = retry_delay
        self.parallel = parallel
        self.base: tuple[ServerId, ...] = ()
        self.facts: dict = {}
        self.version = 0
        self.formed = threading.Event()
        self._registrations: list = []  # (address, conn, frame)
        self._waiting_clients: list = []
        self.clients: set = set()
        self._next_ordinal = 0
        self._lock = threading.RLock()
        self._flush_lock = threading.Lock()
        self.flush_log: list[dict] = []

    # -- membership -----------------------------------------------------------

    def knowledge(self) -> dict:
        return {"base": [s.to_wire() for s in self.base], "base_version": 0,
                "facts": [e.to_wire() for e in self.facts.values()]}

    def live_servers(self) -> list[ServerId]:
        order, dead = ring_order(self.base, self.facts.values())
        return [s for s in order if s not in dead]

    def server_list(self) -> ServerList:
        return ServerList(self.version, tuple(self.live_servers()))

    def form_ring(self):
        with self._lock:
            if self.formed.is_set():
                return
            if not self._registrations:
                raise RingError("no servers registered before the waiting period expired")
            self.base = tuple(ServerId(i, addr) for i, (addr, _, _) in enumerate(self._registrations))
            self._next_ordinal = len(self.base)
            regs, self._registrations = self._registrations, []
            waiting, self._waiting_clients = self._waiting_clients, []
            self.formed.set()
        know = self.knowledge()
        for s, (_, conn, frame) in zip(self.base, regs):
            body = {"self": s.to_wire(), "knowledge": know, "k": self.k,
                    "server_list": self.server_list().to_wire()}
            conn.reply(frame, MsgType.RING_UPDATE, pack_json(body))
        for conn, frame in waiting:
            self._welcome_client(conn, frame)
        log.info("ring formed with %d servers", len(self.base))

    def _welcome_client(self, conn, frame):
        with self._lock:
            self.clients.add(conn)
        conn.reply(frame, MsgType.RING_UPDATE, pack_json({"server_list": self.server_list().to_wire()}))

    def record(self, event: MembershipEvent) -> bool:
        """Add a fact; returns True if it was new."""
        with self._lock:
            if event.fact in self.facts:
                return False
            if event.kind is EventKind.FAILED and event.subject not in self.live_servers():
                return False
            self.version += 1
            self.facts[event.fact] = MembershipEvent(event.kind, event.subject, event.reporter, self.version,
                                                     event.anchor)
        log.info("membership v%d: %s %s", self.version, event.kind.value, event.subject)
        self.push_clients()
        return True

    def push_clients(self):
        payload = pack_json({"server_list": self.server_list().to_wire()})
        with self._lock:
            clients = list(self.clients)
        for c in clients:
            try:
                c.send(MsgType.RING_UPDATE, 0, payload)
            except Unreachable:
                with self._lock:
                    self.clients.discard(c)

    def _alive(self, s: ServerId) -> bool:
        try:
            self.net.request(s.address, MsgType.PING, b"{}", timeout=self.ping_timeout)
            return True
        except Unreachable:
            return False

    def mark_failed(self, s: ServerId, reporter: ServerId | None = None):
        self.record(MembershipEvent(EventKind.FAILED, s, reporter))

    # -- handlers -------------------------------------------------------------

    def handle(self, conn, frame: Frame):
        try:
            if frame.msg_type is MsgType.REGISTER:
                self.on_register(conn, frame)
            elif frame.msg_type is MsgType.FAIL_REPORT:
                self.on_fail_report(conn, frame)
            elif frame.msg_type is MsgType.JOIN_REQ:
                self.on_join(conn, frame)
            elif frame.msg_type is MsgType.FLUSH_CMD:
                threading.Thread(target=self._flush_thread, args=(conn, frame), daemon=True).start()
            elif frame.msg_type is MsgType.RING_UPDATE:
                conn.reply(frame, MsgType.RING_UPDATE, pack_json({"server_list": self.server_list().to_wire()}))
            elif frame.msg_type is MsgType.PING:
                conn.reply(frame, MsgType.PING_ACK, pack_json({"manager": True}))
            else:
                conn.reply(frame, MsgType.ERROR, pack_json({"error": f"unexpected {frame.msg_type.name}"}))
        except Exception as e:
            log.exception("manager: %s failed", frame.msg_type.name)
            conn.reply(frame, MsgType.ERROR, pack_json({"error": str(e)}))

    def on_register(self, conn, frame: Frame):
        body = frame.json()
        if body.get("role", "server") == "client":
            with self._lock:
                if not self.formed.is_set():
                    self._waiting_clients.append((conn, frame))
                    return
            self._welcome_client(conn, frame)
            return
        with self._lock:
            if self.formed.is_set():
                conn.reply(frame, MsgType.ERROR, pack_json({"error": "ring already formed; use JOIN_REQ"}))
                return
            self._registrations.append((body["address"], conn, frame))
            ready = self.expected is not None and len(self._registrations) >= self.expected
        if ready:
            self.form_ring()

    def on_fail_report(self, conn, frame: Frame):
        body = frame.json()
        ev = MembershipEvent.from_wire(body["event"])
        accepted = False
        if ev.fact not in self.facts:
            # a client's report is double-checked; a server already confirmed by pinging
            if body.get("verify") and self._alive(ev.subject):
                accepted = False
            else:
                accepted = self.record(ev)
        conn.reply(frame, MsgType.RING_UPDATE, pack_json({"server_list": self.server_list().to_wire(),
                                                           "accepted": accepted}))

    def on_join(self, conn, frame: Frame):
        body = frame.json()
        pred_ord = int(body["predecessor"])
        pred = next((s for s in self.live_servers() if s.id == pred_ord), None)
        if pred is None or not self._alive(pred):
            conn.reply(frame, MsgType.ERROR, pack_json({"error": f"predecessor {pred_ord} is not live",
                                                        "kind": "fail-confirm"}))
            return
        with self._lock:
            joiner = ServerId(self._next_ordinal, body["address"])
            self._next_ordinal += 1
        ev = MembershipEvent(EventKind.JOINED, joiner, pred, 0, anchor=pred)
        self.record(ev)
        ev = self.facts[ev.fact]
        self.net.request(pred.address, MsgType.RING_UPDATE, pack_json({"events": [ev.to_wire()]}), timeout=5.0)
        conn.reply(frame, MsgType.RING_UPDATE, pack_json({"self": joiner.to_wire(), "knowledge": self.knowledge(),
                                                          "k": self.k}))

    # -- flush coordination ---------------------------------------------------

    def _flush_thread(self, conn, frame):
        body = frame.json()
        try:
            result = self.flush(int(body["epoch"]), body.get("pfs_dir"))
            conn.reply(frame, MsgType.FLUSH_DONE, pack_json(result))
        except Exception as e:
            log.exception("flush failed")
            conn.reply(frame, MsgType.ERROR, pack_json({"error": str(e), "kind": "flush-failed"}))

    def _phase(self, servers, body_for) -> dict:
        def call(s):
            resp = self.net.request(s.address, MsgType.FLUSH_CMD, pack_json(body_for(s)), timeout=FLUSH_PHASE_TIMEOUT)
            if resp.msg_type is MsgType.ERROR:
                raise FlushFailed(f"{s}: {resp.json().get('error')}")
            return resp.json()

        results, failed = {}, []
        if not self.parallel:
            for s in servers:
                try:
                    results[s] = call(s)
                except Unreachable:
                    failed.append(s)
        else:
            with ThreadPoolExecutor(max_workers=max(len(servers), 1)) as ex:
                futs = {s: ex.submit(call, s) for s in servers}
                for s, fut in futs.items():
                    try:
                        results[s] = fut.result()
                    except Unreachable:
                        failed.append(s)
        if failed:
            raise _PhaseFailure(failed)
        return results

    def flush(self, epoch: int, pfs_dir: str | None = None) -> dict:
        with self._flush_lock:
            last = None
            for attempt in range(self.flush_attempts):
                live = self.live_servers()
                ids = [s.id for s in live]
                t0 = time.monotonic()
                try:
                    metas = self._phase(live, lambda s: {"phase": "meta", "epoch": epoch, "live": ids})
                    merged = fl.merge_extents(
                        {f: tuple(v) for f, v in r["files"].items()} for r in metas.values())
                    wire_metas = {f: [m.global_size, m.epoch] for f, m in merged.items()}
                    order = [s.to_wire() for s in live]
                    self._phase(live, lambda s: {"phase": "shuffle", "epoch": epoch, "live": ids,
                                                 "metas": wire_metas, "order": order})
                    self._phase(live, lambda s: {"phase": "write", "epoch": epoch, "live": ids, "pfs_dir": pfs_dir})
                    self._phase(live, lambda s: {"phase": "commit", "epoch": epoch, "live": ids})
                except _PhaseFailure as e:
                    last = e
                    for s in e.servers:
                        self.mark_failed(s)
                    for s in self.live_servers():
                        try:
                            self.net.request(s.address, MsgType.FLUSH_CMD,
                                             pack_json({"phase": "abort", "epoch": epoch}), timeout=30)
                        except Unreachable:
                            self.mark_failed(s)
                    time.sleep(self.retry_delay)
                    continue
                result = {"epoch": epoch, "servers": ids, "attempts": attempt + 1,
                          "files": {f: m.global_size for f, m in merged.items()},
                          "seconds": time.monotonic() - t0}
                self.flush_log.append(result)
                return result
            raise FlushFailed(f"flush of epoch {epoch} failed after {self.flush_attempts} attempts: {last}")


class _PhaseFailure(Exception):
    def __init__(self, servers):
        super().__init__(", ".join(map(str, servers)))
        self.servers = servers


class Manager:
    """TCP front end for :class:`ManagerCore`."""

    def __init__(self, addr: str = "127.0.0.1:0", expected_servers: int | None = None, wait_ms: int = 3000,
                 k: int = DEFAULT_SUCCESSORS, ping_timeout: float = 1.0):
        self.pool = PeerPool()
        self.core = ManagerCore(self.pool, expected_servers, k, ping_timeout)
        self.listener = Listener(addr, self.core.handle, name="manager")
        self.address = self.listener.address
        self.wait_ms = wait_ms
        self._timer = None

    def start(self):
        self.listener.start()
        self._timer = threading.Timer(self.wait_ms / 1000.0, self._deadline)
        self._timer.daemon = True
        self._timer.start()
        return self

    def _deadline(self):
        try:
            self.core.form_ring()
        except RingError as e:
            log.error("%s", e)

    def stop(self):
        if self._timer:
            self._timer.cancel()
        self.listener.stop()
        self.pool.close()
