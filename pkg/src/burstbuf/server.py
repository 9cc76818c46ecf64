"""The burst buffer server daemon.

:class:`ServerCore` holds all protocol logic and talks to peers through a
``net`` object (``request`` / ``send`` by address), so the same code runs
over TCP (:class:`Server`) or inside a single-threaded simulation.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from . import flush as fl
from .placement import canonical_path
from .replication import PendingPut, PendingTable, responsible, resync_replicas
from .ring import (DEFAULT_SUCCESSORS, EventKind, IsolatedNode, MembershipEvent, PeerUnreachable, RingNode,
                   RingView, ServerId, view_from_knowledge)
from .store import DEFAULT_MEM_CAPACITY, Entry, StorageExhausted, Store, WriteRecord
from .transport import Listener, PeerPool, Unreachable
from .wire import (FLAG_FORCE, PUT_ACK_BODY, PUT_FLAGS, REPL_ACK_BODY, REPL_PREFIX, U32, Frame, MsgType,
                   pack_json)

log = logging.getLogger(__name__)
events_log = logging.getLogger("burstbuf.events")

SHUFFLE_CLIENT = 0xFFFFFFFF
SHUFFLE_SEQ = (1 << 64) - 1
STAGE_PREFIX = "\x00stage/"
DOMAIN_CHUNK = 4 * 1024 * 1024


@dataclass
class ServerConfig:
    listen_addr: str = "127.0.0.1:0"
    manager_addr: str | None = None
    mem_capacity: int = DEFAULT_MEM_CAPACITY
    spill_dir: str | None = None
    pfs_dir: str | None = None
    replicas: int = 2
    successors: int = DEFAULT_SUCCESSORS
    stabilize_ms: int = 500
    redirect: bool = True
    redirect_cache_s: float = 1.0
    repl_timeout: float = 5.0
    ping_timeout: float | None = None
    miss_limit: int = 3
    retain_epochs: int = 2
    spill_sync: bool = False
    join_after: int | None = None

    def __post_init__(self):
        if self.replicas > self.successors:
            raise ValueError(f"replicas ({self.replicas}) must not exceed successors ({self.successors})")
        if self.replicas < 0 or self.successors < 1:
            raise ValueError("replicas must be >= 0 and successors >= 1")
        for d in (self.spill_dir, self.pfs_dir):
            if d is not None:
                os.makedirs(d, exist_ok=True)
                if not os.access(d, os.W_OK):
                    raise ValueError(f"{d} is not writable")

    @property
    def period(self) -> float:
        return self.stabilize_ms / 1000.0


class ServerCore:
    def __init__(self, config: ServerConfig, net, address: str, name: str | None = None):
        self.config = config
        self.net = net
        self.address = address
        self.store = Store(config.mem_capacity, config.spill_dir, name or address.replace(":", "_"),
                           spill_sync=config.spill_sync)
        self.ring: RingNode | None = None
        self.pending = PendingTable()
        self.tables: dict[str, fl.FlushPlan] = {}
        self.frozen = False
        self.events: list[dict] = []
        self.keep_events = 10000
        self._mem_cache: tuple[float, tuple[ServerId, int]] | None = None
        self._misses: dict[ServerId, int] = {}
        self._resynced_targets: tuple = ()
        self._lock = threading.RLock()
        self.wake = threading.Event()

    # -- identity -------------------------------------------------------------

    @property
    def me(self) -> ServerId | None:
        return self.ring.me if self.ring else None

    @property
    def view(self) -> RingView:
        return self.ring.view

    def resolve(self, ordinal: int) -> ServerId:
        return self.view.directory()[ordinal]

    def emit(self, event: str, **fields):
        rec = {"event": event, "server": self.me.id if self.ring else None, "t": time.time(), **fields}
        self.events.append(rec)
        if len(self.events) > self.keep_events:
            del self.events[: len(self.events) // 2]
        if events_log.isEnabledFor(logging.INFO):
            events_log.info(json.dumps(rec, default=str))

    def install_view(self, view: RingView, report=None):
        self.ring = RingNode(view, self._ring_rpc, report=report, on_change=self._view_changed)
        self.store.set_name(view.self_id.id)
        self._resynced_targets = tuple(view.replica_targets(self.config.replicas))
        self.emit("ring_view", predecessor=view.predecessor.id, successors=[s.id for s in view.successors])

    def _view_changed(self, old: RingView, new: RingView):
        self.emit("ring_view", predecessor=new.predecessor.id, successors=[s.id for s in new.successors],
                  version=new.version)
        self.wake.set()

    # -- ring plumbing --------------------------------------------------------

    def _ring_rpc(self, peer: ServerId, op: str, body: dict) -> dict:
        msg = MsgType.PING if op == "ping" else MsgType.NEIGHBOR_QUERY
        timeout = self.config.ping_timeout or self.config.period
        try:
            resp = self.net.request(peer.address, msg, pack_json(body), timeout=timeout)
        except Unreachable as e:
            if isinstance(e.__cause__, TimeoutError):
                misses = self._misses.get(peer, 0) + 1
                self._misses[peer] = misses
                if misses < self.config.miss_limit:
                    raise _Slow(str(peer)) from e
            self._misses.pop(peer, None)
            raise PeerUnreachable(str(peer)) from e
        self._misses.pop(peer, None)
        return resp.json()

    def stabilize(self):
        if self.ring is None:
            return []
        try:
            evs = self.ring.stabilize()
        except _Slow:
            return []
        except IsolatedNode:
            self.emit("isolated")
            return []
        for ev in evs:
            self.emit("failed", subject=ev.subject.id)
        self.resync()
        return evs

    def resync(self) -> int:
        if self.ring is None:
            return 0
        targets = tuple(self.view.replica_targets(self.config.replicas))
        if targets == self._resynced_targets:
            return 0
        me = self.me.id
        entries = [e for e in self.store.entries() if e.client != SHUFFLE_CLIENT and not e.file_id.startswith(STAGE_PREFIX)]
        shipped = resync_replicas(entries, me, [t.id for t in targets], self._ship_replica)
        complete = all(all(t.id in e.chain for t in targets) for e in entries if e.chain and e.chain[0] == me)
        if complete:
            self._resynced_targets = targets
        if shipped:
            self.emit("resync", shipped=shipped, targets=[t.id for t in targets])
        return shipped

    def _ship_replica(self, entry: Entry, target: int, chain: tuple) -> bool:
        try:
            rec = self._entry_record(entry)
            addr = self.resolve(target).address
            self.net.send(addr, MsgType.REPL_PUT, 0, _repl_payload(chain[0], 1, chain, rec))
            return True
        except (Unreachable, KeyError):
            return False

    def _entry_record(self, entry: Entry) -> WriteRecord:
        payload = self.store.read_entry(entry)
        return WriteRecord(entry.file_id, entry.offset, payload, entry.epoch, entry.seq, entry.client)

    def tick(self):
        """Periodic housekeeping: stabilization, replica timeouts, resync."""
        self.stabilize()
        for put in self.pending.expired():
            self.emit("repl_timeout", seq=put.seq, client=put.client)
            self._error(put.conn, put.seq, "replica-timeout", retryable=True, retry_after=self.config.period)

    # -- dispatch -------------------------------------------------------------

    def handle(self, conn, frame: Frame):
        if self.frozen:
            return
        h = self._handlers.get(frame.msg_type)
        if h is None:
            self._error(conn, frame.seq, f"unexpected {frame.msg_type.name}")
            return
        try:
            h(self, conn, frame)
        except Exception as e:
            log.exception("%s: %s failed", self.address, frame.msg_type.name)
            self._error(conn, frame.seq, str(e))

    def _error(self, conn, seq: int, message: str, retryable: bool = False, retry_after: float = 0.0, kind: str = "error"):
        try:
            conn.send(MsgType.ERROR, seq, pack_json({"error": message, "kind": kind, "retryable": retryable,
                                                     "retry_after": retry_after}))
        except Unreachable:
            pass

    # -- ingest ---------------------------------------------------------------

    def on_put(self, conn, frame: Frame):
        (flags,) = PUT_FLAGS.unpack_from(frame.payload, 0)
        rec, _ = WriteRecord.decode(frame.payload, PUT_FLAGS.size)
        canonical_path(rec.file_id)
        if self.ring is None or self.ring.isolated:
            self._error(conn, frame.seq, "server not serving", retryable=True, retry_after=self.config.period,
                        kind="unavailable")
            return
        if not self.store.fits_memory(rec.size) and self.config.redirect and not flags & FLAG_FORCE:
            target, free = self.query_min_utilization()
            if target != self.me:
                self.emit("redirect", seq=rec.seq, client=rec.client, target=target.id, free=free)
                conn.send(MsgType.REDIRECT, frame.seq, pack_json({"target": target.to_wire(), "free": free}))
                return
        self.replicate_put(rec, conn, frame.seq)

    def replicate_put(self, rec: WriteRecord, conn, seq: int):
        targets = self.view.replica_targets(self.config.replicas)
        chain = (self.me.id, *(t.id for t in targets))
        try:
            self.store.append(rec, chain=chain)
        except StorageExhausted as e:
            self._error(conn, seq, str(e), retryable=True, retry_after=1.0, kind="exhausted")
            return
        if not targets:
            conn.send(MsgType.PUT_ACK, seq, PUT_ACK_BODY.pack(rec.seq))
            return
        put = PendingPut(rec.seq, rec.client, str(rec.key), len(targets), conn,
                         time.monotonic() + self.config.repl_timeout, chain)
        if not self.pending.add(put):
            return
        try:
            self.net.send(targets[0].address, MsgType.REPL_PUT, 0, _repl_payload(chain[0], len(targets), chain, rec))
        except Unreachable:
            self.pending.remove(rec.client, rec.seq)
            self.wake.set()
            self._error(conn, seq, f"successor {targets[0]} unreachable", retryable=True,
                        retry_after=self.config.period, kind="replica-unreachable")

    def on_repl_put(self, conn, frame: Frame):
        primary, hops, n = REPL_PREFIX.unpack_from(frame.payload, 0)
        pos = REPL_PREFIX.size
        chain = tuple(U32.unpack_from(frame.payload, pos + 4 * i)[0] for i in range(n))
        pos += 4 * n
        rec, _ = WriteRecord.decode(frame.payload, pos)
        try:
            self.store.append(rec, chain=chain)
        except StorageExhausted:
            self.emit("replica_dropped", seq=rec.seq, client=rec.client)
            return
        try:
            self.net.send(self.resolve(primary).address, MsgType.REPL_ACK, 0,
                          REPL_ACK_BODY.pack(rec.seq, rec.client, self.me.id))
        except (Unreachable, KeyError):
            pass
        if hops > 1:
            idx = len(chain) - hops
            nxt = self.resolve(chain[idx + 1])
            try:
                self.net.send(nxt.address, MsgType.REPL_PUT, 0, _repl_payload(primary, hops - 1, chain, rec))
            except Unreachable:
                pass

    def on_repl_ack(self, conn, frame: Frame):
        seq, client, acker = REPL_ACK_BODY.unpack(frame.payload)
        put = self.pending.ack(client, seq, acker)
        if put is not None:
            try:
                put.conn.send(MsgType.PUT_ACK, put.seq, PUT_ACK_BODY.pack(put.seq))
            except Unreachable:
                pass

    # -- load balancing -------------------------------------------------------

    def free_bytes(self) -> int:
        return self.store.usage().free_bytes

    def query_min_utilization(self) -> tuple[ServerId, int]:
        now = time.monotonic()
        if self._mem_cache and now - self._mem_cache[0] < self.config.redirect_cache_s:
            return self._mem_cache[1]
        acc = [[self.me.id, self.address, self.free_bytes()]]
        succ = self.view.successors[0]
        if succ != self.me:
            try:
                resp = self.net.request(succ.address, MsgType.MEM_QUERY,
                                        pack_json({"origin": self.me.id, "acc": acc}), timeout=self.config.repl_timeout)
                acc = resp.json()["acc"]
            except Unreachable:
                pass
        best = pick_min_utilization(acc)
        self._mem_cache = (now, best)
        return best

    def on_mem_query(self, conn, frame: Frame):
        body = frame.json()
        acc = body["acc"]
        if any(a[0] == self.me.id for a in acc):
            conn.reply(frame, MsgType.MEM_RESP, pack_json({"acc": acc}))
            return
        acc.append([self.me.id, self.address, self.free_bytes()])
        nxt = self.view.successors[0]
        if nxt.id != body["origin"] and nxt != self.me:
            try:
                resp = self.net.request(nxt.address, MsgType.MEM_QUERY, pack_json({"origin": body["origin"], "acc": acc}),
                                        timeout=self.config.repl_timeout)
                acc = resp.json()["acc"]
            except Unreachable:
                pass
        conn.reply(frame, MsgType.MEM_RESP, pack_json({"acc": acc}))

    # -- membership -----------------------------------------------------------

    def on_ping(self, conn, frame: Frame):
        conn.reply(frame, MsgType.PING_ACK, pack_json({"id": self.me.to_wire() if self.ring else None}))

    def on_neighbor_query(self, conn, frame: Frame):
        if self.ring is None:
            self._error(conn, frame.seq, "no ring yet", retryable=True)
            return
        conn.reply(frame, MsgType.NEIGHBOR_RESP, pack_json(self.ring.handle_neighbors(frame.json())))

    def on_fail_confirm(self, conn, frame: Frame):
        target = ServerId.from_wire(frame.json()["target"])
        timeout = self.config.ping_timeout or self.config.period
        failed = False
        if target != self.me:
            try:
                self.net.request(target.address, MsgType.PING, b"{}", timeout=timeout)
            except Unreachable:
                failed = True
        if failed and self.ring is not None:
            ev = MembershipEvent(EventKind.FAILED, target, self.me, self.view.version + 1)
            self.ring.apply(ev)
            self.ring._report_all([ev])
            self.emit("failure_confirmed", subject=target.id)
            self.wake.set()
        conn.reply(frame, MsgType.FAIL_CONFIRM_RESP, pack_json({"target": target.to_wire(), "failed": failed}))

    def on_ring_update(self, conn, frame: Frame):
        body = frame.json()
        if "self" in body:
            me = ServerId.from_wire(body["self"])
            self.install_view(view_from_knowledge(me, body["knowledge"], int(body.get("k", self.config.successors))),
                              report=getattr(self, "report_failure", None))
        elif self.ring is not None:
            if "knowledge" in body:
                self.ring.merge(body["knowledge"])
            for d in body.get("events", ()):
                self.ring.apply(MembershipEvent.from_wire(d))
        if frame.seq:
            conn.reply(frame, MsgType.RING_UPDATE, pack_json({"ok": True}))

    # -- flush ----------------------------------------------------------------

    def _live(self, body) -> set[int]:
        if "live" in body:
            return set(body["live"])
        return {s.id for s in self.view.members()}

    def _client_entries(self, file_id: str | None = None) -> list[Entry]:
        return [e for e in self.store.entries(file_id) if not e.file_id.startswith(STAGE_PREFIX)]

    def on_flush_cmd(self, conn, frame: Frame):
        body = frame.json()
        phase = body["phase"]
        epoch = int(body["epoch"])
        live = self._live(body)
        me = self.me.id
        if phase == "meta":
            extents: dict[str, list[int]] = {}
            for e in self._client_entries():
                if e.epoch > epoch or not responsible(e.chain, me, live):
                    continue
                cur = extents.setdefault(e.file_id, [0, 0])
                cur[0] = max(cur[0], e.offset + e.length)
                cur[1] = max(cur[1], e.epoch)
            conn.reply(frame, MsgType.SHUFFLE_META, pack_json({"files": extents}))
        elif phase == "shuffle":
            order = tuple(ServerId.from_wire(v) for v in body["order"])
            sent = self._shuffle(epoch, live, order, body["metas"])
            conn.reply(frame, MsgType.FLUSH_DONE, pack_json({"phase": phase, "pieces": sent}))
        elif phase == "write":
            written = self._write_domains(epoch, body.get("pfs_dir") or self.config.pfs_dir)
            conn.reply(frame, MsgType.FLUSH_DONE, pack_json({"phase": phase, "files": written}))
        elif phase == "commit":
            purged = self._commit(epoch)
            conn.reply(frame, MsgType.FLUSH_DONE, pack_json({"phase": phase, "purged": purged}))
        elif phase == "abort":
            self.store.purge(lambda e: e.file_id.startswith(STAGE_PREFIX))
            for f in [f for f, p in self.tables.items() if p.epoch == epoch]:
                del self.tables[f]
            conn.reply(frame, MsgType.FLUSH_DONE, pack_json({"phase": phase}))
        else:
            self._error(conn, frame.seq, f"unknown flush phase {phase!r}")

    def _shuffle(self, epoch: int, live: set[int], order: tuple, metas: dict) -> int:
        me = self.me.id
        plans = {}
        for f, (size, file_epoch) in metas.items():
            plans[f] = fl.build_plan(fl.FileMeta(f, int(size), epoch), order)
        sent = 0
        for f, plan in plans.items():
            for e in self._client_entries(f):
                if e.epoch > epoch or not responsible(e.chain, me, live):
                    continue
                payload = self.store.read_entry(e)
                for i, lo, hi in fl.split_segment(plan, e.offset, e.length):
                    piece = WriteRecord(STAGE_PREFIX + f, lo, payload[lo - e.offset:hi - e.offset],
                                        e.epoch, e.seq, e.client)
                    owner = plan.servers[i]
                    if owner.id == me:
                        self.stage_piece(piece)
                    else:
                        self.net.send(owner.address, MsgType.SHUFFLE_DATA, 0, piece.encode())
                    sent += 1
        for s in order:
            if s.id != me:
                self.net.request(s.address, MsgType.SHUFFLE_META, pack_json({"barrier": epoch}), timeout=300)
        with self._lock:
            self.tables.update(plans)
        return sent

    def stage_piece(self, piece: WriteRecord):
        self.store.append(piece, chain=(self.me.id,))

    def on_shuffle_data(self, conn, frame: Frame):
        rec, _ = WriteRecord.decode(frame.payload)
        self.stage_piece(rec)

    def on_shuffle_meta(self, conn, frame: Frame):
        conn.reply(frame, MsgType.SHUFFLE_META, pack_json({"barrier": frame.json().get("barrier")}))

    def _write_domains(self, epoch: int, pfs_dir: str | None) -> dict[str, int]:
        if pfs_dir is None:
            raise fl.FlushError("no pfs directory configured")
        written = {}
        for f, plan in list(self.tables.items()):
            if plan.epoch != epoch:
                continue
            lo, hi = plan.owned_by(self.me)
            pieces = sorted(self.store.entries(STAGE_PREFIX + f), key=lambda e: e.offset)
            path = os.path.join(pfs_dir, canonical_path(f))
            fl.write_domain(path, plan.global_size, lo, b"")
            chunks = []
            for c in range(lo, hi, DOMAIN_CHUNK):
                c2 = min(c + DOMAIN_CHUNK, hi)
                parts = [(e.offset, self.store.read_entry(e), e.version) for e in pieces
                         if e.offset < c2 and e.offset + e.length > c]
                buf = fl.paint(c, c2, parts)
                fl.write_domain(path, plan.global_size, c, buf)
                chunks.append((c, bytes(buf)))
            for c, data in chunks:
                self.store.append(WriteRecord(f, c, data, epoch, SHUFFLE_SEQ, SHUFFLE_CLIENT), chain=(self.me.id,))
            written[f] = hi - lo
            self.emit("flushed", file=f, epoch=epoch, lo=lo, hi=hi)
        return written

    def _commit(self, epoch: int) -> int:
        keep_from = epoch - self.config.retain_epochs + 1
        flushed = {f for f, p in self.tables.items() if p.epoch == epoch}

        def doomed(e: Entry) -> bool:
            if e.file_id.startswith(STAGE_PREFIX):
                return True
            if e.file_id not in flushed:
                return False
            if e.client == SHUFFLE_CLIENT:
                return e.epoch < keep_from
            return e.epoch <= epoch

        return self.store.purge(doomed)

    # -- restart reads --------------------------------------------------------

    def _local_segments(self, f: str, live: set[int] | None, lo: int, hi: int):
        me = self.me.id
        out = []
        for e in self._client_entries(f):
            if live is not None and not responsible(e.chain, me, live):
                continue
            if e.offset < hi and e.offset + e.length > lo:
                out.append([e.offset, e.length, e.epoch, e.seq, e.client])
        return out

    def on_lookup(self, conn, frame: Frame):
        body = frame.json()
        f = body["file"]
        mode = body.get("mode", "route")
        if mode == "probe":
            client_epochs = [e.epoch for e in self._client_entries(f) if e.client != SHUFFLE_CLIENT]
            plan = self.tables.get(f)
            conn.reply(frame, MsgType.LOOKUP_RESP, pack_json({
                "max_client_epoch": max(client_epochs, default=-1),
                "table": [plan.global_size, plan.epoch, [s.to_wire() for s in plan.servers]] if plan else None,
            }))
            return
        if mode == "segments":
            live = set(body["live"]) if "live" in body else None
            segs = self._local_segments(f, live, int(body["offset"]), int(body["offset"]) + int(body["length"]))
            conn.reply(frame, MsgType.LOOKUP_RESP, pack_json({"segments": segs}))
            return
        try:
            conn.reply(frame, MsgType.LOOKUP_RESP, pack_json(self.route_read(f, int(body["offset"]), int(body["length"]))))
        except fl.LookupError_ as e:
            self._error(conn, frame.seq, str(e), kind="not-found")

    def _ask(self, s: ServerId, body: dict) -> dict | None:
        if s == self.me:
            return self._local_lookup(body)
        try:
            resp = self.net.request(s.address, MsgType.LOOKUP_REQ, pack_json(body), timeout=self.config.repl_timeout)
        except Unreachable:
            return None
        return resp.json() if resp.msg_type is MsgType.LOOKUP_RESP else None

    def _local_lookup(self, body: dict) -> dict:
        out = []

        class _Capture:
            def reply(_, frame, msg_type, payload):
                out.append(json.loads(payload))

            def send(_, msg_type, seq, payload):
                out.append(json.loads(payload))

        self.on_lookup(_Capture(), Frame(MsgType.LOOKUP_REQ, 0, pack_json(body)))
        return out[0]

    def route_read(self, f: str, offset: int, length: int) -> dict:
        """Which servers hold which bytes of ``[offset, offset+length)``."""
        probes = {}
        for s in self.view.members():
            r = self._ask(s, {"file": f, "mode": "probe"})
            if r is not None:
                probes[s] = r
        live = {s.id for s in probes}
        newest_client = max((r["max_client_epoch"] for r in probes.values()), default=-1)
        plan = self.tables.get(f)
        if plan is None:
            for r in probes.values():
                if r["table"] and (plan is None or r["table"][1] > plan.epoch):
                    size, ep, order = r["table"]
                    plan = fl.FlushPlan(f, size, tuple(ServerId.from_wire(v) for v in order), ep)
        if plan is not None and plan.epoch >= newest_client and all(s.id in live for s in plan.servers):
            hi = min(offset + length, plan.global_size)
            owners = fl.lookup_owner({f: plan}, f, offset, max(hi - offset, 0)) if hi > offset else []
            return {"global_size": plan.global_size, "via": "table",
                    "sources": [[s.id, s.address, a, b - a] for s, a, b in owners]}
        segs = []
        size = 0
        for s in probes:
            r = self._ask(s, {"file": f, "mode": "segments", "offset": offset, "length": length, "live": sorted(live)})
            for off, n, epoch, seq, client in (r or {}).get("segments", ()):
                segs.append((s, off, n, (epoch, seq, client)))
                size = max(size, off + n)
        if not segs and plan is None:
            raise fl.LookupError_(f"{f} is not buffered")
        runs = fl.resolve_sources(segs, offset, offset + length)
        return {"global_size": max(size, plan.global_size if plan else 0), "via": "segments",
                "sources": [[s.id, s.address, a, b - a] for s, a, b in runs]}

    def on_get(self, conn, frame: Frame):
        body = frame.json()
        f, lo = body["file"], int(body["offset"])
        hi = lo + int(body["length"])
        parts = [(e.offset, self.store.read_entry(e), e.version) for e in self._client_entries(f)
                 if e.offset < hi and e.offset + e.length > lo]
        if not parts:
            plan = self.tables.get(f)
            if plan is not None and hi <= plan.global_size:
                owners = fl.lookup_owner({f: plan}, f, lo, hi - lo)
                conn.reply(frame, MsgType.LOOKUP_RESP, pack_json({
                    "global_size": plan.global_size, "via": "table",
                    "sources": [[s.id, s.address, a, b - a] for s, a, b in owners]}))
                return
            self._error(conn, frame.seq, f"{f}[{lo}:{hi}] not held here", kind="not-found")
            return
        conn.reply(frame, MsgType.GET_RESP, bytes(fl.paint(lo, hi, parts)))

    _handlers = {
        MsgType.PUT: on_put,
        MsgType.REPL_PUT: on_repl_put,
        MsgType.REPL_ACK: on_repl_ack,
        MsgType.GET: on_get,
        MsgType.MEM_QUERY: on_mem_query,
        MsgType.PING: on_ping,
        MsgType.NEIGHBOR_QUERY: on_neighbor_query,
        MsgType.FAIL_CONFIRM_REQ: on_fail_confirm,
        MsgType.RING_UPDATE: on_ring_update,
        MsgType.FLUSH_CMD: on_flush_cmd,
        MsgType.SHUFFLE_DATA: on_shuffle_data,
        MsgType.SHUFFLE_META: on_shuffle_meta,
        MsgType.LOOKUP_REQ: on_lookup,
    }


class _Slow(Exception):
    """Ping timed out but the miss budget is not spent yet."""


def pick_min_utilization(acc) -> tuple[ServerId, int]:
    """Most free bytes wins; ties go to the lowest ordinal."""
    best = max(acc, key=lambda a: (a[2], -a[0]))
    return ServerId(best[0], best[1]), best[2]


def _repl_payload(primary: int, hops: int, chain: tuple, rec: WriteRecord) -> bytes:
    return (REPL_PREFIX.pack(primary, hops, len(chain)) + b"".join(U32.pack(c) for c in chain) + rec.encode())


_BLOCKING = {MsgType.MEM_QUERY, MsgType.FAIL_CONFIRM_REQ, MsgType.LOOKUP_REQ, MsgType.FLUSH_CMD, MsgType.GET}


class Server:
    """TCP daemon around :class:`ServerCore`."""

    def __init__(self, config: ServerConfig):
        self.config = config
        self.pool = PeerPool(handler=self._handle)
        self.listener = Listener(config.listen_addr, self._handle, name="server")
        self.address = self.listener.address
        self.core = ServerCore(config, self.pool, self.address)
        self.core.report_failure = self._report_failure
        self._workers = ThreadPoolExecutor(max_workers=16, thread_name_prefix="bb-worker")
        self._stop = threading.Event()
        self._driver = threading.Thread(target=self._drive, name=f"stabilize-{self.address}", daemon=True)

    def _handle(self, conn, frame):
        # handlers that wait on other peers run off the reader thread so
        # nested requests along the ring cannot block each other
        if frame.msg_type in _BLOCKING:
            self._workers.submit(self.core.handle, conn, frame)
        else:
            self.core.handle(conn, frame)

    def start(self, register: bool = True):
        self.listener.start()
        if register and self.config.manager_addr:
            self.register()
        self._driver.start()
        return self

    def register(self, timeout: float = 60.0):
        if self.config.join_after is not None:
            body = {"address": self.address, "predecessor": self.config.join_after}
            resp = self.pool.request(self.config.manager_addr, MsgType.JOIN_REQ, pack_json(body), timeout=timeout)
        else:
            body = {"role": "server", "address": self.address}
            resp = self.pool.request(self.config.manager_addr, MsgType.REGISTER, pack_json(body), timeout=timeout)
        if resp.msg_type is MsgType.ERROR:
            raise RuntimeError(resp.json()["error"])
        body = resp.json()
        me = ServerId.from_wire(body["self"])
        self.core.install_view(view_from_knowledge(me, body["knowledge"], int(body.get("k", self.config.successors))),
                               report=self._report_failure)

    def _report_failure(self, ev: MembershipEvent):
        if not self.config.manager_addr:
            return
        self.pool.request(self.config.manager_addr, MsgType.FAIL_REPORT, pack_json({"event": ev.to_wire()}),
                          timeout=self.config.repl_timeout)

    def _drive(self):
        while not self._stop.is_set():
            self.core.wake.wait(self.config.period)
            self.core.wake.clear()
            if self._stop.is_set():
                return
            try:
                self.core.tick()
            except Exception:
                log.exception("%s: stabilization tick failed", self.address)

    def kill(self):
        """Abrupt stop: drop every connection, as if the process died."""
        self.core.frozen = True
        self._stop.set()
        self.core.wake.set()
        self.listener.stop()
        self.pool.close()
        self._workers.shutdown(wait=False, cancel_futures=True)

    def stop(self):
        self.kill()
        self.core.store.close()
