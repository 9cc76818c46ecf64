"""Deterministic single-threaded network for driving :class:`ServerCore`
instances without sockets.

Requests are delivered synchronously; one-way sends are queued and delivered
in FIFO order by :meth:`SimNetwork.pump`.  Nothing here uses threads or the
wall clock, so a run is a pure function of its inputs.
"""

from __future__ import annotations

import os
from collections import deque

from .placement import Placement, RecordKey
from .ring import ServerId, init_ring
from .server import ServerConfig, ServerCore
from .store import WriteRecord
from .transport import Unreachable
from .wire import FLAG_FORCE, PUT_FLAGS, Frame, MsgType, pack_json


class _Endpoint:
    """What a handler sees as ``conn``: replies go back to the caller."""

    def __init__(self, net: "SimNetwork", owner: str | None):
        self.net = net
        self.owner = owner
        self.replies: list[Frame] = []

    def send(self, msg_type, seq, payload=b""):
        frame = Frame(MsgType(msg_type), seq, bytes(payload))
        if self.owner is None or self.owner not in self.net.nodes:
            self.replies.append(frame)
        else:
            self.net.queue.append((self.owner, None, frame))

    def reply(self, request: Frame, msg_type, payload=b""):
        self.send(msg_type, request.seq, payload)


class SimNetwork:
    def __init__(self):
        self.nodes: dict[str, ServerCore] = {}
        self.dead: set[str] = set()
        self.queue: deque = deque()
        self.delivered = 0

    def node(self, address: str) -> "_NodeNet":
        return _NodeNet(self, address)

    def _target(self, addr: str) -> ServerCore:
        if addr in self.dead or addr not in self.nodes:
            raise Unreachable(f"{addr}: connection refused")
        return self.nodes[addr]

    def call(self, src: str | None, addr: str, msg_type, payload: bytes, seq: int = 1) -> Frame:
        core = self._target(addr)
        # one-way frames sent earlier arrive before this request, as on a FIFO link
        self.pump()
        ep = _Endpoint(self, None)
        core.handle(ep, Frame(MsgType(msg_type), seq, bytes(payload)))
        if not ep.replies:
            raise Unreachable(f"{addr}: no reply to {MsgType(msg_type).name}")
        return ep.replies[0]

    def post(self, src: str | None, addr: str, msg_type, seq: int, payload: bytes):
        self._target(addr)
        self.queue.append((addr, src, Frame(MsgType(msg_type), seq, bytes(payload))))

    def pump(self, limit: int | None = None) -> int:
        n = 0
        while self.queue and (limit is None or n < limit):
            addr, src, frame = self.queue.popleft()
            if addr in self.dead or addr not in self.nodes:
                continue
            self.nodes[addr].handle(_Endpoint(self, src), frame)
            n += 1
        self.delivered += n
        return n


class _NodeNet:
    """The ``net`` object a single ServerCore uses."""

    def __init__(self, net: SimNetwork, address: str):
        self.net = net
        self.address = address

    def request(self, addr, msg_type, payload=b"", timeout=None) -> Frame:
        return self.net.call(self.address, addr, msg_type, payload)

    def send(self, addr, msg_type, seq, payload=b""):
        self.net.post(self.address, addr, msg_type, seq, payload)


class SimCluster:
    """N server cores on a :class:`SimNetwork`, plus a minimal synchronous client."""

    def __init__(self, capacities, replicas: int = 0, successors: int = 2, redirect: bool = True,
                 spill_root: str | None = None):
        self.net = SimNetwork()
        addrs = [f"sim{i}:{7000 + i}" for i in range(len(capacities))]
        views, self.server_list = init_ring(addrs, successors)
        self.cores: list[ServerCore] = []
        for i, (addr, view, cap) in enumerate(zip(addrs, views, capacities)):
            spill = os.path.join(spill_root, f"spill{i}") if spill_root else None
            cfg = ServerConfig(mem_capacity=cap, spill_dir=spill, replicas=replicas, successors=successors,
                               redirect=redirect, redirect_cache_s=0.0)
            core = ServerCore(cfg, self.net.node(addr), addr)
            core.install_view(view)
            self.net.nodes[addr] = core
            self.cores.append(core)
        self.redirects: list[tuple[ServerId, ServerId, list]] = []

    @property
    def servers(self) -> list[ServerId]:
        return list(self.server_list.servers)

    def free_snapshot(self) -> list[tuple[ServerId, int]]:
        return [(c.me, c.free_bytes()) for c in self.cores if c.address not in self.net.dead]

    def put(self, rank: int, rec: WriteRecord, placement: str = "iso") -> ServerId:
        """Send one PUT, following redirects like the real client.  Returns the server that stored it."""
        home = Placement(placement, self.servers, rank).locate(RecordKey(rec.file_id, rec.offset))
        target, redirected, force = home, False, False
        while True:
            self.net.pump()
            snapshot = self.free_snapshot()
            flags = FLAG_FORCE if force else 0
            ep = _Endpoint(self.net, None)
            frame = Frame(MsgType.PUT, rec.seq, PUT_FLAGS.pack(flags) + rec.encode())
            self.net._target(target.address).handle(ep, frame)
            self.net.pump()
            if not ep.replies:
                raise RuntimeError(f"PUT {rec.seq} to {target} was never answered")
            reply = ep.replies[0]
            if reply.msg_type is MsgType.REDIRECT:
                named = ServerId.from_wire(reply.json()["target"])
                self.redirects.append((target, named, snapshot))
                if not redirected:
                    target, redirected = named, True
                else:
                    target, force = home, True
                continue
            if reply.msg_type is MsgType.ERROR:
                raise RuntimeError(reply.json().get("error"))
            return target


    def flush(self, epoch: int, pfs_dir: str) -> dict:
        """Drive the flush phases from an in-process manager, sequentially."""
        from .manager import ManagerCore

        mgr = ManagerCore(self.net.node("manager:0"), k=self.cores[0].config.successors, parallel=False,
                          retry_delay=0.0)
        mgr.base = tuple(self.servers)
        for s in self.servers:
            if s.address in self.net.dead:
                mgr.mark_failed(s)
        return mgr.flush(epoch, pfs_dir)

    def read(self, file_id: str, offset: int, length: int, via: ServerId | None = None) -> bytes:
        """The client read path: LOOKUP_REQ to one server, then GETs to the named sources."""
        via = via or next(s for s in self.servers if s.address not in self.net.dead)
        route = self.net.call(None, via.address, MsgType.LOOKUP_REQ,
                              pack_json({"file": file_id, "offset": offset, "length": length}))
        if route.msg_type is MsgType.ERROR:
            raise KeyError(route.json()["error"])
        out = bytearray(length)
        for sid, addr, off, n in route.json()["sources"]:
            resp = self.net.call(None, addr, MsgType.GET, pack_json({"file": file_id, "offset": off, "length": n}))
            out[off - offset:off - offset + n] = resp.payload
        return bytes(out)


def brute_force_min_utilization(snapshot) -> ServerId:
    """Most free bytes, ties to the lowest ordinal."""
    best = max(snapshot, key=lambda p: (p[1], -p[0].id))
    return best[0]

