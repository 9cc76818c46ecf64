"""An in-process cluster (manager plus N servers over loopback TCP) for tests,
the benchmark driver and demos."""

from __future__ import annotations

import os
import tempfile
import threading
from dataclasses import dataclass

from .client import Client
from .manager import Manager
from .server import Server, ServerConfig


@dataclass
class ClusterConfig:
    servers: int = 4
    mem_capacity: int = 256 * 1024 * 1024
    replicas: int = 0
    successors: int = 2
    stabilize_ms: int = 200
    redirect: bool = True
    spill_sync: bool = False
    repl_timeout: float = 5.0
    workdir: str | None = None
    mem_capacities: list | None = None


class LocalCluster:
    def __init__(self, config: ClusterConfig | None = None, **kw):
        self.config = config or ClusterConfig(**kw)
        c = self.config
        self._tmp = None
        if c.workdir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="bb-")
            c.workdir = self._tmp.name
        self.pfs_dir = os.path.join(c.workdir, "pfs")
        os.makedirs(self.pfs_dir, exist_ok=True)
        self.manager = Manager(expected_servers=c.servers, wait_ms=30000, k=c.successors,
                               ping_timeout=min(max(c.stabilize_ms / 1000.0, 0.2), 1.0))
        self.servers: list[Server] = []
        self.clients: list[Client] = []
        self.dead: set[int] = set()

    @property
    def manager_addr(self) -> str:
        return self.manager.address

    def _server_config(self, i: int, **extra) -> ServerConfig:
        c = self.config
        cap = c.mem_capacities[i] if c.mem_capacities else c.mem_capacity
        return ServerConfig(manager_addr=self.manager.address, mem_capacity=cap,
                            spill_dir=os.path.join(c.workdir, f"spill{i}"), pfs_dir=self.pfs_dir,
                            replicas=c.replicas, successors=c.successors, stabilize_ms=c.stabilize_ms,
                            redirect=c.redirect, spill_sync=c.spill_sync, repl_timeout=c.repl_timeout, **extra)

    def start(self) -> "LocalCluster":
        self.manager.start()
        self.servers = [Server(self._server_config(i)) for i in range(self.config.servers)]
        errors = []

        def boot(s):
            try:
                s.start()
            except Exception as e:
                errors.append(e)

        threads = [threading.Thread(target=boot, args=(s,)) for s in self.servers]
        for t in threads:
            t.start()
        for t in threads:
            t.join(60)
        if errors:
            self.close()
            raise errors[0]
        return self

    def client(self, rank: int = 0, placement: str = "ketama", **kw) -> Client:
        c = Client(self.manager.address, rank, placement, **kw).open()
        self.clients.append(c)
        return c

    def join(self, predecessor: int) -> Server:
        i = len(self.servers)
        s = Server(self._server_config(i, join_after=predecessor))
        s.start()
        self.servers.append(s)
        return s

    def kill(self, i: int):
        self.servers[i].kill()
        self.dead.add(i)

    def server_by_ordinal(self, ordinal: int) -> Server:
        for s in self.servers:
            if s.core.me is not None and s.core.me.id == ordinal:
                return s
        raise KeyError(ordinal)

    def close(self):
        for c in self.clients:
            c.close()
        for i, s in enumerate(self.servers):
            try:
                s.stop()
            except Exception:
                pass
        self.manager.stop()
        if self._tmp is not None:
            self._tmp.cleanup()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()
