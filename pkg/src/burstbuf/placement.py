"""Record placement: Ketama consistent hashing and isolated (per-client) placement."""

from __future__ import annotations

import bisect
import hashlib
from dataclasses import dataclass
from typing import Hashable, Sequence

POINTS_PER_SERVER = 160


class PlacementError(ValueError):
    pass


@dataclass(frozen=True)
class RecordKey:
    file_id: str
    offset: int

    def __str__(self) -> str:
        return f"{canonical_path(self.file_id)}@{self.offset}"


def canonical_path(path: str) -> str:
    parts = [p for p in path.replace("\\", "/").split("/") if p not in ("", ".")]
    if ".." in parts or not parts:
        raise PlacementError(f"file id {path!r} is not a relative path inside the buffer namespace")
    return "/".join(parts)


def _digest(text: str) -> bytes:
    return hashlib.md5(text.encode()).digest()


def key_hash(key) -> int:
    return int.from_bytes(_digest(str(key))[:4], "little")


def _server_name(server) -> str:
    # ServerId-like objects hash by their address; plain values by str()
    return str(getattr(server, "address", server))


class HashRing:
    """Immutable Ketama ring. ``points`` is a sorted list of (hash, server)."""

    def __init__(self, servers: Sequence[Hashable], points_per_server: int = POINTS_PER_SERVER):
        if not servers:
            raise PlacementError("Ketama ring needs at least one server")
        if len(set(servers)) != len(servers):
            raise PlacementError("server identities must be unique")
        if points_per_server <= 0 or points_per_server % 4:
            raise PlacementError("points_per_server must be a positive multiple of 4")
        self.servers = tuple(servers)
        self.points_per_server = points_per_server
        points = []
        for s in self.servers:
            name = _server_name(s)
            for i in range(points_per_server // 4):
                d = _digest(f"{name}-{i}")
                for j in range(4):
                    points.append((int.from_bytes(d[4 * j:4 * j + 4], "little"), s))
        # ties on equal hashes resolve by server order for determinism
        order = {s: i for i, s in enumerate(self.servers)}
        points.sort(key=lambda p: (p[0], order[p[1]]))
        self.points = points
        self._hashes = [p[0] for p in points]

    def __len__(self) -> int:
        return len(self.points)

    def locate_hash(self, h: int):
        i = bisect.bisect_left(self._hashes, h)
        if i == len(self._hashes):
            i = 0
        return self.points[i][1]

    def locate(self, key):
        return self.locate_hash(key_hash(key))

    def without(self, server) -> "HashRing":
        return HashRing([s for s in self.servers if s != server], self.points_per_server)


def build_ketama_ring(servers: Sequence[Hashable], points_per_server: int = POINTS_PER_SERVER) -> HashRing:
    return HashRing(servers, points_per_server)


def locate_ketama(ring: HashRing, key: RecordKey):
    return ring.locate(key)


def locate_isolated(client_rank: int, num_servers: int, servers: Sequence):
    if num_servers < 1:
        raise PlacementError("isolated placement needs at least one server")
    return servers[client_rank % num_servers]


class Placement:
    """Strategy object used by clients: ``ketama`` or ``iso``."""

    def __init__(self, strategy: str, servers: Sequence, rank: int = 0):
        if strategy not in ("ketama", "iso"):
            raise PlacementError(f"unknown placement strategy {strategy!r}")
        if not servers:
            raise PlacementError("no servers to place on")
        self.strategy = strategy
        self.servers = list(servers)
        self.rank = rank
        self.ring = build_ketama_ring(self.servers) if strategy == "ketama" else None

    def locate(self, key: RecordKey):
        if self.ring is not None:
            return self.ring.locate(key)
        return locate_isolated(self.rank, len(self.servers), self.servers)
