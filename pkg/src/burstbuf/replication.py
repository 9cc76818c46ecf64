"""Chained replication bookkeeping: replica sets, the primary's pending-ACK
table, and re-replication after the successor list changes."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .store import Entry


@dataclass(frozen=True)
class ReplicaSet:
    primary: object
    successors: tuple

    @property
    def chain(self) -> tuple:
        return (self.primary, *self.successors)


def replica_set(primary, successors: Iterable, r: int) -> ReplicaSet:
    """Up to ``r`` distinct successors, never the primary itself."""
    out = []
    for s in successors:
        if s != primary and s not in out:
            out.append(s)
    return ReplicaSet(primary, tuple(out[:r]))


@dataclass
class PendingPut:
    seq: int
    client: int
    key: str
    acks_needed: int
    conn: object
    deadline: float
    chain: tuple = ()
    acks_seen: set = field(default_factory=set)


class PendingTable:
    """Puts waiting for successor ACKs, keyed by (client, seq)."""

    def __init__(self):
        self._items: dict[tuple[int, int], PendingPut] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._items)

    def add(self, put: PendingPut) -> bool:
        """False if the same put is already waiting (a client resend)."""
        with self._lock:
            cur = self._items.get((put.client, put.seq))
            if cur is not None:
                cur.conn = put.conn
                return False
            self._items[(put.client, put.seq)] = put
            return True

    def ack(self, client: int, seq: int, acker) -> PendingPut | None:
        """Record one ACK; returns the entry once it is complete (and removes it)."""
        with self._lock:
            put = self._items.get((client, seq))
            if put is None:
                return None
            put.acks_seen.add(acker)
            if len(put.acks_seen) >= put.acks_needed:
                del self._items[(client, seq)]
                return put
            return None

    def remove(self, client: int, seq: int) -> PendingPut | None:
        with self._lock:
            return self._items.pop((client, seq), None)

    def expired(self, now: float | None = None) -> list[PendingPut]:
        now = time.monotonic() if now is None else now
        with self._lock:
            dead = [p for p in self._items.values() if p.deadline <= now]
            for p in dead:
                del self._items[(p.client, p.seq)]
            return dead

    def drop_all(self) -> list[PendingPut]:
        with self._lock:
            items = list(self._items.values())
            self._items.clear()
            return items


def resync_replicas(entries: Iterable[Entry], me, targets: Iterable, ship: Callable[[Entry, object, tuple], bool]) -> int:
    """Ship every locally-primary record to targets not yet holding it.

    ``ship(entry, target, new_chain)`` returns False when the target is
    unreachable; that copy is retried on the next call.  The entry's chain
    doubles as its replica inventory.
    """
    targets = [t for t in targets if t != me]
    shipped = 0
    for entry in entries:
        if not entry.chain or entry.chain[0] != me:
            continue
        missing = [t for t in targets if t not in entry.chain]
        for t in missing:
            chain = (*entry.chain, t)
            if ship(entry, t, chain):
                entry.chain = chain
                shipped += 1
    return shipped


def responsible(chain: tuple, me, live) -> bool:
    """Is ``me`` the copy that speaks for this record?  The first live holder does."""
    if not chain:
        return True
    for holder in chain:
        if holder in live:
            return holder == me
    return False
