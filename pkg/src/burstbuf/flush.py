"""Two-phase drain: metadata exchange, file-domain plans, shuffle splitting,
domain assembly, and the restart lookup table."""

from __future__ import annotations

import heapq
import os
from dataclasses import dataclass
from typing import Iterable, Sequence


class FlushError(Exception):
    pass


class LookupError_(FlushError, LookupError):
    pass


class RangeError(FlushError, ValueError):
    pass


@dataclass(frozen=True)
class FileMeta:
    file_id: str
    global_size: int
    epoch: int


@dataclass(frozen=True)
class FlushPlan:
    file_id: str
    global_size: int
    servers: tuple  # ring order at shuffle time; index = domain number
    epoch: int = 0

    @property
    def n(self) -> int:
        return len(self.servers)

    @property
    def domain_width(self) -> int:
        return -(-self.global_size // self.n) if self.global_size else 0

    def domain(self, i: int) -> tuple[int, int]:
        d = self.domain_width
        lo = min(i * d, self.global_size)
        return lo, min((i + 1) * d, self.global_size)

    def domains(self) -> list[tuple[int, int]]:
        return [self.domain(i) for i in range(self.n)]

    def domain_of(self, offset: int) -> int:
        if not 0 <= offset < self.global_size:
            raise RangeError(f"offset {offset} outside [0, {self.global_size})")
        return offset // self.domain_width

    def owned_by(self, server) -> tuple[int, int]:
        return self.domain(self.servers.index(server))


def merge_extents(per_server: Iterable[dict[str, tuple[int, int]]]) -> dict[str, FileMeta]:
    """Combine ``{file: (extent_end, epoch)}`` maps from every server."""
    sizes: dict[str, int] = {}
    epochs: dict[str, int] = {}
    for extents in per_server:
        for f, (end, epoch) in extents.items():
            sizes[f] = max(sizes.get(f, 0), end)
            epochs[f] = max(epochs.get(f, 0), epoch)
    return {f: FileMeta(f, sizes[f], epochs[f]) for f in sorted(sizes)}


def exchange_metadata(per_server: Sequence[dict[str, tuple[int, int]]]) -> list[dict[str, FileMeta]]:
    """All-to-all exchange: every participant ends up with the same merged map."""
    merged = merge_extents(per_server)
    return [dict(merged) for _ in per_server]


def build_plan(meta: FileMeta, order: Sequence) -> FlushPlan:
    if not order:
        raise FlushError("no servers to flush with")
    return FlushPlan(meta.file_id, meta.global_size, tuple(order), meta.epoch)


def split_segment(plan: FlushPlan, offset: int, length: int) -> list[tuple[int, int, int]]:
    """Cut ``[offset, offset+length)`` at domain boundaries -> ``(domain, start, end)``."""
    out = []
    end = min(offset + length, plan.global_size)
    pos = offset
    while pos < end:
        i = plan.domain_of(pos)
        hi = min(plan.domain(i)[1], end)
        out.append((i, pos, hi))
        pos = hi
    return out


@dataclass(frozen=True)
class LookupTable:
    entries: dict  # file_id -> FlushPlan

    def __contains__(self, file_id) -> bool:
        return file_id in self.entries


def lookup_owner(table: LookupTable | dict, file_id: str, offset: int, length: int) -> list[tuple[object, int, int]]:
    """Owners of a byte range as ``(server, start, end)`` pieces, computed from the table alone."""
    entries = table.entries if isinstance(table, LookupTable) else table
    plan = entries.get(file_id)
    if plan is None:
        raise LookupError_(f"{file_id} not in lookup table")
    if offset < 0 or length < 0 or offset + length > plan.global_size:
        raise RangeError(f"[{offset}, {offset + length}) outside file of size {plan.global_size}")
    return [(plan.servers[i], lo, hi) for i, lo, hi in split_segment(plan, offset, length)]


def paint(lo: int, hi: int, pieces: Iterable[tuple[int, bytes, tuple]]) -> bytearray:
    """Assemble ``[lo, hi)`` from ``(offset, data, version)`` pieces; newest version wins, holes are zero."""
    buf = bytearray(hi - lo)
    for off, data, _ in sorted(pieces, key=lambda p: p[2]):
        a = max(off, lo)
        b = min(off + len(data), hi)
        if a < b:
            buf[a - lo:b - lo] = data[a - off:b - off]
    return buf


def resolve_sources(segments: Iterable[tuple[object, int, int, tuple]], lo: int, hi: int) -> list[tuple[object, int, int]]:
    """Given ``(holder, offset, length, version)`` segments from many servers,
    return which holder serves each byte run of ``[lo, hi)``; holes are omitted."""
    segs = sorted(((max(o, lo), min(o + n, hi), v, i, h) for i, (h, o, n, v) in enumerate(segments)
                   if o < hi and o + n > lo and n > 0), key=lambda s: s[0])
    cuts = sorted({lo, hi, *(s[0] for s in segs), *(s[1] for s in segs)})
    runs: list[tuple[object, int, int]] = []
    active: list = []  # max-heap on version via negated tuple
    j = 0
    for a, b in zip(cuts, cuts[1:]):
        while j < len(segs) and segs[j][0] <= a:
            s = segs[j]
            heapq.heappush(active, (_neg(s[2]), s[3], s[1], s[4]))
            j += 1
        while active and active[0][2] <= a:
            heapq.heappop(active)
        if not active:
            continue
        holder = active[0][3]
        if runs and runs[-1][0] == holder and runs[-1][2] == a:
            runs[-1] = (holder, runs[-1][1], b)
        else:
            runs.append((holder, a, b))
    return runs


def _neg(version: tuple) -> tuple:
    return tuple(-x for x in version)


def write_domain(path: str, global_size: int, lo: int, data: bytes | bytearray):
    """Write one domain's bytes into the target file, sizing it to ``global_size``."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT, 0o644)
    try:
        if os.fstat(fd).st_size != global_size:
            os.ftruncate(fd, global_size)
        view = memoryview(data)
        done = 0
        while done < len(view):
            done += os.pwrite(fd, view[done:], lo + done)
    finally:
        os.close(fd)
