"""Ring membership: bootstrap, stabilization, joins and failures.

Every server keeps the ring order it was given at bootstrap plus the set of
membership facts (FAILED / JOINED) it has learned.  Its predecessor and
successor list are derived from that knowledge, so applying facts in any
order yields the same view.  Stabilization is how facts spread: a server
pings its successor and swaps knowledge with it, and when the ping fails it
records the failure and moves on to the next successor.
"""

from __future__ import annotations

import enum
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

log = logging.getLogger(__name__)

DEFAULT_SUCCESSORS = 2
DEFAULT_PERIOD = 0.5


class RingError(Exception):
    pass


class PeerUnreachable(RingError):
    pass


class IsolatedNode(RingError):
    """Every successor is unreachable."""


@dataclass(frozen=True, order=True)
class ServerId:
    id: int
    address: str = ""

    def __str__(self) -> str:
        return self.address or f"s{self.id}"

    def to_wire(self) -> list:
        return [self.id, self.address]

    @classmethod
    def from_wire(cls, v) -> "ServerId":
        return cls(int(v[0]), str(v[1]))


class EventKind(enum.Enum):
    FAILED = "failed"
    JOINED = "joined"


@dataclass(frozen=True)
class MembershipEvent:
    kind: EventKind
    subject: ServerId
    reporter: ServerId | None = None
    version: int = 0
    anchor: ServerId | None = None  # JOINED only: the predecessor the joiner asked for

    @property
    def fact(self) -> tuple[EventKind, ServerId]:
        return (self.kind, self.subject)

    def to_wire(self) -> dict:
        return {
            "kind": self.kind.value,
            "subject": self.subject.to_wire(),
            "reporter": self.reporter.to_wire() if self.reporter else None,
            "version": self.version,
            "anchor": self.anchor.to_wire() if self.anchor else None,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "MembershipEvent":
        return cls(
            EventKind(d["kind"]),
            ServerId.from_wire(d["subject"]),
            ServerId.from_wire(d["reporter"]) if d.get("reporter") else None,
            int(d.get("version", 0)),
            ServerId.from_wire(d["anchor"]) if d.get("anchor") else None,
        )


def ring_order(base: Sequence[ServerId], facts: Iterable[MembershipEvent]) -> tuple[list[ServerId], set[ServerId]]:
    """Full ring order (joins spliced in) and the set of failed members."""
    order = list(base)
    joins = sorted((e for e in facts if e.kind is EventKind.JOINED), key=lambda e: (e.version, e.subject))
    dead = {e.subject for e in facts if e.kind is EventKind.FAILED}
    for e in joins:
        if e.subject in order:
            continue
        if e.anchor in order:
            order.insert(order.index(e.anchor) + 1, e.subject)
        else:
            order.append(e.subject)
    return order, dead


def neighbors(live: Sequence[ServerId], me: ServerId, k: int) -> tuple[ServerId, tuple[ServerId, ...]]:
    n = len(live)
    i = live.index(me)
    pred = live[(i - 1) % n]
    succ = tuple(live[(i + j) % n] for j in range(1, k + 1))
    return pred, succ


@dataclass(frozen=True)
class RingView:
    self_id: ServerId
    predecessor: ServerId
    successors: tuple[ServerId, ...]
    version: int
    base: tuple[ServerId, ...] = ()
    facts: tuple[MembershipEvent, ...] = ()
    k: int = DEFAULT_SUCCESSORS
    base_version: int = 0

    @classmethod
    def build(cls, me: ServerId, base: Sequence[ServerId], facts: Iterable[MembershipEvent] = (),
              k: int = DEFAULT_SUCCESSORS, base_version: int = 0) -> "RingView":
        uniq: dict = {}
        for e in facts:
            cur = uniq.get(e.fact)
            # one copy per fact; the lowest version is the canonical one
            if cur is None or (e.version, str(e.reporter)) < (cur.version, str(cur.reporter)):
                uniq[e.fact] = e
        facts = tuple(sorted(uniq.values(), key=lambda e: (e.kind.value, e.subject)))
        order, dead = ring_order(base, facts)
        live = [s for s in order if s not in dead or s == me]
        if me not in live:
            raise RingError(f"{me} is not a ring member")
        pred, succ = neighbors(live, me, k)
        return cls(me, pred, succ, base_version + len(facts), tuple(base), facts, k, base_version)

    @property
    def known_failed(self) -> set[ServerId]:
        return {e.subject for e in self.facts if e.kind is EventKind.FAILED}

    def members(self) -> list[ServerId]:
        """Live members in ring order, as far as this server knows."""
        order, dead = ring_order(self.base, self.facts)
        return [s for s in order if s not in dead or s == self.self_id]

    def directory(self) -> dict[int, ServerId]:
        """Every server this view has heard of, dead or alive, by ordinal."""
        out = {s.id: s for s in self.base}
        for e in self.facts:
            out.setdefault(e.subject.id, e.subject)
        return out

    def knows(self, event: MembershipEvent) -> bool:
        return any(e.fact == event.fact for e in self.facts)

    def replica_targets(self, r: int) -> list[ServerId]:
        out = []
        for s in self.successors:
            if s != self.self_id and s not in out:
                out.append(s)
        return out[:r]

    def knowledge(self) -> dict:
        return {
            "base": [s.to_wire() for s in self.base],
            "base_version": self.base_version,
            "facts": [e.to_wire() for e in self.facts],
        }


def apply_membership(view: RingView, event: MembershipEvent) -> RingView:
    """Apply one event; already-known facts leave the view untouched."""
    if view.knows(event):
        return view
    if event.kind is EventKind.FAILED and event.subject == view.self_id:
        return view
    return RingView.build(view.self_id, view.base, view.facts + (event,), view.k, view.base_version)


def merge_knowledge(view: RingView, knowledge: dict) -> RingView:
    facts = [MembershipEvent.from_wire(d) for d in knowledge.get("facts", ())]
    new = [e for e in facts if not view.knows(e) and not (e.kind is EventKind.FAILED and e.subject == view.self_id)]
    if not new:
        return view
    return RingView.build(view.self_id, view.base, view.facts + tuple(new), view.k, view.base_version)


def view_from_knowledge(me: ServerId, knowledge: dict, k: int) -> RingView:
    base = [ServerId.from_wire(v) for v in knowledge["base"]]
    facts = [MembershipEvent.from_wire(d) for d in knowledge.get("facts", ())]
    facts = [e for e in facts if not (e.kind is EventKind.FAILED and e.subject == me)]
    return RingView.build(me, base, facts, k, int(knowledge.get("base_version", 0)))


@dataclass(frozen=True)
class ServerList:
    version: int
    servers: tuple[ServerId, ...]

    def to_wire(self) -> dict:
        return {"version": self.version, "servers": [s.to_wire() for s in self.servers]}

    @classmethod
    def from_wire(cls, d: dict) -> "ServerList":
        return cls(int(d["version"]), tuple(ServerId.from_wire(v) for v in d["servers"]))

    def predecessor_of(self, s: ServerId) -> ServerId | None:
        if s not in self.servers or len(self.servers) < 2:
            return None
        i = self.servers.index(s)
        return self.servers[i - 1]


def init_ring(registrations: Sequence[str], k: int = DEFAULT_SUCCESSORS) -> tuple[list[RingView], ServerList]:
    """Assign ordinals in registration order and compute every server's view."""
    if not registrations:
        raise RingError("no servers registered before the waiting period expired")
    base = [ServerId(i, addr) for i, addr in enumerate(registrations)]
    views = [RingView.build(s, base, (), k) for s in base]
    return views, ServerList(0, tuple(base))


Rpc = Callable[[ServerId, str, dict], dict]


class RingNode:
    """Membership state of one server plus its stabilization logic.

    ``rpc(peer, op, body)`` performs a request against a peer and raises
    :class:`PeerUnreachable` on timeout or refused connection.  ``op`` is one
    of ``"ping"`` or ``"neighbors"``.  ``report(event)`` tells the manager
    about a failure this node confirmed.
    """

    def __init__(self, view: RingView, rpc: Rpc, report: Callable[[MembershipEvent], None] | None = None,
                 on_change: Callable[[RingView, RingView], None] | None = None):
        self.view = view
        self.rpc = rpc
        self.report = report
        self.on_change = on_change
        self.isolated = False
        self._reported: set = set()
        self._lock = threading.RLock()

    @property
    def me(self) -> ServerId:
        return self.view.self_id

    def _set(self, new: RingView, old: RingView):
        if new is old:
            return
        self.view = new
        if self.on_change and (old.successors != new.successors or old.predecessor != new.predecessor):
            self.on_change(old, new)

    def apply(self, event: MembershipEvent) -> RingView:
        with self._lock:
            old = self.view
            self._set(apply_membership(old, event), old)
            return self.view

    def merge(self, knowledge: dict) -> RingView:
        with self._lock:
            old = self.view
            self._set(merge_knowledge(old, knowledge), old)
            return self.view

    # -- incoming requests ----------------------------------------------------

    def handle_ping(self, body: dict) -> dict:
        return {"id": self.me.to_wire()}

    def handle_neighbors(self, body: dict) -> dict:
        if "knowledge" in body:
            self.merge(body["knowledge"])
        v = self.view
        return {
            "predecessor": v.predecessor.to_wire(),
            "successors": [s.to_wire() for s in v.successors],
            "knowledge": v.knowledge(),
        }

    # -- periodic driver ------------------------------------------------------

    def stabilize(self) -> list[MembershipEvent]:
        """One stabilization round.  Returns the failure events it produced."""
        events: list[MembershipEvent] = []
        attempts = max(len(set(self.view.successors) - {self.me}), 1)
        while True:
            succ = self.view.successors[0]
            if succ == self.me:
                return events
            try:
                self.rpc(succ, "ping", {})
                resp = self.rpc(succ, "neighbors", {"knowledge": self.view.knowledge()})
            except PeerUnreachable:
                ev = MembershipEvent(EventKind.FAILED, succ, self.me, self.view.version + 1)
                log.info("%s: successor %s unreachable", self.me, succ)
                self.apply(ev)
                events.append(ev)
                attempts -= 1
                if attempts <= 0:
                    self.isolated = True
                    self._report_all(events)
                    raise IsolatedNode(f"{self.me}: all successors unreachable")
                continue
            self.merge(resp["knowledge"])
            break
        self.isolated = False
        self._report_all(events)
        return events

    def _report_all(self, events):
        if self.report is None:
            return
        for ev in events:
            if ev.fact in self._reported:
                continue
            self._reported.add(ev.fact)
            try:
                self.report(ev)
            except Exception:  # manager down: stabilization must keep going
                self._reported.discard(ev.fact)
                log.warning("%s: could not report %s to manager", self.me, ev.subject)


def consistent(views: dict[ServerId, RingView], live_order: Sequence[ServerId]) -> list[str]:
    """Compare live views against the true ring; returns a list of violations."""
    problems = []
    k_default = next(iter(views.values())).k if views else DEFAULT_SUCCESSORS
    live = set(live_order)
    for s in live_order:
        v = views[s]
        pred, succ = neighbors(list(live_order), s, v.k or k_default)
        if v.predecessor != pred:
            problems.append(f"{s}: predecessor {v.predecessor} != {pred}")
        if v.successors != succ:
            problems.append(f"{s}: successors {list(map(str, v.successors))} != {list(map(str, succ))}")
        for x in (v.predecessor, *v.successors):
            if x not in live:
                problems.append(f"{s}: references dead {x}")
        head = v.successors[0]
        if head in views and views[head].predecessor != s:
            problems.append(f"{s}: successor {head} has predecessor {views[head].predecessor}")
    return problems


@dataclass
class _SimNode:
    node: RingNode
    phase: float
    alive: bool = True


@dataclass
class RingSimulation:
    """Single-threaded, simulated-clock ring used for convergence checks."""

    n: int
    k: int = DEFAULT_SUCCESSORS
    period: float = 1.0
    seed: int = 0
    nodes: dict = field(default_factory=dict)
    reports: list = field(default_factory=list)
    now: float = 0.0

    def __post_init__(self):
        import random

        self.rng = random.Random(self.seed)
        views, _ = init_ring([f"10.0.0.{i}:7000" for i in range(self.n)], self.k)
        self.order = [v.self_id for v in views]
        self._next_ordinal = self.n
        self._version = 0
        for v in views:
            self._add(v)

    def _add(self, view: RingView):
        node = RingNode(view, self._rpc_for(view.self_id), report=self.reports.append)
        self.nodes[view.self_id] = _SimNode(node, self.rng.uniform(0, self.period))

    def _rpc_for(self, me):
        def rpc(peer, op, body):
            target = self.nodes.get(peer)
            if target is None or not target.alive:
                raise PeerUnreachable(str(peer))
            if op == "ping":
                return target.node.handle_ping(body)
            return target.node.handle_neighbors(body)
        return rpc

    def live_order(self) -> list[ServerId]:
        return [s for s in self.order if self.nodes[s].alive]

    def views(self) -> dict[ServerId, RingView]:
        return {s: self.nodes[s].node.view for s in self.live_order()}

    def run_until(self, t_end: float):
        """Fire every stabilization tick in (now, t_end] in time order."""
        ticks = []
        for s, sn in self.nodes.items():
            if not sn.alive:
                continue
            m = int((self.now - sn.phase) // self.period) + 1
            t = sn.phase + m * self.period
            while t <= t_end:
                if t > self.now:
                    ticks.append((t, s))
                t += self.period
        for t, s in sorted(ticks, key=lambda x: (x[0], x[1].id)):
            sn = self.nodes[s]
            if sn.alive:
                try:
                    sn.node.stabilize()
                except IsolatedNode:
                    pass
        self.now = t_end

    def fail(self, s: ServerId):
        self.nodes[s].alive = False

    def join(self, predecessor: ServerId) -> ServerId:
        """Manager-side join: announce to the predecessor and seed the joiner."""
        if not self.nodes[predecessor].alive:
            raise RingError("desired predecessor is dead")
        self._version += 1
        joiner = ServerId(self._next_ordinal, f"10.0.1.{self._next_ordinal}:7000")
        self._next_ordinal += 1
        ev = MembershipEvent(EventKind.JOINED, joiner, predecessor, self._version, anchor=predecessor)
        pred_node = self.nodes[predecessor].node
        pred_node.apply(ev)
        self.order.insert(self.order.index(predecessor) + 1, joiner)
        self._add(view_from_knowledge(joiner, pred_node.view.knowledge(), self.k))
        return joiner
