import itertools
import random

import pytest

from burstbuf.ring import (EventKind, IsolatedNode, MembershipEvent, PeerUnreachable, RingError, RingNode,
                           RingSimulation, RingView, ServerId, ServerList, apply_membership, consistent, init_ring,
                           merge_knowledge, view_from_knowledge)


def ring_ids(n):
    return [ServerId(i, f"h{i}:1") for i in range(n)]


def test_init_ring_four_servers():
    views, sl = init_ring(["a:1", "b:1", "c:1", "d:1"], k=2)
    by = {v.self_id.id: v for v in views}
    assert [s.id for s in by[0].successors] == [1, 2]
    assert by[0].predecessor.id == 3
    assert [s.id for s in by[3].successors] == [0, 1]
    assert sl.version == 0 and [s.id for s in sl.servers] == [0, 1, 2, 3]


def test_init_ring_single_server_is_its_own_neighbour():
    views, _ = init_ring(["a:1"])
    v = views[0]
    assert v.predecessor == v.self_id and v.successors == (v.self_id, v.self_id)
    assert v.replica_targets(2) == []


def test_init_ring_empty():
    with pytest.raises(RingError):
        init_ring([])


def test_failure_event_is_idempotent():
    ids = ring_ids(5)
    v = RingView.build(ids[0], ids, (), 2)
    ev = MembershipEvent(EventKind.FAILED, ids[1], ids[0], 1)
    once = apply_membership(v, ev)
    assert once.successors == (ids[2], ids[3])
    assert apply_membership(once, ev) is once
    assert once.version == v.version + 1


def test_events_commute():
    ids = ring_ids(8)
    evs = [MembershipEvent(EventKind.FAILED, ids[3], ids[2], 1),
           MembershipEvent(EventKind.JOINED, ServerId(8, "h8:1"), ids[5], 2, anchor=ids[5]),
           MembershipEvent(EventKind.FAILED, ids[6], ids[5], 3),
           MembershipEvent(EventKind.JOINED, ServerId(9, "h9:1"), ids[5], 4, anchor=ids[5])]
    results = set()
    for perm in itertools.permutations(evs):
        v = RingView.build(ids[0], ids, (), 2)
        for e in perm:
            v = apply_membership(v, e)
        results.add((v.predecessor, v.successors, tuple(v.members()), v.version))
    assert len(results) == 1
    (_, _, members, version), = results
    assert [s.id for s in members] == [0, 1, 2, 4, 5, 9, 8, 7]
    assert version == 4


def test_merge_knowledge_learns_unknown_facts():
    ids = ring_ids(4)
    a = apply_membership(RingView.build(ids[0], ids), MembershipEvent(EventKind.FAILED, ids[2], ids[1], 1))
    b = RingView.build(ids[1], ids)
    merged = merge_knowledge(b, a.knowledge())
    assert merged.successors == (ids[3], ids[0])
    assert merge_knowledge(merged, a.knowledge()) is merged


def test_a_server_never_believes_itself_dead():
    ids = ring_ids(3)
    v = RingView.build(ids[0], ids)
    assert apply_membership(v, MembershipEvent(EventKind.FAILED, ids[0], ids[1], 1)) is v
    know = {"base": [s.to_wire() for s in ids], "facts": [MembershipEvent(EventKind.FAILED, ids[0]).to_wire()]}
    assert view_from_knowledge(ids[0], know, 2).predecessor == ids[2]


def test_wire_forms_roundtrip():
    ev = MembershipEvent(EventKind.JOINED, ServerId(5, "x:1"), ServerId(1, "y:1"), 7, anchor=ServerId(1, "y:1"))
    assert MembershipEvent.from_wire(ev.to_wire()) == ev
    sl = ServerList(3, tuple(ring_ids(3)))
    assert ServerList.from_wire(sl.to_wire()) == sl
    assert sl.predecessor_of(ServerId(0, "h0:1")) == ServerId(2, "h2:1")


class FakeNet:
    def __init__(self, nodes):
        self.nodes = nodes
        self.dead = set()

    def rpc_for(self, me):
        def rpc(peer, op, body):
            if peer in self.dead:
                raise PeerUnreachable(str(peer))
            n = self.nodes[peer]
            return n.handle_ping(body) if op == "ping" else n.handle_neighbors(body)
        return rpc


def make_nodes(n, k=2):
    ids = ring_ids(n)
    nodes, reports = {}, []
    net = FakeNet(nodes)
    for s in ids:
        nodes[s] = RingNode(RingView.build(s, ids, (), k), net.rpc_for(s), report=reports.append)
    return ids, nodes, net, reports


def test_stabilize_skips_dead_successor_and_reports():
    ids, nodes, net, reports = make_nodes(5)
    net.dead.add(ids[1])
    evs = nodes[ids[0]].stabilize()
    assert [e.subject for e in evs] == [ids[1]]
    assert nodes[ids[0]].view.successors == (ids[2], ids[3])
    assert [r.subject for r in reports] == [ids[1]]
    # the push-pull told ids[2] as well
    assert nodes[ids[2]].view.predecessor == ids[0]
    nodes[ids[0]].stabilize()
    assert len(reports) == 1


def test_isolated_when_all_successors_dead():
    ids, nodes, net, reports = make_nodes(3, k=2)
    net.dead |= {ids[1], ids[2]}
    with pytest.raises(IsolatedNode):
        nodes[ids[0]].stabilize()
    assert nodes[ids[0]].isolated


def test_simulation_converges_from_start():
    sim = RingSimulation(8, seed=1)
    sim.run_until(2.0)
    assert consistent(sim.views(), sim.live_order()) == []


@pytest.mark.parametrize("seed", range(40))
def test_single_fault_converges_within_three_periods(seed):
    rng = random.Random(seed)
    sim = RingSimulation(8, k=2, period=1.0, seed=seed)
    t0 = 5.0 + rng.random()
    sim.run_until(t0)
    if seed % 2:
        sim.fail(rng.choice(sim.live_order()))
    else:
        sim.join(rng.choice(sim.live_order()))
    sim.run_until(t0 + 3.0)
    assert consistent(sim.views(), sim.live_order()) == []


def test_consistent_flags_a_stale_view():
    sim = RingSimulation(4, seed=0)
    sim.run_until(1.0)
    victim = sim.live_order()[1]
    sim.fail(victim)
    assert consistent(sim.views(), sim.live_order())  # nobody noticed yet


def test_join_after_dead_predecessor_rejected():
    sim = RingSimulation(4, seed=0)
    s = sim.live_order()[2]
    sim.fail(s)
    with pytest.raises(RingError):
        sim.join(s)
