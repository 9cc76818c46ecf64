import json
import os
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from burstbuf.placement import (HashRing, Placement, PlacementError, RecordKey, build_ketama_ring, canonical_path,
                                key_hash, locate_isolated, locate_ketama)
from burstbuf.ring import ServerId

with open(os.path.join(os.path.dirname(__file__), "golden", "ketama.json")) as fh:
    GOLDEN = json.load(fh)


def golden_keys():
    return [f"ckpt/rank{i % 64:03d}@{(i // 64) * 1048576}" for i in range(100000)]


def test_point_count_and_order():
    ring = build_ketama_ring(["A", "B", "C"])
    assert len(ring) == 480
    hashes = [h for h, _ in ring.points]
    assert hashes == sorted(hashes)
    assert Counter(s for _, s in ring.points) == {"A": 160, "B": 160, "C": 160}


def test_first_points_match_oracle():
    ring = build_ketama_ring(["A", "B", "C", "D"])
    assert [[h, s] for h, s in ring.points[:8]] == GOLDEN["abcd_first_points"]


@pytest.mark.parametrize("key", sorted(GOLDEN["abcd_vectors"]))
def test_abcd_vectors(key):
    ring = build_ketama_ring(["A", "B", "C", "D"])
    file_id, _, off = key.rpartition("@")
    assert locate_ketama(ring, RecordKey(file_id, int(off))) == GOLDEN["abcd_vectors"][key]


def test_single_server_owns_everything():
    ring = build_ketama_ring(["only"])
    assert {ring.locate(f"k{i}") for i in range(200)} == {"only"}


def test_wraparound():
    ring = build_ketama_ring(["A", "B"])
    top = max(h for h, _ in ring.points)
    assert ring.locate_hash(top + 1) == ring.points[0][1]
    assert ring.locate_hash(0) == ring.points[0][1]


def test_errors():
    with pytest.raises(PlacementError):
        build_ketama_ring([])
    with pytest.raises(PlacementError):
        build_ketama_ring(["A", "A"])
    with pytest.raises(PlacementError):
        Placement("random", ["A"])


def test_server_ids_hash_by_address():
    ids = [ServerId(i, a) for i, a in enumerate(GOLDEN["servers"][:4])]
    by_id = build_ketama_ring(ids)
    by_name = build_ketama_ring([s.address for s in ids])
    for i in range(500):
        k = RecordKey("f", i * 4096)
        assert by_id.locate(k).address == by_name.locate(k)


def test_golden_fractions_within_one_point():
    ring = build_ketama_ring(GOLDEN["servers"])
    counts = Counter(ring.locate(k) for k in golden_keys())
    for s, frac in GOLDEN["fractions"].items():
        got = counts[s] / 100000
        assert abs(got - frac) <= 0.01
        assert 0.08 <= got <= 0.18


def test_removal_moves_only_the_removed_servers_keys():
    ring = build_ketama_ring(GOLDEN["servers"])
    keys = golden_keys()[:10000]
    for gone in GOLDEN["servers"]:
        smaller = ring.without(gone)
        for k in keys:
            before = ring.locate(k)
            if before != gone:
                assert smaller.locate(k) == before


def test_isolated():
    servers = ["s0", "s1", "s2"]
    assert [locate_isolated(r, 3, servers) for r in range(7)] == ["s0", "s1", "s2", "s0", "s1", "s2", "s0"]
    p = Placement("iso", servers, rank=4)
    assert {p.locate(RecordKey("f", o)) for o in range(0, 1 << 24, 1 << 20)} == {"s1"}
    with pytest.raises(PlacementError):
        locate_isolated(0, 0, [])


def test_iso_128_clients():
    servers = [f"s{i}" for i in range(8)]
    for rank in range(128):
        p = Placement("iso", servers, rank)
        assert p.locate(RecordKey("ior/shared", rank * 1048576)) == servers[rank % 8]


def test_canonical_key_string():
    assert str(RecordKey("/ckpt//a/./b", 5)) == "ckpt/a/b@5"
    assert key_hash(RecordKey("ckpt/a", 0)) == key_hash("ckpt/a@0")
    with pytest.raises(PlacementError):
        canonical_path("../etc/passwd")
    with pytest.raises(PlacementError):
        canonical_path("//")


@given(st.lists(st.text(min_size=1, max_size=8), min_size=2, max_size=6, unique=True), st.text(max_size=20))
def test_removal_property(servers, key):
    ring = HashRing(servers)
    owner = ring.locate(key)
    other = next(s for s in servers if s != owner)
    assert ring.without(other).locate(key) == owner
