import os
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from burstbuf import flush as fl


def plan(size, n, epoch=0):
    return fl.build_plan(fl.FileMeta("f", size, epoch), [f"s{i}" for i in range(n)])


def test_merge_extents_takes_max():
    merged = fl.merge_extents([{"a": (100, 0)}, {"a": (250, 1), "b": (10, 0)}, {}])
    assert merged["a"] == fl.FileMeta("a", 250, 1)
    assert merged["b"].global_size == 10
    every = fl.exchange_metadata([{"a": (5, 0)}, {"a": (9, 0)}])
    assert every[0] == every[1] and every[0]["a"].global_size == 9


def test_domains_partition_the_file():
    p = plan(1000, 3)
    assert p.domains() == [(0, 334), (334, 668), (668, 1000)]
    assert p.domain_of(333) == 0 and p.domain_of(334) == 1
    with pytest.raises(fl.RangeError):
        p.domain_of(1000)


def test_more_servers_than_bytes():
    p = plan(2, 4)
    assert p.domains() == [(0, 1), (1, 2), (2, 2), (2, 2)]


def test_split_at_domain_boundaries():
    p = plan(256 << 20, 4)
    assert fl.split_segment(p, (64 << 20) - 10, 20) == [(0, (64 << 20) - 10, 64 << 20), (1, 64 << 20, (64 << 20) + 10)]
    assert fl.split_segment(p, 0, 256 << 20) == [(i, i * (64 << 20), (i + 1) * (64 << 20)) for i in range(4)]


@given(st.integers(1, 10**6), st.integers(1, 9), st.data())
def test_split_pieces_tile_the_segment(size, n, data):
    p = plan(size, n)
    off = data.draw(st.integers(0, size - 1))
    length = data.draw(st.integers(1, size - off))
    pieces = fl.split_segment(p, off, length)
    assert pieces[0][1] == off and pieces[-1][2] == off + length
    for (i, a, b), (j, c, _) in zip(pieces, pieces[1:]):
        assert b == c and j == i + 1
    for i, a, b in pieces:
        lo, hi = p.domain(i)
        assert lo <= a < b <= hi


def test_lookup_owner():
    table = fl.LookupTable({"f": plan(400, 4)})
    assert fl.lookup_owner(table, "f", 90, 20) == [("s0", 90, 100), ("s1", 100, 110)]
    with pytest.raises(fl.LookupError_):
        fl.lookup_owner(table, "g", 0, 1)
    with pytest.raises(fl.RangeError):
        fl.lookup_owner(table, "f", 390, 20)


def test_paint_newest_wins_and_holes_are_zero():
    pieces = [(0, b"aaaa", (0, 1, 0)), (2, b"bbbb", (0, 2, 0)), (1, b"c", (0, 0, 0))]
    assert bytes(fl.paint(0, 8, pieces)) == b"aabbbb\0\0"
    assert bytes(fl.paint(3, 5, pieces)) == b"bb"


def brute_sources(segs, lo, hi):
    owner = {}
    for x in range(lo, hi):
        best = None
        for h, o, n, v in segs:
            if o <= x < o + n and (best is None or v > best[1]):
                best = (h, v)
        if best:
            owner[x] = best[0]
    return owner


def test_resolve_sources_against_bytewise_oracle():
    rng = random.Random(5)
    for _ in range(200):
        segs = []
        for i in range(rng.randrange(0, 12)):
            o = rng.randrange(0, 200)
            segs.append((f"h{rng.randrange(4)}", o, rng.randrange(1, 60), (rng.randrange(3), i, 0)))
        lo = rng.randrange(0, 150)
        hi = lo + rng.randrange(1, 120)
        runs = fl.resolve_sources(segs, lo, hi)
        got = {}
        for h, a, b in runs:
            assert lo <= a < b <= hi
            for x in range(a, b):
                assert x not in got
                got[x] = h
        assert got == brute_sources(segs, lo, hi)


def test_write_domain_assembles_file(tmp_path):
    path = os.path.join(tmp_path, "ckpt", "f")
    p = plan(10, 3)
    data = bytes(range(10))
    for i in (2, 0, 1):
        lo, hi = p.domain(i)
        fl.write_domain(path, 10, lo, data[lo:hi])
    assert open(path, "rb").read() == data


def test_write_domain_leaves_holes_zero(tmp_path):
    path = os.path.join(tmp_path, "g")
    fl.write_domain(path, 16, 8, b"x" * 4)
    assert open(path, "rb").read() == bytes(8) + b"xxxx" + bytes(4)


def test_no_servers():
    with pytest.raises(fl.FlushError):
        fl.build_plan(fl.FileMeta("f", 1, 0), [])
