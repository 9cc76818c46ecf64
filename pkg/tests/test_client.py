import os
import threading
import time

import pytest

from burstbuf import bb_close, bb_flush, bb_open, bb_read, bb_wait, bb_write
from burstbuf.client import AckWindow, NotFoundError, PendingWrite, SessionClosed
from burstbuf.cluster import LocalCluster
from burstbuf.ring import ServerList

KiB = 1024


@pytest.fixture
def cluster():
    with LocalCluster(servers=3, mem_capacity=8 << 20, replicas=1) as cl:
        yield cl


def test_ack_window_blocks_when_full():
    w = AckWindow(2)
    w.add(1, PendingWrite(None, None, 0.0))
    w.add(2, PendingWrite(None, None, 0.0))
    done = threading.Event()

    def third():
        w.add(3, PendingWrite(None, None, 0.0))
        done.set()

    threading.Thread(target=third, daemon=True).start()
    assert not done.wait(0.1)
    w.complete(1)
    assert done.wait(2)
    assert len(w) == 2
    assert not w.wait_empty(timeout=0.05)


def test_write_wait_read_your_writes(cluster):
    s = bb_open(cluster.manager_addr, rank=0)
    blobs = {i * 64 * KiB: os.urandom(64 * KiB) for i in range(20)}
    for off, b in blobs.items():
        bb_write(s, "ckpt/one", off, b)
    bb_wait(s)
    assert len(s.window) == 0
    assert bb_read(s, "ckpt/one", 0, 20 * 64 * KiB) == b"".join(blobs[o] for o in sorted(blobs))
    assert bb_read(s, "ckpt/one", 100, 50) == blobs[0][100:150]
    bb_close(s)
    with pytest.raises(SessionClosed):
        bb_write(s, "ckpt/one", 0, b"x")


def test_holes_read_back_as_zeros(cluster):
    s = cluster.client(0)
    s.write("sparse", 0, b"a" * KiB)
    s.write("sparse", 3 * KiB, b"b" * KiB)
    s.wait()
    assert s.read("sparse", 0, 4 * KiB) == b"a" * KiB + bytes(2 * KiB) + b"b" * KiB


def test_unknown_file_raises(cluster):
    s = cluster.client(0)
    with pytest.raises(NotFoundError):
        s.read("missing", 0, 10)


def test_flush_writes_pfs_and_bumps_epoch(cluster):
    a, b = cluster.client(0, "iso"), cluster.client(1, "iso")
    for r, c in enumerate((a, b)):
        for i in range(8):
            c.write("ckpt/shared", (i * 2 + r) * 32 * KiB, bytes([r + 1]) * 32 * KiB)
    a.wait()
    b.wait()
    res = bb_flush(a)
    assert res["files"]["ckpt/shared"] == 16 * 32 * KiB
    assert a.epoch == 1
    data = open(os.path.join(cluster.pfs_dir, "ckpt", "shared"), "rb").read()
    assert data == (bytes([1]) * 32 * KiB + bytes([2]) * 32 * KiB) * 8
    assert a.read("ckpt/shared", 32 * KiB, 32 * KiB) == bytes([2]) * 32 * KiB


def test_false_alarm_resends(cluster):
    s = cluster.client(0, ack_timeout=0.5)
    target = s.server_list.servers[1]
    sl = s.detect_failure(target)
    assert s.stats["false_alarms"] == 1
    assert sl.version == 0 and target in s.server_list.servers


def test_server_list_only_moves_forward(cluster):
    s = cluster.client(0)
    cur = s.server_list
    assert not s._apply_server_list(ServerList(cur.version, cur.servers[:1]))
    assert s.server_list is cur


def test_killed_server_is_routed_around():
    with LocalCluster(servers=4, replicas=1, stabilize_ms=100) as cl:
        s = cl.client(0, ack_timeout=1.0)
        blobs = {}
        for i in range(16):
            blobs[i * 16 * KiB] = os.urandom(16 * KiB)
            s.write("ckpt/k", i * 16 * KiB, blobs[i * 16 * KiB])
        s.wait()
        victim = s.server_list.servers[2]
        cl.kill(next(i for i, srv in enumerate(cl.servers) if srv.core.me == victim))
        for i in range(16, 32):
            blobs[i * 16 * KiB] = os.urandom(16 * KiB)
            s.write("ckpt/k", i * 16 * KiB, blobs[i * 16 * KiB])
        s.wait()
        deadline = time.time() + 10
        while victim in s.server_list.servers and time.time() < deadline:
            time.sleep(0.05)
        assert victim not in s.server_list.servers
        assert s.read("ckpt/k", 0, 32 * 16 * KiB) == b"".join(blobs[o] for o in sorted(blobs))


def test_join_adds_capacity():
    with LocalCluster(servers=2, stabilize_ms=100) as cl:
        s = cl.client(0)
        cl.join(predecessor=0)
        deadline = time.time() + 10
        while len(s.server_list.servers) < 3 and time.time() < deadline:
            time.sleep(0.05)
        assert len(s.server_list.servers) == 3
        for i in range(30):
            s.write("ckpt/j", i * KiB, bytes([i]) * KiB)
        s.wait()
        assert s.read("ckpt/j", 29 * KiB, KiB) == bytes([29]) * KiB
