import os
import random

import pytest

from burstbuf.placement import RecordKey
from burstbuf.store import NotFound, StorageExhausted, Store, StoreError, Tier, WriteRecord, record_size


def rec(off, n=100, epoch=0, seq=0, client=0, fid="ckpt/a", fill=None):
    data = bytes([fill if fill is not None else off % 251]) * n
    return WriteRecord(fid, off, data, epoch, seq, client)


def test_record_size_counts_header_and_name():
    r = rec(0, 100)
    assert r.size == record_size("ckpt/a", 100) == 30 + 6 + 100
    assert len(r.encode()) == r.size


def test_memory_then_spill(tmp_path):
    r = rec(0)
    st = Store(capacity_bytes=2 * r.size, spill_dir=str(tmp_path), server_name="3")
    assert st.append(rec(0)).tier is Tier.MEMORY
    assert st.append(rec(100)).tier is Tier.MEMORY
    loc = st.append(rec(200))
    assert loc.tier is Tier.SPILL
    assert st.used_bytes == 2 * r.size
    assert os.path.basename(st.spill_path) == "bb_spill_3.log"
    assert os.path.getsize(st.spill_path) == r.size
    assert st.get(RecordKey("ckpt/a", 200), 0).payload == rec(200).payload
    st.check()


def test_zero_capacity_spills_everything(tmp_path):
    st = Store(0, str(tmp_path))
    for i in range(10):
        assert st.append(rec(i * 100)).tier is Tier.SPILL
    assert st.used_bytes == 0
    st.check()


def test_exhausted_without_spill():
    st = Store(50)
    with pytest.raises(StorageExhausted):
        st.append(rec(0))
    with pytest.raises(StorageExhausted):
        Store(0, "/tmp").append(rec(0), allow_spill=False)


def test_spill_limit(tmp_path):
    st = Store(0, str(tmp_path), spill_limit=150)
    st.append(rec(0))
    with pytest.raises(StorageExhausted):
        st.append(rec(100))


def test_latest_version_wins_and_old_space_is_freed():
    st = Store(10**6)
    st.append(rec(0, seq=1, fill=1))
    st.append(rec(0, seq=3, fill=3))
    st.append(rec(0, seq=2, fill=2))  # stale
    assert st.get(RecordKey("ckpt/a", 0), 0).payload == bytes([3]) * 100
    assert len(st) == 1
    assert st.used_bytes == rec(0).size
    st.check()


def test_epochs_are_separate_versions():
    st = Store(10**6)
    st.append(rec(0, epoch=0, fill=0))
    st.append(rec(0, epoch=1, fill=1))
    assert st.get(RecordKey("ckpt/a", 0), 0).payload[0] == 0
    assert st.get(RecordKey("ckpt/a", 0), 1).payload[0] == 1
    with pytest.raises(NotFound):
        st.get(RecordKey("ckpt/a", 0), 2)
    segs = st.scan_file("ckpt/a", epoch=0)
    assert [(s.offset, s.epoch) for s in segs] == [(0, 0)]
    assert [s.epoch for s in st.scan_file("ckpt/a")] == [1]


def test_resend_keeps_the_stored_copy():
    st = Store(10**6)
    a = st.append(rec(0, seq=5), chain=(1, 2))
    b = st.append(rec(0, seq=5), chain=(4, 5))
    assert a == b
    assert st.entries()[0].chain == (1, 2)


def test_scan_file_sorted_by_offset():
    st = Store(10**6)
    for off in [500, 0, 300, 100]:
        st.append(rec(off))
    st.append(rec(0, fid="other"))
    assert [s.offset for s in st.scan_file("ckpt/a")] == [0, 100, 300, 500]
    assert sorted(st.files()) == ["ckpt/a", "other"]


def test_purge_releases_memory(tmp_path):
    st = Store(1000, str(tmp_path))
    for i in range(20):
        st.append(rec(i * 100, epoch=i % 2))
    n = st.purge(lambda e: e.epoch == 0)
    assert n == 10 and len(st) == 10
    st.check()
    assert st.append(rec(5000)).tier is Tier.MEMORY


def test_random_workload_against_dict_oracle(tmp_path):
    rng = random.Random(3)
    st = Store(20000, str(tmp_path))
    oracle = {}
    for i in range(2000):
        off = rng.randrange(50) * 64
        epoch = rng.randrange(3)
        seq = rng.randrange(10**6)
        data = rng.randbytes(rng.randrange(1, 200))
        st.append(WriteRecord("f", off, data, epoch, seq, 1))
        cur = oracle.get((off, epoch))
        if cur is None or (seq, 1) > cur[0]:
            oracle[(off, epoch)] = ((seq, 1), data)
        if i % 97 == 0:
            dead = rng.randrange(3)
            st.purge(lambda e: e.epoch == dead)
            oracle = {k: v for k, v in oracle.items() if k[1] != dead}
    for (off, epoch), (_, data) in oracle.items():
        assert st.get(RecordKey("f", off), epoch).payload == data
    assert len(st) == len(oracle)
    st.check()


def test_closed_store_refuses_spill(tmp_path):
    st = Store(0, str(tmp_path))
    st.close()
    with pytest.raises(StoreError):
        st.append(rec(0))


def test_spill_file_named_after_server_id(tmp_path):
    st = Store(0, str(tmp_path), server_name="127.0.0.1_9")
    st.set_name(4)
    st.append(rec(0))
    st.set_name(5)  # too late, already spilled
    assert os.listdir(tmp_path) == ["bb_spill_4.log"]
