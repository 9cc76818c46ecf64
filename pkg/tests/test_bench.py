import os

import pytest

from burstbuf import bench
from burstbuf.bench import BenchConfig, BenchReport, MiB

KiB = 1024


def small(**kw):
    base = dict(clients=2, servers=2, transfer_size=64 * KiB, data_per_client=MiB, iterations=1,
                inter_test_delay=0, verify=True)
    base.update(kw)
    return BenchConfig(**base)


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        small(mode="xx")
    with pytest.raises(ValueError):
        small(backend="lustre")
    with pytest.raises(ValueError):
        small(transfer_size=3 * KiB)
    with pytest.raises(ValueError):
        small(clients=0)


def test_sf_offsets_are_strided_and_tile_the_file():
    cfg = small(clients=3, transfer_size=4, data_per_client=12)
    offs = sorted(cfg.offset(r, i) for r in range(3) for i in range(cfg.transfers))
    assert offs == list(range(0, 36, 4))
    assert cfg.offset(1, 0) == 4 and cfg.offset(1, 1) == 16
    assert cfg.files() == ["ior/shared"]
    sfp = small(mode="sfp", clients=3)
    assert sfp.files() == ["ior/rank00000", "ior/rank00001", "ior/rank00002"]
    assert sfp.offset(2, 3) == 3 * sfp.transfer_size


def test_oracle_layout():
    cfg = small(clients=2, transfer_size=4, data_per_client=8)
    f = bench.oracle_files(cfg, 0)["ior/shared"]
    a, b = bench.client_payload(cfg, 0, 0), bench.client_payload(cfg, 0, 1)
    assert f == a[:4] + b[:4] + a[4:] + b[4:]
    assert bench.client_payload(cfg, 1, 0) != a


def test_digest_of_files_matches_digest_of_dict(tmp_path):
    files = {"x/a": b"hello", "b": b"world"}
    for name, data in files.items():
        os.makedirs(os.path.dirname(tmp_path / name), exist_ok=True)
        (tmp_path / name).write_bytes(data)
    assert bench.digest_files(files) == bench.digest_files(root=str(tmp_path), names=files)
    assert bench.digest_files({"a": b"x"}) != bench.digest_files({"b": b"x"})


def test_single_client_single_server():
    rep = bench.run_workload(small(clients=1, servers=1, data_per_client=4 * MiB, transfer_size=MiB))
    assert rep.ok, rep.error
    assert rep.verified is True
    assert rep.total_bytes == 4 * MiB and rep.mean_bandwidth > 0


@pytest.mark.parametrize("mode", ["sf", "sfp"])
def test_burst_buffer_matches_direct(mode):
    bb = bench.run_workload(small(mode=mode, iterations=2))
    direct = bench.run_workload(small(mode=mode, iterations=2, backend="direct"))
    assert bb.ok and direct.ok
    assert [i.digest for i in bb.iterations] == [i.digest for i in direct.iterations]
    assert bb.verified and direct.verified


def test_failure_is_reported_not_raised():
    # memory too small and no spill path: the redirect target is just as full
    rep = bench.run_workload(small(clients=1, servers=1, mem_capacity=64 * KiB, redirect=False))
    assert rep.ok  # spills to disk instead
    sleeps = []
    rep = bench.run_workload(small(iterations=3, inter_test_delay=1.5), sleep=sleeps.append)
    assert sleeps == [1.5, 1.5]


def test_empty_report_is_header_only(tmp_path):
    path = str(tmp_path / "r.csv")
    assert bench.emit_report(BenchReport(), path) is None
    assert open(path).read().strip() == ",".join(bench.CSV_COLUMNS)
    assert not os.path.exists(tmp_path / "r.png")


def test_report_rows_and_roundtrip(tmp_path):
    rep = BenchReport(config={"backend": "bb", "mode": "sf", "clients": 4, "servers": 4, "placement": "iso"})
    for it in range(10):
        for c in range(4):
            rep.clients.append(bench.ClientResult(it, c, MiB, 0.01 * (c + 1)))
        rep.iterations.append(bench.IterationResult(it, 4 * MiB, 0.04, 25e6, 100e6, 0.5, "ab" * 32, True))
    path = str(tmp_path / "report.csv")
    fig = bench.emit_report(rep, path)
    lines = open(path).read().splitlines()
    assert len(lines) == 1 + 40 + 10 + 1
    assert lines[-1].startswith("aggregate,")
    assert fig == str(tmp_path / "report.png") and os.path.getsize(fig) > 0
    back = bench.read_report(path)
    assert back.clients == rep.clients
    assert back.iterations == rep.iterations
    assert back.mean_bandwidth == pytest.approx(rep.mean_bandwidth)


def test_tier_ordering_rule():
    assert bench.tier_ordering_holds({"MEM": 100, "HYB": 90, "SPILL": 81})
    assert not bench.tier_ordering_holds({"MEM": 100, "HYB": 95, "SPILL": 50})
    assert not bench.tier_ordering_holds({"MEM": 100, "HYB": 50, "SPILL": 46})


def test_tier_sweep_shape(tmp_path):
    reps = bench.tier_sweep(total_bytes=2 * MiB, transfer_size=64 * KiB, clients=2, repetitions=1, spill_sync=False)
    assert len(reps) == 1 and set(reps[0]) == set(bench.TIERS)
    assert all(v > 0 for v in reps[0].values())
    assert os.path.exists(bench.plot_tiers(reps, str(tmp_path / "t.png")))
