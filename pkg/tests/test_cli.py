import argparse
import json
import os
import shutil
import subprocess
import sys
import time

import pytest

from burstbuf.cli import bench_main, parse_size


@pytest.mark.parametrize("text,value", [("4096", 4096), ("64MiB", 64 << 20), ("1M", 1 << 20), ("2GB", 2 * 10**9),
                                        ("16k", 16384), ("1.5KiB", 1536)])
def test_parse_size(text, value):
    assert parse_size(text) == value


@pytest.mark.parametrize("bad", ["", "x", "12parsecs", "-1"])
def test_parse_size_rejects(bad):
    with pytest.raises(argparse.ArgumentTypeError):
        parse_size(bad)


def test_bench_cli_writes_csv_and_figure(tmp_path, capsys):
    out = str(tmp_path / "report.csv")
    rc = bench_main(["--mode", "sf", "--clients", "2", "--servers", "2", "--transfer-size", "64KiB",
                     "--data-per-client", "512KiB", "--iterations", "2", "--inter-test-delay", "0",
                     "--placement", "iso", "--verify", "--out", out])
    assert rc == 0
    assert os.path.exists(out) and os.path.exists(tmp_path / "report.png")
    assert "verified" in capsys.readouterr().out


def test_bench_cli_rejects_bad_transfer(tmp_path):
    with pytest.raises(SystemExit):
        bench_main(["--transfer-size", "3KiB", "--data-per-client", "8KiB", "--out", str(tmp_path / "r.csv")])



def _script(name):
    path = os.path.join(os.path.dirname(sys.executable), name)
    if not os.path.exists(path):
        path = shutil.which(name)
    return [path] if path else None


@pytest.mark.slow
def test_daemons_and_cli_end_to_end(tmp_path):
    for name in ("bb-manager", "bb-server", "bb-cli"):
        if _script(name) is None:
            pytest.skip("console scripts not installed")
    import socket
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    maddr = f"127.0.0.1:{port}"
    procs = [subprocess.Popen(_script("bb-manager") + ["--manager-addr", maddr, "--expected-servers", "2",
                                                         "--wait-ms", "10000"],
                              stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)]
    time.sleep(0.5)
    try:
        for i in range(2):
            procs.append(subprocess.Popen(
                _script("bb-server") + ["--manager-addr", maddr, "--mem-capacity", "4MiB",
                                        "--spill-dir", str(tmp_path / f"s{i}"), "--pfs-dir", str(tmp_path / "pfs"),
                                        "--replicas", "1", "--stabilize-ms", "200"],
                stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True))
        for p in procs[1:]:
            # event-log lines may precede the banner; every line is JSON
            while True:
                line = json.loads(p.stdout.readline())
                if line["event"] == "listening":
                    break
        payload = os.urandom(300_000)
        src = tmp_path / "in.bin"
        src.write_bytes(payload)
        cli = _script("bb-cli") + ["--manager-addr", maddr]
        r = subprocess.run(cli + ["put", "demo/file", "0", "--input", str(src), "--transfer-size", "64KiB"],
                           capture_output=True, text=True, timeout=60)
        assert r.returncode == 0, r.stderr
        assert json.loads(r.stdout)["bytes"] == len(payload)
        r = subprocess.run(cli + ["get", "demo/file", "0", str(len(payload))], capture_output=True, timeout=60)
        assert r.returncode == 0 and r.stdout == payload
        r = subprocess.run(cli + ["flush"], capture_output=True, text=True, timeout=60)
        assert r.returncode == 0, r.stderr
        assert (tmp_path / "pfs" / "demo" / "file").read_bytes() == payload
    finally:
        for p in procs:
            p.terminate()
        for p in procs:
            try:
                p.wait(10)
            except subprocess.TimeoutExpired:
                p.kill()
