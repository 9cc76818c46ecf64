"""Command-line entry points: bb-server, bb-manager, bb-bench and bb-cli."""

from __future__ import annotations

import argparse
import json
import logging
import re
import signal
import sys
import threading

_UNITS = {"": 1, "b": 1, "k": 1 << 10, "kb": 10**3, "kib": 1 << 10, "m": 1 << 20, "mb": 10**6, "mib": 1 << 20,
          "g": 1 << 30, "gb": 10**9, "gib": 1 << 30, "t": 1 << 40, "tib": 1 << 40}


def parse_size(text: str) -> int:
    """``4096``, ``64MiB``, ``1M`` (binary), ``2GB`` (decimal)."""
    m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*([a-zA-Z]*)\s*", str(text))
    if not m or m.group(2).lower() not in _UNITS:
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    return int(float(m.group(1)) * _UNITS[m.group(2).lower()])


def _logging(level: str, events: bool = True):
    logging.basicConfig(level=getattr(logging, level.upper()), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    ev = logging.getLogger("burstbuf.events")
    ev.propagate = False
    if events:
        h = logging.StreamHandler(sys.stdout)
        h.setFormatter(logging.Formatter("%(message)s"))
        ev.addHandler(h)
        ev.setLevel(logging.INFO)


def _wait_for_signal():
    done = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: done.set())
    while not done.wait(1.0):
        pass


def server_main(argv=None):
    from .server import Server, ServerConfig

    p = argparse.ArgumentParser(prog="bb-server", description="burst buffer server daemon")
    p.add_argument("--listen-addr", default="127.0.0.1:0")
    p.add_argument("--manager-addr", required=True)
    p.add_argument("--mem-capacity", type=parse_size, default="1GiB")
    p.add_argument("--spill-dir", required=True)
    p.add_argument("--pfs-dir", required=True)
    p.add_argument("--replicas", type=int, default=2)
    p.add_argument("--successors", type=int, default=2)
    p.add_argument("--stabilize-ms", type=int, default=500)
    p.add_argument("--no-redirect", action="store_true", help="spill locally instead of redirecting on overload")
    p.add_argument("--spill-sync", action="store_true", help="fdatasync every spilled record")
    p.add_argument("--join-after", type=int, default=None, help="join a formed ring after this ordinal")
    p.add_argument("--log-level", default="warning")
    a = p.parse_args(argv)
    _logging(a.log_level)
    try:
        cfg = ServerConfig(listen_addr=a.listen_addr, manager_addr=a.manager_addr, mem_capacity=a.mem_capacity,
                           spill_dir=a.spill_dir, pfs_dir=a.pfs_dir, replicas=a.replicas, successors=a.successors,
                           stabilize_ms=a.stabilize_ms, redirect=not a.no_redirect, spill_sync=a.spill_sync,
                           join_after=a.join_after)
    except ValueError as e:
        p.error(str(e))
    server = Server(cfg).start()
    print(json.dumps({"event": "listening", "address": server.address, "id": server.core.me.id}), flush=True)
    _wait_for_signal()
    server.stop()
    return 0


def manager_main(argv=None):
    from .manager import Manager

    p = argparse.ArgumentParser(prog="bb-manager", description="burst buffer ring manager")
    p.add_argument("--manager-addr", default="127.0.0.1:7400")
    p.add_argument("--expected-servers", type=int, default=None,
                   help="form the ring as soon as this many servers registered")
    p.add_argument("--wait-ms", type=int, default=3000, help="form the ring after this long regardless")
    p.add_argument("--successors", type=int, default=2)
    p.add_argument("--log-level", default="warning")
    a = p.parse_args(argv)
    _logging(a.log_level)
    m = Manager(a.manager_addr, a.expected_servers, a.wait_ms, a.successors).start()
    print(json.dumps({"event": "listening", "address": m.address}), flush=True)
    _wait_for_signal()
    m.stop()
    return 0


def bench_main(argv=None):
    from . import bench

    p = argparse.ArgumentParser(prog="bb-bench", description="IOR-style bursty checkpoint benchmark")
    p.add_argument("--mode", choices=["sf", "sfp"], default="sf")
    p.add_argument("--clients", type=int, default=4)
    p.add_argument("--servers", type=int, default=4)
    p.add_argument("--transfer-size", type=parse_size, default="1MiB")
    p.add_argument("--data-per-client", type=parse_size, default="64MiB")
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--inter-test-delay", type=float, default=20.0)
    p.add_argument("--backend", choices=["bb", "direct"], default="bb")
    p.add_argument("--placement", choices=["ketama", "iso"], default="ketama")
    p.add_argument("--verify", action="store_true")
    p.add_argument("--out", default="report.csv")
    p.add_argument("--mem-capacity", type=parse_size, default=None, help="per-server memory tier")
    p.add_argument("--replicas", type=int, default=0)
    p.add_argument("--no-redirect", action="store_true")
    p.add_argument("--spill-sync", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workdir", default=None)
    p.add_argument("--no-figure", action="store_true")
    p.add_argument("--tier-sweep", type=int, metavar="REPS", default=0,
                   help="instead of the workload, measure MEM/HYB/SPILL ingress REPS times")
    p.add_argument("--log-level", default="warning")
    a = p.parse_args(argv)
    _logging(a.log_level, events=False)

    if a.tier_sweep:
        return _tier_sweep(a)
    try:
        cfg = bench.BenchConfig(mode=a.mode, clients=a.clients, servers=a.servers, transfer_size=a.transfer_size,
                                data_per_client=a.data_per_client, iterations=a.iterations,
                                inter_test_delay=a.inter_test_delay, backend=a.backend, placement=a.placement,
                                verify=a.verify, mem_capacity=a.mem_capacity, replicas=a.replicas,
                                redirect=not a.no_redirect, spill_sync=a.spill_sync, seed=a.seed, workdir=a.workdir)
    except ValueError as e:
        p.error(str(e))
    report = bench.run_workload(cfg)
    fig = bench.emit_report(report, a.out, figure=not a.no_figure)
    print(report.summary())
    print(f"report: {a.out}" + (f"  figure: {fig}" if fig else ""))
    if not report.ok or report.verified is False:
        return 1
    return 0


def _tier_sweep(a) -> int:
    import csv

    from . import bench

    reps = bench.tier_sweep(total_bytes=a.data_per_client * a.clients, transfer_size=a.transfer_size,
                            clients=a.clients, repetitions=a.tier_sweep, spill_sync=a.spill_sync)
    with open(a.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["repetition", *bench.TIERS, "ordering_holds"])
        for i, rep in enumerate(reps):
            w.writerow([i, *(repr(rep[t]) for t in bench.TIERS), int(bench.tier_ordering_holds(rep))])
    for i, rep in enumerate(reps):
        cells = "  ".join(f"{t} {rep[t] / bench.MiB:7.1f}" for t in bench.TIERS)
        print(f"rep {i}: {cells} MiB/s  ordering {'holds' if bench.tier_ordering_holds(rep) else 'VIOLATED'}")
    if not a.no_figure:
        fig = bench.plot_tiers(reps, a.out.rsplit(".", 1)[0] + ".png")
        print(f"figure: {fig}")
    return 0


def cli_main(argv=None):
    from .client import Client, ClientError

    p = argparse.ArgumentParser(prog="bb-cli", description="put/get/flush against a running burst buffer")
    p.add_argument("--manager-addr", required=True)
    p.add_argument("--rank", type=int, default=0)
    p.add_argument("--placement", choices=["ketama", "iso"], default="ketama")
    p.add_argument("--epoch", type=int, default=0)
    sub = p.add_subparsers(dest="cmd", required=True)
    put = sub.add_parser("put", help="write a local file (or stdin) into the buffer")
    put.add_argument("file_id")
    put.add_argument("offset", type=parse_size)
    put.add_argument("--input", default="-")
    put.add_argument("--transfer-size", type=parse_size, default="1MiB")
    get = sub.add_parser("get", help="read a range back from the buffer")
    get.add_argument("file_id")
    get.add_argument("offset", type=parse_size)
    get.add_argument("length", type=parse_size)
    get.add_argument("--output", default="-")
    fl = sub.add_parser("flush", help="drain an epoch to the backing directory")
    fl.add_argument("--pfs-dir", default=None)
    p.add_argument("--log-level", default="warning")
    a = p.parse_args(argv)
    _logging(a.log_level, events=False)

    client = Client(a.manager_addr, a.rank, a.placement, epoch=a.epoch).open()
    try:
        if a.cmd == "put":
            data = sys.stdin.buffer.read() if a.input == "-" else open(a.input, "rb").read()
            for lo in range(0, len(data), a.transfer_size):
                client.write(a.file_id, a.offset + lo, data[lo:lo + a.transfer_size])
            client.wait()
            print(json.dumps({"file": a.file_id, "offset": a.offset, "bytes": len(data)}))
        elif a.cmd == "get":
            data = client.read(a.file_id, a.offset, a.length)
            if a.output == "-":
                sys.stdout.buffer.write(data)
            else:
                with open(a.output, "wb") as fh:
                    fh.write(data)
        else:
            print(json.dumps(client.flush(a.epoch, a.pfs_dir)))
    except ClientError as e:
        print(f"bb-cli: {e}", file=sys.stderr)
        return 1
    finally:
        client.close()
    return 0


if __name__ == "__main__":
    sys.exit(cli_main())
