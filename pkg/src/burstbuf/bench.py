"""IOR-style bursty checkpoint workload driver.

Every iteration each client writes ``data_per_client`` bytes in
``transfer_size`` units, waits for its ACKs, then one flush drains the epoch
to the backing directory.  SF mode interleaves all ranks into one shared file
(offset ``rank*ts + i*clients*ts``); SFP gives every rank its own file.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import os
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .cluster import ClusterConfig, LocalCluster

log = logging.getLogger(__name__)

MiB = 1024 * 1024

CSV_COLUMNS = ["kind", "iteration", "client", "bytes", "seconds", "bandwidth_Bps", "min_client_Bps",
               "max_client_Bps", "flush_seconds", "digest", "verified"]


class BenchError(Exception):
    pass


@dataclass
class BenchConfig:
    mode: str = "sf"
    clients: int = 4
    servers: int = 4
    transfer_size: int = MiB
    data_per_client: int = 64 * MiB
    iterations: int = 10
    inter_test_delay: float = 20.0
    backend: str = "bb"
    placement: str = "ketama"
    verify: bool = False
    mem_capacity: int | None = None
    replicas: int = 0
    redirect: bool = True
    spill_sync: bool = False
    seed: int = 0
    workdir: str | None = None

    def __post_init__(self):
        self.mode = self.mode.lower()
        self.backend = self.backend.lower()
        if self.mode not in ("sf", "sfp"):
            raise ValueError(f"mode must be sf or sfp, not {self.mode!r}")
        if self.backend not in ("bb", "direct"):
            raise ValueError(f"backend must be bb or direct, not {self.backend!r}")
        if self.clients < 1 or self.servers < 1:
            raise ValueError("need at least one client and one server")
        if self.transfer_size <= 0 or self.data_per_client % self.transfer_size:
            raise ValueError("transfer_size must divide data_per_client")

    @property
    def transfers(self) -> int:
        return self.data_per_client // self.transfer_size

    def file_for(self, rank: int) -> str:
        return "ior/shared" if self.mode == "sf" else f"ior/rank{rank:05d}"

    def offset(self, rank: int, i: int) -> int:
        ts = self.transfer_size
        if self.mode == "sf":
            return rank * ts + i * self.clients * ts
        return i * ts

    def files(self) -> list[str]:
        return sorted({self.file_for(r) for r in range(self.clients)})


@dataclass
class ClientResult:
    iteration: int
    client: int
    bytes: int
    seconds: float

    @property
    def bandwidth(self) -> float:
        return self.bytes / self.seconds if self.seconds > 0 else 0.0


@dataclass
class IterationResult:
    iteration: int
    bytes: int
    seconds: float
    min_client: float
    max_client: float
    flush_seconds: float
    digest: str = ""
    verified: bool | None = None

    @property
    def bandwidth(self) -> float:
        return self.bytes / self.seconds if self.seconds > 0 else 0.0


@dataclass
class BenchReport:
    config: dict = field(default_factory=dict)
    clients: list[ClientResult] = field(default_factory=list)
    iterations: list[IterationResult] = field(default_factory=list)
    ok: bool = True
    error: str = ""

    @property
    def total_bytes(self) -> int:
        return sum(it.bytes for it in self.iterations)

    @property
    def mean_bandwidth(self) -> float:
        if not self.iterations:
            return 0.0
        return float(np.mean([it.bandwidth for it in self.iterations]))

    @property
    def verified(self) -> bool | None:
        flags = [it.verified for it in self.iterations if it.verified is not None]
        return all(flags) if flags else None

    def summary(self) -> str:
        c = self.config
        lines = [f"{c.get('backend', '?')}/{c.get('mode', '?')} {c.get('clients')} clients x {c.get('servers')} servers, "
                 f"{c.get('placement')} placement"]
        for it in self.iterations:
            v = "" if it.verified is None else ("  verified" if it.verified else "  MISMATCH")
            lines.append(f"  iter {it.iteration}: {it.bandwidth / MiB:9.1f} MiB/s  flush {it.flush_seconds:6.2f}s{v}")
        lines.append(f"  mean ingress {self.mean_bandwidth / MiB:.1f} MiB/s over {len(self.iterations)} iterations"
                     + ("" if self.ok else f"  FAILED: {self.error}"))
        return "\n".join(lines)


def client_payload(cfg: BenchConfig, iteration: int, rank: int) -> bytes:
    """Deterministic data for one client in one iteration."""
    return np.random.default_rng([cfg.seed, iteration, rank]).bytes(cfg.data_per_client)


def oracle_files(cfg: BenchConfig, iteration: int) -> dict[str, bytes]:
    """The bytes each file must hold after ``iteration`` is flushed."""
    ts = cfg.transfer_size
    out: dict[str, bytearray] = {}
    for rank in range(cfg.clients):
        data = client_payload(cfg, iteration, rank)
        f = cfg.file_for(rank)
        buf = out.setdefault(f, bytearray())
        for i in range(cfg.transfers):
            off = cfg.offset(rank, i)
            if len(buf) < off + ts:
                buf.extend(bytes(off + ts - len(buf)))
            buf[off:off + ts] = data[i * ts:(i + 1) * ts]
    return {f: bytes(b) for f, b in out.items()}


def digest_files(files: dict[str, bytes] | None = None, root: str | None = None, names=()) -> str:
    """One sha-256 over the named files in name order (file name, then contents)."""
    h = hashlib.sha256()
    if files is not None:
        for name in sorted(files):
            h.update(name.encode() + b"\0")
            h.update(files[name])
        return h.hexdigest()
    for name in sorted(names):
        h.update(name.encode() + b"\0")
        with open(os.path.join(root, name), "rb") as fh:
            for chunk in iter(lambda: fh.read(8 * MiB), b""):
                h.update(chunk)
    return h.hexdigest()


class _Backend:
    pfs_dir: str

    def open(self, rank: int):
        raise NotImplementedError

    def write(self, handle, file_id: str, offset: int, data) -> None:
        raise NotImplementedError

    def wait(self, handle) -> None:
        pass

    def flush(self, epoch: int) -> None:
        pass

    def close(self):
        pass


class _DirectBackend(_Backend):
    """pwrite straight into the backing directory, fsync at the end of each burst."""

    def __init__(self, workdir: str):
        self.pfs_dir = os.path.join(workdir, "pfs")
        os.makedirs(self.pfs_dir, exist_ok=True)

    def open(self, rank: int):
        return {}

    def write(self, handle, file_id, offset, data):
        fd = handle.get(file_id)
        if fd is None:
            path = os.path.join(self.pfs_dir, file_id)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            fd = handle[file_id] = os.open(path, os.O_WRONLY | os.O_CREAT, 0o644)
        os.pwrite(fd, data, offset)

    def wait(self, handle):
        for fd in handle.values():
            os.fsync(fd)
            os.close(fd)
        handle.clear()


class _BurstBufferBackend(_Backend):
    def __init__(self, cfg: BenchConfig, workdir: str):
        cap = cfg.mem_capacity
        if cap is None:
            # enough for one epoch plus the retained shuffled copies
            cap = 4 * cfg.clients * cfg.data_per_client // cfg.servers + 64 * MiB
        self.cluster = LocalCluster(ClusterConfig(servers=cfg.servers, mem_capacity=cap, replicas=cfg.replicas,
                                                  successors=max(2, cfg.replicas), redirect=cfg.redirect,
                                                  spill_sync=cfg.spill_sync, workdir=workdir)).start()
        self.pfs_dir = self.cluster.pfs_dir
        self.placement = cfg.placement
        self._first = None

    def open(self, rank):
        c = self.cluster.client(rank, self.placement)
        if self._first is None:
            self._first = c
        return c

    def write(self, handle, file_id, offset, data):
        handle.write(file_id, offset, data)

    def wait(self, handle):
        handle.wait()

    def flush(self, epoch):
        self._first.flush(epoch)

    def close(self):
        self.cluster.close()


def run_workload(cfg: BenchConfig, sleep=time.sleep) -> BenchReport:
    report = BenchReport(config=asdict(cfg))
    tmp = None
    workdir = cfg.workdir
    if workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix="bb-bench-")
        workdir = tmp.name
    backend = None
    try:
        backend = _BurstBufferBackend(cfg, workdir) if cfg.backend == "bb" else _DirectBackend(workdir)
        handles = [backend.open(r) for r in range(cfg.clients)]
        for it in range(cfg.iterations):
            _run_iteration(cfg, backend, handles, it, report)
            if it + 1 < cfg.iterations and cfg.inter_test_delay > 0:
                sleep(cfg.inter_test_delay)
    except Exception as e:
        log.exception("benchmark aborted")
        report.ok = False
        report.error = f"{type(e).__name__}: {e}"
    finally:
        if backend is not None:
            backend.close()
        if tmp is not None:
            tmp.cleanup()
    return report


def _run_iteration(cfg: BenchConfig, backend: _Backend, handles, it: int, report: BenchReport, flush: bool = True):
    payloads = [client_payload(cfg, it, r) for r in range(cfg.clients)]
    for h in handles:
        if hasattr(h, "epoch"):
            h.epoch = it
    barrier = threading.Barrier(cfg.clients)
    times = [0.0] * cfg.clients
    errors: list[BaseException] = []
    ts = cfg.transfer_size

    def worker(rank):
        try:
            view = memoryview(payloads[rank])
            f = cfg.file_for(rank)
            barrier.wait()
            t0 = time.perf_counter()
            for i in range(cfg.transfers):
                backend.write(handles[rank], f, cfg.offset(rank, i), view[i * ts:(i + 1) * ts])
            backend.wait(handles[rank])
            times[rank] = time.perf_counter() - t0
        except BaseException as e:
            errors.append(e)
            barrier.abort()

    threads = [threading.Thread(target=worker, args=(r,), name=f"bench-{r}") for r in range(cfg.clients)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise BenchError(f"iteration {it}: {errors[0]}") from errors[0]
    t0 = time.perf_counter()
    if flush:
        backend.flush(it)
    flush_s = time.perf_counter() - t0
    for r in range(cfg.clients):
        report.clients.append(ClientResult(it, r, cfg.data_per_client, times[r]))
    bws = [cfg.data_per_client / t for t in times if t > 0]
    total = cfg.clients * cfg.data_per_client
    res = IterationResult(it, total, max(times), min(bws, default=0.0), max(bws, default=0.0), flush_s)
    if flush:
        res.digest = digest_files(root=backend.pfs_dir, names=cfg.files())
    if flush and cfg.verify:
        res.verified = res.digest == digest_files(oracle_files(cfg, it))
    report.iterations.append(res)
    log.info("iteration %d: %.1f MiB/s, flush %.2fs", it, res.bandwidth / MiB, flush_s)


# -- reports ------------------------------------------------------------------

def emit_report(report: BenchReport, path: str, figure: bool = True) -> str | None:
    """Write the CSV (and a PNG figure next to it, unless disabled).  Returns the figure path."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for c in report.clients:
            w.writerow(["client", c.iteration, c.client, c.bytes, repr(c.seconds), repr(c.bandwidth),
                        "", "", "", "", ""])
        for it in report.iterations:
            w.writerow(["iteration", it.iteration, "", it.bytes, repr(it.seconds), repr(it.bandwidth),
                        repr(it.min_client), repr(it.max_client), repr(it.flush_seconds), it.digest,
                        "" if it.verified is None else int(it.verified)])
        if report.iterations:
            w.writerow(["aggregate", "", "", report.total_bytes, "", repr(report.mean_bandwidth), "", "", "",
                        "", "" if report.verified is None else int(report.verified)])
    if not figure or not report.iterations:
        return None
    fig_path = os.path.splitext(path)[0] + ".png"
    plot_report(report, fig_path)
    return fig_path


def read_report(path: str) -> BenchReport:
    report = BenchReport()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["kind"] == "client":
                report.clients.append(ClientResult(int(row["iteration"]), int(row["client"]), int(row["bytes"]),
                                                   float(row["seconds"])))
            elif row["kind"] == "iteration":
                v = row["verified"]
                report.iterations.append(IterationResult(
                    int(row["iteration"]), int(row["bytes"]), float(row["seconds"]), float(row["min_client_Bps"]),
                    float(row["max_client_Bps"]), float(row["flush_seconds"]), row["digest"],
                    None if v == "" else bool(int(v))))
    return report


def plot_report(report: BenchReport, path: str):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import matplotlib.ticker

    its = [it.iteration for it in report.iterations]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(its, [it.bandwidth / MiB for it in report.iterations], "o-", label="aggregate ingress")
    for rank in sorted({c.client for c in report.clients}):
        pts = [(c.iteration, c.bandwidth / MiB) for c in report.clients if c.client == rank]
        ax.plot(*zip(*pts), ".", alpha=0.5, label=f"client {rank}")
    ax.xaxis.set_major_locator(matplotlib.ticker.MaxNLocator(integer=True))
    ax.set_xlabel("iteration")
    ax.set_ylabel("MiB/s")
    c = report.config
    if c:
        ax.set_title(f"{c.get('backend')} {c.get('mode')} {c.get('placement')}: "
                     f"{c.get('clients')} clients, {c.get('servers')} servers")
    ax.legend(fontsize="small", ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# -- storage-tier sweep -------------------------------------------------------

TIERS = ("MEM", "HYB", "SPILL")


def tier_sweep(total_bytes: int = 64 * MiB, transfer_size: int = 16 * 1024, clients: int = 2,
               repetitions: int = 5, spill_sync: bool = True) -> list[dict[str, float]]:
    """Ingress bandwidth of one server with all, half and none of the data fitting in memory.

    Redirect is off so overflow spills locally (the hybrid mode).  Returns one
    ``{tier: bytes/s}`` dict per repetition.
    """
    per = total_bytes // clients
    caps = {"MEM": 2 * total_bytes, "HYB": total_bytes // 2, "SPILL": 0}
    out = []
    for _ in range(repetitions):
        rep = {}
        for tier in TIERS:
            cfg = BenchConfig(mode="sfp", clients=clients, servers=1, transfer_size=transfer_size,
                              data_per_client=per, iterations=1, inter_test_delay=0, placement="iso",
                              mem_capacity=caps[tier], redirect=False, spill_sync=spill_sync)
            rep[tier] = _ingest_only(cfg)
        out.append(rep)
    return out


def _ingest_only(cfg: BenchConfig) -> float:
    """Bandwidth of one write burst, without the flush."""
    with tempfile.TemporaryDirectory(prefix="bb-tier-") as wd:
        backend = _BurstBufferBackend(cfg, wd)
        try:
            handles = [backend.open(r) for r in range(cfg.clients)]
            report = BenchReport(config=asdict(cfg))
            _run_iteration(cfg, backend, handles, 0, report, flush=False)
        finally:
            backend.close()
    return report.iterations[0].bandwidth


def tier_ordering_holds(rep: dict[str, float], gap: float = 0.10) -> bool:
    """MEM >= HYB >= SPILL with each step at least ``gap`` (relative to the faster tier)."""
    return rep["HYB"] <= (1 - gap) * rep["MEM"] and rep["SPILL"] <= (1 - gap) * rep["HYB"]


def plot_tiers(reps: list[dict[str, float]], path: str) -> str:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(len(TIERS))
    for i, rep in enumerate(reps):
        ax.plot(xs, [rep[t] / MiB for t in TIERS], "o-", alpha=0.7, label=f"rep {i}")
    ax.set_xticks(xs, TIERS)
    ax.set_ylabel("ingress MiB/s")
    ax.set_title("memory, hybrid and spill-only ingress")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
