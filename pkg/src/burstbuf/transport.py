"""Framed byte-stream transport over TCP.

Each :class:`Connection` owns one reader thread and one writer thread.  Sends
are queued so a handler never blocks on a slow peer.  Requests made through
:meth:`Connection.request` use sequence numbers with the top bit set and are
matched to the reply that echoes the same seq; every other frame goes to the
connection's handler.
"""

from __future__ import annotations

import itertools
import logging
import queue
import socket
import threading
from typing import Callable

from .wire import (HEADER_SIZE, MAX_PAYLOAD, Frame, MsgType, ProtocolError, encode_frame,
                   parse_header)

log = logging.getLogger(__name__)

REQUEST_BIT = 1 << 63
_request_ids = itertools.count(1)


class TransportError(Exception):
    pass


class Unreachable(TransportError):
    pass


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            return None
        got += k
    return bytes(buf)


def read_frame(sock: socket.socket, max_payload: int = MAX_PAYLOAD) -> Frame | None:
    header = _recv_exact(sock, HEADER_SIZE)
    if header is None:
        return None
    msg_type, seq, n = parse_header(header, max_payload)
    payload = _recv_exact(sock, n) if n else b""
    if payload is None:
        return None
    return Frame(msg_type, seq, payload)


Handler = Callable[["Connection", Frame], None]


class Connection:
    def __init__(self, sock: socket.socket, handler: Handler | None = None, name: str = "",
                 on_close: Callable[["Connection"], None] | None = None, max_payload: int = MAX_PAYLOAD):
        self.sock = sock
        self.handler = handler
        self.name = name
        self.on_close = on_close
        self.max_payload = max_payload
        self.closed = threading.Event()
        self._out: queue.Queue = queue.Queue()
        self._waiters: dict[int, list] = {}
        self._lock = threading.Lock()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._reader = threading.Thread(target=self._read_loop, name=f"rd-{name}", daemon=True)
        self._writer = threading.Thread(target=self._write_loop, name=f"wr-{name}", daemon=True)

    @classmethod
    def connect(cls, addr: str, handler: Handler | None = None, timeout: float = 5.0, **kw) -> "Connection":
        try:
            sock = socket.create_connection(parse_addr(addr), timeout=timeout)
        except OSError as e:
            raise Unreachable(f"{addr}: {e}") from e
        sock.settimeout(None)
        conn = cls(sock, handler, name=addr, **kw)
        conn.start()
        return conn

    def start(self):
        self._reader.start()
        self._writer.start()

    def send(self, msg_type: MsgType, seq: int, payload: bytes = b""):
        if self.closed.is_set():
            raise Unreachable(f"connection {self.name} closed")
        self._out.put(encode_frame(msg_type, seq, payload))

    def reply(self, request: Frame, msg_type: MsgType, payload: bytes = b""):
        self.send(msg_type, request.seq, payload)

    def request(self, msg_type: MsgType, payload: bytes = b"", timeout: float | None = 5.0) -> Frame:
        seq = REQUEST_BIT | next(_request_ids)
        slot = [threading.Event(), None]
        with self._lock:
            self._waiters[seq] = slot
        try:
            self.send(msg_type, seq, payload)
            if not slot[0].wait(timeout):
                raise TimeoutError(f"{self.name}: no reply to {msg_type.name} within {timeout}s")
            if slot[1] is None:
                raise Unreachable(f"connection {self.name} closed")
            return slot[1]
        finally:
            with self._lock:
                self._waiters.pop(seq, None)

    def close(self):
        if self.closed.is_set():
            return
        self.closed.set()
        self._out.put(None)
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        with self._lock:
            waiters = list(self._waiters.values())
        for slot in waiters:
            slot[0].set()
        if self.on_close:
            self.on_close(self)

    def _read_loop(self):
        try:
            while True:
                frame = read_frame(self.sock, self.max_payload)
                if frame is None:
                    break
                if frame.seq & REQUEST_BIT:
                    with self._lock:
                        slot = self._waiters.get(frame.seq)
                    if slot is not None:
                        slot[1] = frame
                        slot[0].set()
                        continue
                if self.handler is not None:
                    try:
                        self.handler(self, frame)
                    except Exception:
                        log.exception("%s: handler failed on %s", self.name, frame.msg_type.name)
        except ProtocolError as e:
            log.warning("%s: dropping connection: %s", self.name, e)
        except OSError:
            pass
        finally:
            self.close()

    def _write_loop(self):
        while True:
            data = self._out.get()
            if data is None:
                return
            try:
                self.sock.sendall(data)
            except OSError:
                self.close()
                return


class Listener:
    """Accepts connections and hands every inbound frame to ``handler``."""

    def __init__(self, addr: str, handler: Handler, name: str = "listener"):
        host, port = parse_addr(addr)
        self.sock = socket.create_server((host, port), reuse_port=False)
        self.address = f"{host}:{self.sock.getsockname()[1]}"
        self.handler = handler
        self.name = name
        self.conns: set[Connection] = set()
        self._lock = threading.Lock()
        self._stopped = threading.Event()
        self._thread = threading.Thread(target=self._accept_loop, name=f"accept-{name}", daemon=True)

    def start(self):
        self._thread.start()
        return self

    def _accept_loop(self):
        while not self._stopped.is_set():
            try:
                sock, peer = self.sock.accept()
            except OSError:
                return
            if self._stopped.is_set():
                sock.close()
                return
            conn = Connection(sock, self.handler, name=f"{self.name}<-{peer[0]}:{peer[1]}",
                              on_close=self._forget)
            with self._lock:
                self.conns.add(conn)
            conn.start()

    def _forget(self, conn):
        with self._lock:
            self.conns.discard(conn)

    def stop(self):
        self._stopped.set()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        with self._lock:
            conns = list(self.conns)
        for c in conns:
            c.close()


class PeerPool:
    """One cached outbound connection per peer address."""

    def __init__(self, handler: Handler | None = None, connect_timeout: float = 2.0):
        self.handler = handler
        self.connect_timeout = connect_timeout
        self._conns: dict[str, Connection] = {}
        self._lock = threading.Lock()

    def get(self, addr: str) -> Connection:
        with self._lock:
            conn = self._conns.get(addr)
            if conn is not None and not conn.closed.is_set():
                return conn
        conn = Connection.connect(addr, self.handler, timeout=self.connect_timeout, on_close=self._drop)
        with self._lock:
            old = self._conns.get(addr)
            if old is None or old.closed.is_set():
                self._conns[addr] = conn
                return conn
        # lost a connect race; close outside the lock (close calls _drop)
        conn.close()
        return old

    def _drop(self, conn):
        with self._lock:
            if self._conns.get(conn.name) is conn:
                del self._conns[conn.name]

    def request(self, addr: str, msg_type: MsgType, payload: bytes = b"", timeout: float | None = 5.0) -> Frame:
        try:
            return self.get(addr).request(msg_type, payload, timeout)
        except (TimeoutError, OSError) as e:
            raise Unreachable(f"{addr}: {e}") from e

    def send(self, addr: str, msg_type: MsgType, seq: int, payload: bytes = b""):
        self.get(addr).send(msg_type, seq, payload)

    def close(self):
        with self._lock:
            conns = list(self._conns.values())
            self._conns.clear()
        for c in conns:
            c.close()
