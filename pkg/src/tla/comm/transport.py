"""Frame transports: in-process queues and TCP byte streams.

A transport moves opaque, already-encoded frames between ranks.  Incoming
frames are pushed onto the ``inbox`` queue handed to :meth:`start`; the
owning communicator drains it.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time

from ..errors import FrameError, TransportDown
from . import wire

log = logging.getLogger(__name__)


class InprocHub:
    """Shared switchboard for localities living as threads of one process."""

    def __init__(self, world: int):
        if world < 1:
            raise ValueError("world size must be positive")
        self.world = world
        self._inboxes: list[queue.Queue | None] = [None] * world
        self._lock = threading.Lock()

    def transport(self, rank: int) -> "InprocTransport":
        return InprocTransport(self, rank)

    def _attach(self, rank: int, inbox: queue.Queue) -> None:
        with self._lock:
            self._inboxes[rank] = inbox

    def _detach(self, rank: int) -> None:
        with self._lock:
            self._inboxes[rank] = None

    def _deliver(self, dst: int, frame: bytes) -> None:
        with self._lock:
            inbox = self._inboxes[dst]
        if inbox is None:
            raise TransportDown(f"locality {dst} is not attached")
        inbox.put(frame)


class InprocTransport:
    kind = "inproc"

    def __init__(self, hub: InprocHub, rank: int):
        self.hub = hub
        self.rank = rank
        self.world = hub.world
        self._up = False

    def start(self, inbox: queue.Queue) -> None:
        self.hub._attach(self.rank, inbox)
        self._up = True

    def send(self, dst: int, frame: bytes) -> None:
        if not self._up:
            raise TransportDown("transport is closed")
        self.hub._deliver(dst, frame)

    def close(self) -> None:
        self._up = False
        self.hub._detach(self.rank)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(n)
        if not chunk:
            raise EOFError
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


class SocketTransport:
    """One listening TCP socket per rank on ``ports[rank]``.

    Each ordered pair of ranks uses its own outgoing connection, opened
    lazily and introduced with a handshake frame.  Connecting retries until
    ``connect_timeout`` so peers may start in any order.
    """

    kind = "socket"

    def __init__(self, rank: int, world: int, ports: list[int], host: str = "127.0.0.1", connect_timeout: float = 30.0):
        if len(ports) != world:
            raise ValueError("need one port per rank")
        self.rank = rank
        self.world = world
        self.ports = list(ports)
        self.host = host
        self.connect_timeout = connect_timeout
        self._out: dict[int, socket.socket] = {}
        self._out_locks = {d: threading.Lock() for d in range(world)}
        self._conns: list[socket.socket] = []
        self._listener: socket.socket | None = None
        self._inbox: queue.Queue | None = None
        self._closed = threading.Event()

    def start(self, inbox: queue.Queue) -> None:
        self._inbox = inbox
        lst = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        lst.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        lst.bind((self.host, self.ports[self.rank]))
        lst.listen(self.world + 4)
        self._listener = lst
        threading.Thread(target=self._accept_loop, name=f"tla-accept-{self.rank}", daemon=True).start()

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._conns.append(conn)
            threading.Thread(target=self._reader, args=(conn,), daemon=True).start()

    def _reader(self, conn: socket.socket) -> None:
        read = lambda n: _recv_exact(conn, n)  # noqa: E731
        try:
            peer, world = wire.parse_handshake(wire.read_frame(read))
            if world != self.world:
                log.error("rank %d: peer %d reports world %d, expected %d", self.rank, peer, world, self.world)
                conn.close()
                return
            while True:
                self._inbox.put(wire.read_frame(read))
        except (EOFError, OSError):
            pass
        except FrameError as exc:
            log.error("rank %d: dropping connection: %s", self.rank, exc)
        finally:
            conn.close()

    def _connect(self, dst: int) -> socket.socket:
        deadline = time.monotonic() + self.connect_timeout
        while True:
            try:
                sock = socket.create_connection((self.host, self.ports[dst]), timeout=5.0)
                break
            except OSError:
                if time.monotonic() > deadline or self._closed.is_set():
                    raise TransportDown(f"cannot reach locality {dst} on port {self.ports[dst]}")
                time.sleep(0.02)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.sendall(wire.handshake_frame(self.rank, self.world, dst))
        return sock

    def send(self, dst: int, frame: bytes) -> None:
        if self._closed.is_set():
            raise TransportDown("transport is closed")
        with self._out_locks[dst]:
            sock = self._out.get(dst)
            if sock is None:
                sock = self._out[dst] = self._connect(dst)
            try:
                sock.sendall(frame)
            except OSError as exc:
                raise TransportDown(f"send to {dst} failed: {exc}") from exc

    def close(self) -> None:
        self._closed.set()
        for sock in list(self._out.values()):
            try:
                sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass
            sock.close()
        if self._listener is not None:
            self._listener.close()


def free_ports(n: int, host: str = "127.0.0.1") -> list[int]:
    """Reserve-and-release ``n`` distinct ephemeral ports."""
    socks, ports = [], []
    for _ in range(n):
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.bind((host, 0))
        socks.append(s)
        ports.append(s.getsockname()[1])
    for s in socks:
        s.close()
    return ports
