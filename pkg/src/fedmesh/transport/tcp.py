"""Full-mesh TCP transport carrying framed :class:`PeerMessage` streams.

Each pair of clients shares one connection; the lower id dials the higher
id. A dialer opens with a 6-byte hello (b"FDMH" + its id as big-endian
u16) so the acceptor knows who is on the other end. Dropped connections are
not masked: the peer simply goes silent and the protocol's crash detector
takes over. Dialers keep retrying in the background, so a restarted peer
is picked up again.
"""
from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from typing import Callable, Optional

from ..protocol import PeerMessage
from .wire import FramingError, encode_frame, read_frame

log = logging.getLogger(__name__)

HELLO = struct.Struct(">4sH")
HELLO_MAGIC = b"FDMH"


def parse_address(text: str) -> tuple:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def load_peers(path) -> dict:
    """Peer table file: one ``<id> <host>:<port>`` per line, ``#`` comments."""
    peers = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected '<id> <host>:<port>'")
            peers[int(parts[0])] = parse_address(parts[1])
    return peers


def write_peers(path, peers: dict) -> None:
    with open(path, "w") as fh:
        for i in sorted(peers):
            host, port = peers[i]
            fh.write(f"{i} {host}:{port}\n")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise EOFError("connection closed")
        buf += chunk
    return bytes(buf)


class _Conn:
    def __init__(self, peer: int, sock: socket.socket):
        self.peer = peer
        self.sock = sock
        self.wlock = threading.Lock()
        self.alive = True

    def close(self):
        self.alive = False
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class TcpTransport:
    def __init__(self, my_id: int, peers: dict, on_message: Callable[[PeerMessage], None],
                 dim: Optional[int] = None, retry_max_s: float = 0.5):
        self.id = my_id
        self.peers = dict(peers)
        self.on_message = on_message
        self.dim = dim
        self.retry_max_s = retry_max_s
        self._conns = {}
        self._lock = threading.Lock()
        self._changed = threading.Condition(self._lock)
        self._closed = threading.Event()
        self._listener = None
        self._threads = []
        self.connections_made = 0

    # -- lifecycle -------------------------------------------------------------

    def start(self):
        host, port = self.peers[self.id]
        ls = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        ls.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        ls.bind((host, port))
        ls.listen(len(self.peers))
        ls.settimeout(0.2)
        self._listener = ls
        self._spawn(self._accept_loop)
        for j in sorted(self.peers):
            if j > self.id:
                self._spawn(self._dial_loop, j)
        return self

    def _spawn(self, fn, *args):
        t = threading.Thread(target=fn, args=args, daemon=True,
                             name=f"tcp-{self.id}-{fn.__name__}")
        t.start()
        self._threads.append(t)

    def close(self):
        self._closed.set()
        if self._listener is not None:
            # a thread blocked in accept() pins the port until it returns
            try:
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            for t in self._threads:
                if t.name.endswith("_accept_loop") and t is not threading.current_thread():
                    t.join(1.0)
            self._listener.close()
        with self._lock:
            conns = list(self._conns.values())
            self._conns.clear()
        for c in conns:
            c.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()

    # -- mesh management ---------------------------------------------------------

    @property
    def connected(self) -> set:
        with self._lock:
            return {j for j, c in self._conns.items() if c.alive}

    def wait_connected(self, timeout: float) -> set:
        """Block until every peer is connected or ``timeout`` seconds pass."""
        want = set(self.peers) - {self.id}
        deadline = time.monotonic() + timeout
        with self._changed:
            while True:
                have = {j for j, c in self._conns.items() if c.alive}
                left = deadline - time.monotonic()
                if have >= want or left <= 0:
                    return have
                self._changed.wait(left)

    def _register(self, peer: int, sock: socket.socket):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(None)
        conn = _Conn(peer, sock)
        with self._changed:
            old = self._conns.get(peer)
            self._conns[peer] = conn
            self.connections_made += 1
            self._changed.notify_all()
        if old is not None:
            old.close()
        self._spawn(self._read_loop, conn)

    def _drop(self, conn: _Conn):
        with self._changed:
            if self._conns.get(conn.peer) is conn:
                del self._conns[conn.peer]
            self._changed.notify_all()
        conn.close()

    def _accept_loop(self):
        while not self._closed.is_set():
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            try:
                sock.settimeout(2.0)
                magic, peer = HELLO.unpack(_recv_exact(sock, HELLO.size))
                if magic != HELLO_MAGIC or peer not in self.peers or peer >= self.id:
                    raise ValueError(f"bad hello {magic!r} from {peer}")
            except (OSError, EOFError, ValueError, struct.error) as exc:
                log.warning("client %d: rejected connection: %s", self.id, exc)
                sock.close()
                continue
            self._register(peer, sock)

    def _dial_loop(self, peer: int):
        backoff = 0.02
        while not self._closed.is_set():
            with self._lock:
                have = peer in self._conns
            if have:
                self._closed.wait(0.05)
                continue
            try:
                sock = socket.create_connection(self.peers[peer], timeout=1.0)
                sock.sendall(HELLO.pack(HELLO_MAGIC, self.id))
            except OSError:
                self._closed.wait(backoff)
                backoff = min(backoff * 2, self.retry_max_s)
                continue
            backoff = 0.02
            self._register(peer, sock)

    def _read_loop(self, conn: _Conn):
        try:
            while conn.alive and not self._closed.is_set():
                msg = read_frame(lambda n: _recv_exact(conn.sock, n), self.dim)
                if msg.sender != conn.peer:
                    raise FramingError(f"frame claims sender {msg.sender} on link to {conn.peer}")
                self.on_message(msg)
        except FramingError as exc:
            log.warning("client %d: framing error from %d, resetting: %s", self.id, conn.peer, exc)
        except (EOFError, OSError):
            pass
        self._drop(conn)

    # -- sending -----------------------------------------------------------------

    def send(self, to: int, msg: PeerMessage) -> bool:
        with self._lock:
            conn = self._conns.get(to)
        if conn is None or not conn.alive:
            return False
        frame = encode_frame(msg, self.dim)
        try:
            with conn.wlock:
                conn.sock.sendall(frame)
        except OSError:
            self._drop(conn)
            return False
        return True

    def broadcast(self, msg: PeerMessage) -> int:
        return sum(self.send(j, msg) for j in sorted(self.peers) if j != self.id)


def tcp_listen(my_id: int, peers: dict, on_message, dim=None, grace_s: float = 10.0):
    """Start a transport and wait up to ``grace_s`` for the full mesh."""
    t = TcpTransport(my_id, peers, on_message, dim).start()
    t.wait_connected(grace_s)
    return t


tcp_connect = tcp_listen
