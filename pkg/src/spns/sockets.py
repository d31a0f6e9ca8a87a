"""Stream-socket transport: the same sans-io nodes over TCP.

Frames are raw 512-byte cells back-to-back, no extra framing. Each node
runs one reactor: inbound connections get an opaque peer handle, outbound
destinations are address tokens resolved through a peers map. A node lock
keeps cell handling sequential per node, matching the simulator's
contract.
"""

from __future__ import annotations

import socket
import threading

from .cells import CELL_SIZE
from .errors import UnknownEndpoint


def _recv_exact(conn: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        try:
            chunk = conn.recv(n - len(buf))
        except OSError:
            return None
        if not chunk:
            return None
        buf += chunk
    return buf


class _PeerConn:
    """Handle for one TCP connection; usable as a dict key by identity."""

    def __init__(self, conn: socket.socket, label: str):
        self.conn = conn
        self.label = label
        self.lock = threading.Lock()

    def send(self, data: bytes) -> None:
        with self.lock:
            self.conn.sendall(data)

    def __repr__(self):
        return f"<peer {self.label}>"


class SocketNode:
    """Runs a sans-io node on a TCP listener."""

    def __init__(self, node, host: str = "127.0.0.1", port: int = 0, peers: dict[str, tuple] | None = None):
        self.node = node
        self.peers = dict(peers or {})
        self._outbound: dict[str, _PeerConn] = {}
        self._lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self._running = False
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(16)
        self.address = self._listener.getsockname()

    @property
    def port(self) -> int:
        return self.address[1]

    def start(self) -> "SocketNode":
        self._running = True
        t = threading.Thread(target=self._accept_loop, daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def _accept_loop(self):
        while self._running:
            try:
                conn, addr = self._listener.accept()
            except OSError:
                return
            peer = _PeerConn(conn, f"{addr[0]}:{addr[1]}")
            t = threading.Thread(target=self._reader, args=(peer, peer), daemon=True)
            t.start()
            self._threads.append(t)

    def _reader(self, peer: _PeerConn, present_as):
        # inbound conns are presented as their handle; dialed conns as the
        # address token, so node link keys stay stable across replies
        while self._running:
            wire = _recv_exact(peer.conn, CELL_SIZE)
            if wire is None:
                return
            self._dispatch(present_as, wire)

    def _dispatch(self, peer, wire: bytes):
        with self._lock:
            outputs = self.node.handle_cell(peer, wire)
        for dst, data in outputs:
            self._send(dst, data)

    def _send(self, dst, data: bytes):
        if isinstance(dst, _PeerConn):
            dst.send(data)
            return
        conn = self._connect(dst)
        conn.send(data)

    def _connect(self, token: str) -> _PeerConn:
        existing = self._outbound.get(token)
        if existing is not None:
            return existing
        if token not in self.peers:
            raise UnknownEndpoint(f"no transport route to {token!r}")
        host, port = self.peers[token]
        sock = socket.create_connection((host, port), timeout=10)
        peer = _PeerConn(sock, token)
        self._outbound[token] = peer
        t = threading.Thread(target=self._reader, args=(peer, token), daemon=True)
        t.start()
        self._threads.append(t)
        return peer

    def inject(self, outputs) -> None:
        """Send locally originated cells (UE drivers, scenario scripts)."""
        for dst, data in outputs:
            self._send(dst, data)

    def close(self):
        self._running = False
        try:
            self._listener.close()
        except OSError:
            pass
        for peer in self._outbound.values():
            try:
                peer.conn.close()
            except OSError:
                pass
