"""Threaded block server with a simulated link.

One reader thread per connection parses requests and hands them to a single
link thread. The link thread transmits block by block on a virtual clock
(``block_size * 8 / bandwidth`` per block) and always picks a ready urgent
job over a speculative one, so urgent traffic preempts speculative traffic at
block boundaries. A request becomes ready ``rtt`` after it was received; its
response frame is written once all of its blocks have been transmitted.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, List, Optional, Tuple

from . import protocol as P
from .store import BlockRoot

log = logging.getLogger(__name__)


@dataclass
class ServerStats:
    connections: int = 0
    urgent_requests: int = 0
    speculative_requests: int = 0
    urgent_blocks: int = 0
    speculative_blocks: int = 0
    errors: int = 0


class _Conn:
    def __init__(self, sock: socket.socket, peer):
        self.sock = sock
        self.peer = peer
        self.send_lock = threading.Lock()
        self.alive = True

    def send(self, data: bytes) -> None:
        with self.send_lock:
            if not self.alive:
                return
            try:
                self.sock.sendall(data)
            except OSError:
                self.alive = False


@dataclass
class _Job:
    conn: _Conn
    urgent: bool
    request_id: int
    blocks: list
    ready_at: float
    pos: int = 0
    parts: List[bytes] = field(default_factory=list)


class BlockServer:
    """``bandwidth_bps=None`` disables throttling; ``rtt_ms`` is added latency.

    With ``record_events`` the link thread logs ``(time, event, request_id)``
    tuples, event being one of ``urgent_ready``, ``urgent_done``, ``spec_start``,
    ``spec_block`` and ``spec_done``.
    """

    def __init__(self, root: str, address: Tuple[str, int] = ("127.0.0.1", 0),
                 bandwidth_bps: Optional[float] = None, rtt_ms: float = 0.0, record_events: bool = False):
        if bandwidth_bps is not None and bandwidth_bps <= 0:
            raise ValueError("bandwidth must be positive")
        if rtt_ms < 0:
            raise ValueError("rtt must be non-negative")
        self.store = BlockRoot(root)
        self.block_size = self.store.block_size
        self.bandwidth_bps = bandwidth_bps
        self.rtt_s = rtt_ms / 1000.0
        self.t_block = self.block_size * 8 / bandwidth_bps if bandwidth_bps else 0.0
        self.stats = ServerStats()
        self.events: Optional[List[Tuple[float, str, int]]] = [] if record_events else None
        self._listener = socket.create_server(address)
        self.address = self._listener.getsockname()[:2]
        self._cond = threading.Condition()
        self._urgent: Deque[_Job] = deque()
        self._spec: Deque[_Job] = deque()
        self._conns: List[_Conn] = []
        self._threads: List[threading.Thread] = []
        self._running = False
        self._link_t = 0.0

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> "BlockServer":
        self._running = True
        for target, name in ((self._accept_loop, "accept"), (self._link_loop, "link")):
            t = threading.Thread(target=target, name=f"blockserver-{name}", daemon=True)
            t.start()
            self._threads.append(t)
        log.info("serving %d files on %s:%d", len(self.store.files), *self.address)
        return self

    def stop(self) -> None:
        self._running = False
        try:
            self._listener.shutdown(socket.SHUT_RDWR)  # wakes a blocked accept()
        except OSError:
            pass
        try:
            self._listener.close()
        except OSError:
            pass
        with self._cond:
            self._cond.notify_all()
        for c in list(self._conns):
            c.alive = False
            try:
                c.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            c.sock.close()
        for t in self._threads:
            t.join(timeout=2.0)
        self.store.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def serve_forever(self) -> None:
        self.start()
        try:
            while self._running:
                time.sleep(0.5)
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    # -- connections -------------------------------------------------------

    def _accept_loop(self) -> None:
        while self._running:
            try:
                sock, peer = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Conn(sock, peer)
            self._conns.append(conn)
            self.stats.connections += 1
            t = threading.Thread(target=self._reader, args=(conn,), name="blockserver-conn", daemon=True)
            t.start()

    def _reader(self, conn: _Conn) -> None:
        try:
            while self._running and conn.alive:
                fr = P.read_frame(conn.sock)
                if fr is None:
                    break
                received = time.monotonic()
                if fr.type not in P.REQUEST_TYPES:
                    self._error(conn, fr.request_id, P.BAD_REQUEST, f"unexpected frame type {fr.type}")
                    continue
                try:
                    req = P.decode_request(fr.body)
                except P.ProtocolError as exc:
                    self._error(conn, fr.request_id, P.BAD_REQUEST, str(exc))
                    continue
                blocks = req.blocks()
                missing = next((b for b in blocks if not self.store.has(b)), None)
                if missing is not None:
                    self._error(conn, fr.request_id, P.NOT_FOUND,
                                f"block {missing.index} of file {missing.file_id} not found")
                    continue
                urgent = fr.type == P.URGENT_REQ
                if urgent:
                    self.stats.urgent_requests += 1
                else:
                    self.stats.speculative_requests += 1
                job = _Job(conn, urgent, fr.request_id, blocks, received + self.rtt_s)
                with self._cond:
                    (self._urgent if urgent else self._spec).append(job)
                    self._cond.notify()
        except (OSError, P.ProtocolError) as exc:
            log.debug("connection %s closed: %s", conn.peer, exc)
        finally:
            conn.alive = False
            try:
                conn.sock.close()
            except OSError:
                pass
            try:
                self._conns.remove(conn)
            except ValueError:
                pass

    def _error(self, conn: _Conn, rid: int, code: int, message: str) -> None:
        self.stats.errors += 1
        conn.send(P.encode_error(rid, code, message))

    # -- link ----------------------------------------------------------------

    def _event(self, t: float, what: str, rid: int) -> None:
        if self.events is not None:
            self.events.append((t, what, rid))

    def _next_job(self) -> Optional[_Job]:
        """Called with the condition held; waits until a job is ready."""
        while self._running:
            now = time.monotonic()
            # drop jobs of dead connections
            for q in (self._urgent, self._spec):
                while q and not q[0].conn.alive:
                    q.popleft()
            if self._urgent and self._urgent[0].ready_at <= now:
                job = self._urgent[0]
                if job.pos == 0 and not job.parts:
                    self._event(job.ready_at, "urgent_ready", job.request_id)
                return job
            if self._spec and self._spec[0].ready_at <= now:
                return self._spec[0]
            pending = [q[0].ready_at for q in (self._urgent, self._spec) if q]
            self._cond.wait(timeout=max(0.0, min(pending) - now) if pending else None)
        return None

    def _link_loop(self) -> None:
        while True:
            with self._cond:
                job = self._next_job()
            if job is None:
                return
            if job.blocks:
                block = job.blocks[job.pos]
                payload = P.pad(self.store.read(block), self.block_size)
                if self.t_block:
                    start = max(self._link_t, job.ready_at)
                    self._link_t = start + self.t_block
                    delay = self._link_t - time.monotonic()
                    if delay > 0:
                        time.sleep(delay)
                    sent_at = self._link_t
                else:
                    sent_at = time.monotonic()
                if not job.urgent:
                    if job.pos == 0:
                        self._event(sent_at - self.t_block, "spec_start", job.request_id)
                    self._event(sent_at - self.t_block, "spec_block", job.request_id)
                job.parts.append(P.encode_block(block, payload))
                job.pos += 1
                if job.urgent:
                    self.stats.urgent_blocks += 1
                else:
                    self.stats.speculative_blocks += 1
            if job.pos >= len(job.blocks):
                with self._cond:
                    q = self._urgent if job.urgent else self._spec
                    if q and q[0] is job:
                        q.popleft()
                job.conn.send(P.response_from_parts(job.request_id, job.parts))
                self._event(time.monotonic(), "urgent_done" if job.urgent else "spec_done", job.request_id)
