"""Client side: blocking urgent fetches and a background speculative fetcher.

Urgent and speculative traffic use separate persistent connections so the
server can prioritise by channel.
"""

from __future__ import annotations

import itertools
import logging
import socket
import threading
import time
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from ..cache import CacheExhausted
from ..config import BLOCK_SIZE, PIN_TIMEOUT_MS
from ..trace import BlockId
from . import protocol as P
from .queue import FetchQueue

log = logging.getLogger(__name__)


class FetchError(Exception):
    pass


class NetworkError(FetchError):
    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempts)")
        self.attempts = attempts


class ContentMismatch(FetchError):
    """The server does not have a block the model asked for."""


class Connection:
    """One persistent TCP connection; reconnects lazily after a failure."""

    def __init__(self, address: Tuple[str, int], timeout: float = 10.0):
        self.address = tuple(address)
        self.timeout = timeout
        self.sock: Optional[socket.socket] = None
        self.send_lock = threading.Lock()

    def ensure(self) -> socket.socket:
        if self.sock is None:
            sock = socket.create_connection(self.address, timeout=self.timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_KEEPALIVE, 1)
            self.sock = sock
        return self.sock

    def send(self, data: bytes) -> None:
        with self.send_lock:
            self.ensure().sendall(data)

    def recv(self) -> P.Frame:
        if self.sock is None:
            raise ConnectionError("not connected")
        fr = P.read_frame(self.sock)
        if fr is None:
            raise ConnectionError("server closed the connection")
        return fr

    def close(self) -> None:
        if self.sock is not None:
            try:
                self.sock.close()
            except OSError:
                pass
            self.sock = None


def _insert(cache, block: BlockId, data: bytes, pinned: bool, now: Optional[float]) -> List[BlockId]:
    try:
        return cache.insert(block, data, pinned=pinned, now=now)
    except CacheExhausted:
        cache.unpin_stale(PIN_TIMEOUT_MS, now)
        try:
            return cache.insert(block, data, pinned=pinned, now=now)
        except CacheExhausted:
            log.warning("cache exhausted, block %s not stored", block)
            return []


def _check_reply(fr: P.Frame, block_size: int) -> List[Tuple[BlockId, bytes]]:
    if fr.type == P.ERROR:
        err = P.decode_error(fr.body)
        if err.code == P.NOT_FOUND:
            raise ContentMismatch(err.message)
        raise FetchError(f"server rejected request {err.request_id}: {err.message}")
    if fr.type != P.RESP:
        raise P.ProtocolError(f"unexpected frame type {fr.type}")
    rid, blocks = P.decode_response(fr.body, block_size)
    if rid != fr.request_id:
        raise P.ProtocolError(f"request id echo {rid} does not match frame id {fr.request_id}")
    return blocks


class BlockClient:
    """Blocking urgent fetches over a dedicated kept-alive connection."""

    def __init__(self, address: Tuple[str, int], cache=None, block_size: int = BLOCK_SIZE,
                 timeout: float = 10.0, attempts: int = 3, backoff_s: float = 0.05,
                 clock: Optional[Callable[[], float]] = None):
        self.conn = Connection(address, timeout)
        self.cache = cache
        self.block_size = block_size
        self.attempts = attempts
        self.backoff_s = backoff_s
        self.clock = clock
        self.latencies_ms: List[float] = []
        self.retries = 0
        self._ids = itertools.count(1)
        self._lock = threading.Lock()

    def connect(self) -> None:
        """Open the kept-alive connection, retrying with backoff."""
        for attempt in range(self.attempts):
            if attempt:
                self.retries += 1
                time.sleep(self.backoff_s * (2 ** (attempt - 1)))
            try:
                self.conn.ensure()
                return
            except OSError as exc:
                last = exc
        raise NetworkError(f"cannot connect to {self.conn.address}: {last}", self.attempts)

    def fetch_urgent(self, blocks: Sequence[BlockId], insert: bool = True) -> Dict[BlockId, bytes]:
        """Fetch blocks now, blocking the caller; payloads are zero-padded."""
        wanted = list(dict.fromkeys(blocks))
        if not wanted:
            return {}
        with self._lock:
            last: Optional[Exception] = None
            for attempt in range(self.attempts):
                if attempt:
                    self.retries += 1
                    time.sleep(self.backoff_s * (2 ** (attempt - 1)))
                start = time.monotonic()
                try:
                    got = self._exchange(wanted)
                except (OSError, P.ProtocolError) as exc:
                    last = exc
                    self.conn.close()
                    log.warning("urgent fetch attempt %d failed: %s", attempt + 1, exc)
                    continue
                self.latencies_ms.append((time.monotonic() - start) * 1000.0)
                break
            else:
                raise NetworkError(f"urgent fetch failed: {last}", self.attempts)
        if insert and self.cache is not None:
            now = self.clock() if self.clock else None
            for b in wanted:
                _insert(self.cache, b, got[b], pinned=False, now=now)
        return got

    def _exchange(self, wanted: List[BlockId]) -> Dict[BlockId, bytes]:
        pending = {}
        out = b""
        for fid, ranges in P.coalesce(sorted(wanted)):
            rid = next(self._ids)
            pending[rid] = True
            out += P.encode_request(rid, fid, ranges, urgent=True)
        self.conn.send(out)
        got: Dict[BlockId, bytes] = {}
        while pending:
            fr = self.conn.recv()
            if fr.request_id not in pending:
                raise P.ProtocolError(f"unexpected response id {fr.request_id}")
            del pending[fr.request_id]
            got.update(_check_reply(fr, self.block_size))
        missing = [b for b in wanted if b not in got]
        if missing:
            raise P.ProtocolError(f"server omitted {len(missing)} blocks")
        return got

    def close(self) -> None:
        self.conn.close()


class SpeculativeFetcher:
    """Drains a FetchQueue over its own connection.

    A sender thread takes up to ``batch_blocks`` queued blocks, coalesces them
    into per-file range requests and keeps at most ``window_blocks`` blocks
    outstanding; a receiver thread verifies responses and inserts the blocks
    pinned. ``on_block(block, issued_at)`` is called after each insertion.
    On a network error outstanding blocks are re-queued at the tail, up to
    ``max_retries`` times each.
    """

    def __init__(self, address: Tuple[str, int], queue: FetchQueue, cache=None,
                 block_size: int = BLOCK_SIZE, batch_blocks: int = 16, window_blocks: int = 256,
                 timeout: float = 10.0, max_retries: int = 3,
                 on_block: Optional[Callable[[BlockId, float], None]] = None,
                 on_give_up: Optional[Callable[[BlockId], None]] = None,
                 clock: Optional[Callable[[], float]] = None):
        self.conn = Connection(address, timeout)
        self.queue = queue
        self.cache = cache
        self.block_size = block_size
        self.batch_blocks = batch_blocks
        self.window_blocks = window_blocks
        self.max_retries = max_retries
        self.on_block = on_block
        self.on_give_up = on_give_up
        self.clock = clock
        self.received_blocks = 0
        self.requests = 0
        self.failures = 0
        self.errors: List[Exception] = []
        self._ids = itertools.count(1)
        self._cond = threading.Condition()
        self._outstanding: Dict[int, List[Tuple[BlockId, float]]] = {}
        self._in_window = 0
        self._attempts: Dict[BlockId, int] = {}
        self._stop = False
        self._threads: List[threading.Thread] = []
        self._epoch = 0

    def start(self) -> "SpeculativeFetcher":
        for target in (self._send_loop, self._recv_loop):
            t = threading.Thread(target=target, name=f"spec-{target.__name__}", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def idle(self) -> bool:
        with self._cond:
            return not self._outstanding and not len(self.queue)

    def stop(self) -> None:
        with self._cond:
            self._stop = True
            self._cond.notify_all()
        self.queue.close()
        self.conn.close()
        for t in self._threads:
            t.join(timeout=2.0)

    def _send_loop(self) -> None:
        while True:
            with self._cond:
                while not self._stop and self._in_window >= self.window_blocks:
                    self._cond.wait()
                if self._stop:
                    return
                room = min(self.batch_blocks, self.window_blocks - self._in_window)
            batch = self.queue.get_batch(room, timeout=0.05)
            if not batch:
                if self.queue.closed:
                    return
                continue
            issued = dict(batch)
            try:
                self.conn.ensure()
            except OSError as exc:
                self._requeue(batch, exc)
                continue
            data = b""
            with self._cond:
                for fid, ranges in P.coalesce(b for b, _ in batch):
                    rid = next(self._ids)
                    blocks = [BlockId(fid, i) for first, n in ranges for i in range(first, first + n)]
                    self._outstanding[rid] = [(b, issued[b]) for b in blocks]
                    self._in_window += len(blocks)
                    data += P.encode_request(rid, fid, ranges, urgent=False)
                    self.requests += 1
                self._cond.notify_all()
            try:
                self.conn.send(data)
            except OSError as exc:
                self._fail(exc)

    def _recv_loop(self) -> None:
        while True:
            with self._cond:
                while not self._stop and not self._outstanding:
                    self._cond.wait()
                if self._stop:
                    return
                epoch = self._epoch
            try:
                fr = self.conn.recv()
                with self._cond:
                    entries = self._outstanding.pop(fr.request_id, None)
                if entries is None:
                    raise P.ProtocolError(f"unexpected response id {fr.request_id}")
                try:
                    blocks = _check_reply(fr, self.block_size)
                except ContentMismatch as exc:
                    self.errors.append(exc)
                    log.error("speculative fetch: %s", exc)
                    self._release(entries, give_up=True)
                    continue
                issued = dict(entries)
                now = self.clock() if self.clock else None
                for b, data in blocks:
                    if self.cache is not None:
                        _insert(self.cache, b, data, pinned=True, now=now)
                    self.received_blocks += 1
                    self._attempts.pop(b, None)
                    if self.on_block is not None:
                        self.on_block(b, issued.get(b, 0.0))
                self._release(entries)
            except (OSError, P.ProtocolError) as exc:
                with self._cond:
                    if self._stop:
                        return
                    stale = epoch != self._epoch
                if not stale:
                    self._fail(exc)

    def _release(self, entries, give_up: bool = False) -> None:
        with self._cond:
            self._in_window -= len(entries)
            self._cond.notify_all()
        if give_up and self.on_give_up is not None:
            for b, _ in entries:
                self.on_give_up(b)

    def _fail(self, exc: Exception) -> None:
        """Reset the connection and requeue everything outstanding."""
        with self._cond:
            if self._stop:
                return
            self.failures += 1
            self._epoch += 1
            lost = [e for entries in self._outstanding.values() for e in entries]
            self._outstanding.clear()
            self._in_window = 0
            self._cond.notify_all()
        self.conn.close()
        self._requeue(lost, exc)

    def _requeue(self, lost: List[Tuple[BlockId, float]], exc: Exception) -> None:
        log.warning("speculative connection failed (%s); requeueing %d blocks", exc, len(lost))
        self.errors.append(exc)
        time.sleep(0.05)
        retry: List[Tuple[BlockId, float]] = []
        for b, issued in lost:
            n = self._attempts.get(b, 0) + 1
            self._attempts[b] = n
            if n > self.max_retries:
                if self.on_give_up is not None:
                    self.on_give_up(b)
            else:
                retry.append((b, issued))
        for b, issued in retry:
            try:
                self.queue.put((b,), issued)
            except RuntimeError:
                break
