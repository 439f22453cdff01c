"""Bounded FIFO of blocks awaiting speculative download."""

from __future__ import annotations

import threading
from collections import deque
from typing import Callable, Deque, Dict, Iterable, List, Optional, Tuple

from ..config import QUEUE_CAPACITY
from ..trace import BlockId


class FetchQueue:
    """Thread-safe, deduplicating, lossy FIFO.

    Each entry carries the time it was issued (the prediction time). When
    full, the oldest entry is dropped, ``dropped`` is incremented and
    ``on_drop`` (if set) is called with the dropped block. ``cancel`` removes a
    queued block in O(1); stale deque slots are skipped lazily.
    """

    def __init__(self, capacity: int = QUEUE_CAPACITY, on_drop: Optional[Callable[[BlockId], None]] = None):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.on_drop = on_drop
        self.dropped = 0
        self.enqueued = 0
        self._cond = threading.Condition()
        self._order: Deque[Tuple[BlockId, int]] = deque()
        self._live: Dict[BlockId, Tuple[int, float]] = {}
        self._gen = 0
        self._closed = False

    def __len__(self) -> int:
        return len(self._live)

    def __contains__(self, block: BlockId) -> bool:
        return block in self._live

    def _pop_oldest(self) -> Optional[Tuple[BlockId, float]]:
        while self._order:
            block, gen = self._order.popleft()
            entry = self._live.get(block)
            if entry is not None and entry[0] == gen:
                del self._live[block]
                return block, entry[1]
        return None

    def put(self, blocks: Iterable[BlockId], issued_at: float = 0.0) -> int:
        """Enqueue blocks not already queued; returns how many were added."""
        added = 0
        drops: List[BlockId] = []
        with self._cond:
            if self._closed:
                raise RuntimeError("queue is closed")
            for b in blocks:
                if b in self._live:
                    continue
                if len(self._live) >= self.capacity:
                    old = self._pop_oldest()
                    if old is not None:
                        self.dropped += 1
                        drops.append(old[0])
                self._gen += 1
                self._live[b] = (self._gen, issued_at)
                self._order.append((b, self._gen))
                added += 1
            self.enqueued += added
            if added:
                self._cond.notify_all()
        if self.on_drop is not None:
            for b in drops:
                self.on_drop(b)
        return added

    def cancel(self, block: BlockId) -> bool:
        with self._cond:
            return self._live.pop(block, None) is not None

    def get_batch(self, max_blocks: int, timeout: Optional[float] = None) -> List[Tuple[BlockId, float]]:
        """Oldest entries in FIFO order; waits up to ``timeout`` for the first one.

        Returns an empty list on timeout or once the queue is closed and empty.
        """
        with self._cond:
            if not self._live and not self._closed:
                self._cond.wait(timeout)
            out = []
            while len(out) < max_blocks:
                item = self._pop_oldest()
                if item is None:
                    break
                out.append(item)
            return out

    def snapshot(self) -> List[BlockId]:
        with self._cond:
            return [b for b, g in self._order if self._live.get(b, (None,))[0] == g]

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed
