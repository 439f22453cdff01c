"""Local block store: resident set, LRU temporary region, prediction pins.

On-disk layout (when a directory is given)::

    blocks.dat   16-byte header, then fixed BLOCK_SIZE slots
                 header = b"BSCN", u16 version, u16 0, u32 block_size, u32 0
    blocks.jnl   8-byte header b"BSJN", u16 version, u16 0, then 21-byte entries
                 entry  = u8 op, u32 file_id, u32 block_index, u32 slot,
                          u32 crc32(payload), u32 crc32(entry[0:17])
                 op 1 = map temporary, 2 = map resident, 3 = unmap

All integers are big-endian. Slot data is written before the journal entry,
and the journal entry before the in-memory index changes, so replaying the
journal after a crash never points at unwritten data. A torn final entry is
ignored on replay.
"""

from __future__ import annotations

import heapq
import logging
import os
import statistics
import struct
import threading
import time
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

from .config import BLOCK_SIZE, LAUNCH_WINDOW_MS
from .trace import BlockId, Trace

log = logging.getLogger(__name__)

CONTAINER_MAGIC = b"BSCN"
JOURNAL_MAGIC = b"BSJN"
FORMAT_VERSION = 1
_CONTAINER_HEADER = struct.Struct(">4sHHII")
_JOURNAL_HEADER = struct.Struct(">4sHH")
_ENTRY = struct.Struct(">BIIII")
_ENTRY_CRC = struct.Struct(">I")
ENTRY_SIZE = _ENTRY.size + _ENTRY_CRC.size

OP_MAP_TEMP = 1
OP_MAP_RESIDENT = 2
OP_UNMAP = 3


class CacheError(Exception):
    pass


class CacheExhausted(CacheError):
    """No evictable block left and the temporary limit would be exceeded."""


class CacheIOError(CacheError):
    pass


class Hit(NamedTuple):
    data: Optional[bytes]
    resident: bool


@dataclass
class CacheStats:
    hits: int = 0
    resident_hits: int = 0
    misses: int = 0
    miss_bytes: int = 0
    evictions: int = 0
    inserts: int = 0
    occupancy_blocks: int = 0
    occupancy_bytes: int = 0
    resident_blocks: int = 0
    pinned_blocks: int = 0


class _Container:
    def __init__(self, directory: str, block_size: int):
        os.makedirs(directory, exist_ok=True)
        self.block_size = block_size
        self.data_path = os.path.join(directory, "blocks.dat")
        self.journal_path = os.path.join(directory, "blocks.jnl")
        fresh = not os.path.exists(self.data_path)
        self.data = open(self.data_path, "r+b" if not fresh else "w+b")
        if fresh:
            self.data.write(_CONTAINER_HEADER.pack(CONTAINER_MAGIC, FORMAT_VERSION, 0, block_size, 0))
            self.data.flush()
        else:
            head = self.data.read(_CONTAINER_HEADER.size)
            if len(head) < _CONTAINER_HEADER.size:
                raise CacheIOError("truncated container header")
            magic, version, _, bs, _ = _CONTAINER_HEADER.unpack(head)
            if magic != CONTAINER_MAGIC or version != FORMAT_VERSION:
                raise CacheIOError("not a block container (bad magic or version)")
            if bs != block_size:
                raise CacheIOError(f"container block size {bs} != {block_size}")
        jfresh = not os.path.exists(self.journal_path)
        self.journal = open(self.journal_path, "ab+")
        if jfresh:
            self.journal.write(_JOURNAL_HEADER.pack(JOURNAL_MAGIC, FORMAT_VERSION, 0))
            self.journal.flush()

    def entries(self) -> List[Tuple[int, BlockId, int, int]]:
        self.journal.seek(0)
        raw = self.journal.read()
        if len(raw) < _JOURNAL_HEADER.size:
            raise CacheIOError("truncated journal header")
        magic, version, _ = _JOURNAL_HEADER.unpack_from(raw)
        if magic != JOURNAL_MAGIC or version != FORMAT_VERSION:
            raise CacheIOError("not a block journal (bad magic or version)")
        out = []
        off = _JOURNAL_HEADER.size
        while off + ENTRY_SIZE <= len(raw):
            body = raw[off:off + _ENTRY.size]
            (crc,) = _ENTRY_CRC.unpack_from(raw, off + _ENTRY.size)
            if zlib.crc32(body) != crc:
                log.warning("journal entry at %d corrupt; ignoring the rest", off)
                break
            op, fid, idx, slot, dcrc = _ENTRY.unpack(body)
            out.append((op, BlockId(fid, idx), slot, dcrc))
            off += ENTRY_SIZE
        return out

    def append(self, op: int, block: BlockId, slot: int, data_crc: int = 0) -> None:
        body = _ENTRY.pack(op, block.file_id, block.index, slot, data_crc)
        self.journal.write(body + _ENTRY_CRC.pack(zlib.crc32(body)))
        self.journal.flush()

    def write(self, slot: int, data: bytes) -> None:
        try:
            self.data.seek(_CONTAINER_HEADER.size + slot * self.block_size)
            self.data.write(data)
            self.data.flush()
        except OSError as exc:
            raise CacheIOError(f"container write failed: {exc}") from exc

    def read(self, slot: int) -> bytes:
        try:
            self.data.seek(_CONTAINER_HEADER.size + slot * self.block_size)
            data = self.data.read(self.block_size)
        except OSError as exc:
            raise CacheIOError(f"container read failed: {exc}") from exc
        if len(data) != self.block_size:
            raise CacheIOError(f"short read from slot {slot}")
        return data

    def close(self) -> None:
        self.data.close()
        self.journal.close()


class BlockStore:
    """Thread-safe block cache.

    ``directory=None`` keeps payloads in memory; ``keep_data=False`` keeps no
    payloads at all (bookkeeping only, for simulation). ``temp_limit`` bounds
    the bytes held by non-resident blocks; ``None`` means unlimited.
    """

    def __init__(self, directory: Optional[str] = None, temp_limit: Optional[int] = None,
                 block_size: int = BLOCK_SIZE, keep_data: bool = True, clock=None):
        self.block_size = block_size
        self.temp_limit = temp_limit
        self.keep_data = keep_data
        self.clock = clock or (lambda: time.monotonic() * 1000.0)
        self.stats = CacheStats()
        self._lock = threading.RLock()
        self._slots: Dict[BlockId, int] = {}
        self._mem: Dict[int, bytes] = {}
        self._free: List[int] = []
        self._next_slot = 0
        self.resident: set = set()
        self.pinned: "OrderedDict[BlockId, float]" = OrderedDict()
        self.lru: "OrderedDict[BlockId, None]" = OrderedDict()
        self._container = _Container(directory, block_size) if directory and keep_data else None
        if self._container is not None:
            self._replay()

    def _replay(self) -> None:
        for op, block, slot, _ in self._container.entries():
            if op in (OP_MAP_TEMP, OP_MAP_RESIDENT):
                old = self._slots.get(block)
                if old is not None and old != slot:
                    self._free.append(old)
                self._slots[block] = slot
                self._next_slot = max(self._next_slot, slot + 1)
                self.lru.pop(block, None)
                self.resident.discard(block)
                if op == OP_MAP_RESIDENT:
                    self.resident.add(block)
                else:
                    self.lru[block] = None
            elif op == OP_UNMAP:
                slot = self._slots.pop(block, None)
                if slot is not None:
                    self._free.append(slot)
                self.lru.pop(block, None)
                self.resident.discard(block)
        used = set(self._slots.values())
        self._free = sorted(set(s for s in self._free if s not in used))
        heapq.heapify(self._free)
        self._refresh_occupancy()

    # -- queries -------------------------------------------------------

    def __contains__(self, block: BlockId) -> bool:
        return block in self._slots

    def contains(self, block: BlockId) -> bool:
        return block in self._slots

    def is_pinned(self, block: BlockId) -> bool:
        return block in self.pinned

    @property
    def temp_blocks(self) -> int:
        return len(self.pinned) + len(self.lru)

    def occupancy_bytes(self) -> int:
        return self.temp_blocks * self.block_size

    def _refresh_occupancy(self) -> None:
        s = self.stats
        s.occupancy_blocks = self.temp_blocks
        s.occupancy_bytes = s.occupancy_blocks * self.block_size
        s.resident_blocks = len(self.resident)
        s.pinned_blocks = len(self.pinned)

    # -- read path -----------------------------------------------------

    def read(self, block: BlockId) -> Optional[Hit]:
        """Return a Hit (refreshing recency) or None on a miss."""
        with self._lock:
            slot = self._slots.get(block)
            if slot is None:
                self.stats.misses += 1
                self.stats.miss_bytes += self.block_size
                return None
            data = self._load(slot)
            self.stats.hits += 1
            if block in self.resident:
                self.stats.resident_hits += 1
                return Hit(data, True)
            if block in self.pinned:
                del self.pinned[block]
                self.lru[block] = None
            else:
                self.lru.move_to_end(block)
            self._refresh_occupancy()
            return Hit(data, False)

    def _load(self, slot: int) -> Optional[bytes]:
        if not self.keep_data:
            return None
        if self._container is not None:
            return self._container.read(slot)
        return self._mem[slot]

    # -- write path ----------------------------------------------------

    def _check_data(self, data: Optional[bytes]) -> None:
        if self.keep_data and (data is None or len(data) != self.block_size):
            raise ValueError(f"block payload must be exactly {self.block_size} bytes")

    def _store(self, block: BlockId, data: Optional[bytes], op: int) -> None:
        slot = self._slots.get(block)
        if slot is None:
            slot = heapq.heappop(self._free) if self._free else self._next_slot
            if slot == self._next_slot:
                self._next_slot += 1
        if self.keep_data:
            if self._container is not None:
                self._container.write(slot, data)
                self._container.append(op, block, slot, zlib.crc32(data))
            else:
                self._mem[slot] = bytes(data)
        self._slots[block] = slot

    def _drop(self, block: BlockId) -> None:
        slot = self._slots.pop(block)
        if self._container is not None:
            self._container.append(OP_UNMAP, block, slot)
        self._mem.pop(slot, None)
        heapq.heappush(self._free, slot)

    def add_resident(self, block: BlockId, data: Optional[bytes] = None) -> None:
        """Store a block permanently; it never counts against the temporary limit."""
        self._check_data(data)
        with self._lock:
            if block in self.resident:
                return
            self.lru.pop(block, None)
            self.pinned.pop(block, None)
            self._store(block, data, OP_MAP_RESIDENT)
            self.resident.add(block)
            self._refresh_occupancy()

    def insert(self, block: BlockId, data: Optional[bytes] = None, pinned: bool = False,
               now: Optional[float] = None) -> List[BlockId]:
        """Insert into the temporary region, evicting LRU blocks if needed.

        Returns the evicted block ids. Raises CacheExhausted (leaving the
        store untouched) if only pinned blocks remain and space is short.
        """
        self._check_data(data)
        with self._lock:
            if block in self.resident:
                return []
            now = self.clock() if now is None else now
            if block in self._slots:
                if self.keep_data:
                    self._store(block, data, OP_MAP_TEMP)
                if pinned:
                    self.lru.pop(block, None)
                    self.pinned[block] = now
                    self.pinned.move_to_end(block)
                elif block in self.lru:
                    self.lru.move_to_end(block)
                self._refresh_occupancy()
                return []
            evicted: List[BlockId] = []
            if self.temp_limit is not None:
                bs = self.block_size
                if (len(self.pinned) + 1) * bs > self.temp_limit:
                    raise CacheExhausted(
                        f"temporary limit {self.temp_limit} B reached with {len(self.pinned)} pinned blocks")
                while (self.temp_blocks + 1) * bs > self.temp_limit:
                    victim, _ = self.lru.popitem(last=False)
                    self._drop(victim)
                    evicted.append(victim)
                self.stats.evictions += len(evicted)
            self._store(block, data, OP_MAP_TEMP)
            if pinned:
                self.pinned[block] = now
            else:
                self.lru[block] = None
            self.stats.inserts += 1
            self._refresh_occupancy()
            return evicted

    def pin(self, block: BlockId, now: Optional[float] = None) -> bool:
        """Protect a cached temporary block from eviction. False if absent or resident."""
        with self._lock:
            if block not in self._slots or block in self.resident:
                return False
            now = self.clock() if now is None else now
            self.lru.pop(block, None)
            self.pinned[block] = now
            self.pinned.move_to_end(block)
            self._refresh_occupancy()
            return True

    def unpin_stale(self, age_threshold: float, now: Optional[float] = None) -> int:
        """Release pins older than ``age_threshold`` ms; they become first in line for eviction."""
        with self._lock:
            now = self.clock() if now is None else now
            stale = [b for b, t in self.pinned.items() if now - t > age_threshold]
            for b in reversed(stale):
                del self.pinned[b]
                self.lru[b] = None
                self.lru.move_to_end(b, last=False)
            if stale:
                self._refresh_occupancy()
            return len(stale)

    def close(self) -> None:
        if self._container is not None:
            self._container.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass(frozen=True)
class ResidentSetSpec:
    b_initial: int
    selection: Tuple[BlockId, ...]


def rank_blocks(traces: Sequence[Trace], block_size: int = BLOCK_SIZE,
                launch_window_ms: int = LAUNCH_WINDOW_MS) -> List[BlockId]:
    """Order blocks by how early they are needed.

    Blocks read inside the launch window of any trace come first (by earliest
    read); the rest follow by median first-read time across the traces that
    read them. Ties go to the lower block id.
    """
    firsts: Dict[BlockId, List[int]] = {}
    for trace in traces:
        if not trace.records:
            continue
        t0 = trace.records[0].timestamp
        seen = set()
        for r in trace.block_reads(block_size):
            if r.block not in seen:
                seen.add(r.block)
                firsts.setdefault(r.block, []).append(r.timestamp - t0)
    launch, rest = [], []
    for b, ts in firsts.items():
        earliest = min(ts)
        if earliest < launch_window_ms:
            launch.append((earliest, b))
        else:
            rest.append((statistics.median(ts), b))
    launch.sort()
    rest.sort()
    return [b for _, b in launch] + [b for _, b in rest]


def choose_resident_set(training_traces: Sequence[Trace], b_initial: int,
                        block_size: int = BLOCK_SIZE, ranking: Optional[Sequence[BlockId]] = None) -> ResidentSetSpec:
    if b_initial < 0:
        raise ValueError("b_initial must be non-negative")
    ranking = ranking if ranking is not None else rank_blocks(training_traces, block_size)
    count = min(len(ranking), b_initial // block_size)
    return ResidentSetSpec(b_initial, tuple(ranking[:count]))


def permanent_footprint(package_bytes: float, b_initial: float) -> float:
    return package_bytes + b_initial


def storage_saving(permanent_bytes: float, total_bytes: float) -> float:
    """Fraction of the full install that no longer has to be stored permanently."""
    if total_bytes <= 0:
        raise ValueError("total_bytes must be positive")
    return 1.0 - permanent_bytes / total_bytes
