"""Block-pair lookup baseline.

Remembers every ordered pair (a, b) such that b was read within the lookahead
after a in some training trace (reads sharing a timestamp pair both ways).
On an access to a it predicts every such b. Successor sets are int bitsets
over a dense block numbering; window unions come from a sparse table so
training is O(n log n) big-int ORs per trace.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Sequence

from .config import BLOCK_SIZE
from .grouping import BlockBits
from .predictor import PrefetchRequest
from .trace import BlockId, BlockRead, Trace

PAIR_ENTRY_BYTES = 8  # two u32 block numbers


@dataclass
class PairModel:
    lookahead_ms: float
    bits: BlockBits
    successors: Dict[int, int]

    @property
    def pair_count(self) -> int:
        return sum(v.bit_count() for v in self.successors.values())

    @property
    def memory_bytes(self) -> int:
        return self.pair_count * PAIR_ENTRY_BYTES

    def successor_bits(self, block: BlockId) -> int:
        pos = self.bits.pos.get(block)
        if pos is None:
            return 0
        return self.successors.get(pos, 0)

    def pairs(self):
        for a, succ in sorted(self.successors.items()):
            for b in sorted(self.bits.decode(succ)):
                yield self.bits.order[a], b


def _window_unions(groups: List[int], times: List[int], lookahead: float) -> List[int]:
    """OR of groups[k..m] where m is the last group with time <= times[k] + lookahead."""
    n = len(groups)
    table = [groups]
    span = 1
    while span * 2 <= n:
        prev = table[-1]
        table.append([prev[i] | prev[i + span] for i in range(n - span * 2 + 1)])
        span *= 2
    out = []
    for k in range(n):
        m = bisect.bisect_right(times, times[k] + lookahead) - 1
        length = m - k + 1
        j = length.bit_length() - 1
        out.append(table[j][k] | table[j][m - (1 << j) + 1])
    return out


def train_pair_model(traces: Sequence, lookahead_ms: float, block_size: int = BLOCK_SIZE) -> PairModel:
    """Accepts Trace objects or lists of BlockRead."""
    if lookahead_ms <= 0:
        raise ValueError("lookahead must be positive")
    streams: List[List[BlockRead]] = [
        t.block_reads(block_size) if isinstance(t, Trace) else list(t) for t in traces
    ]
    bits = BlockBits(r.block for s in streams for r in s)
    pos = bits.pos
    succ: Dict[int, int] = {}
    for reads in streams:
        if not reads:
            continue
        times: List[int] = []
        groups: List[int] = []
        members: List[List[int]] = []
        for r in reads:
            p = pos[r.block]
            if times and times[-1] == r.timestamp:
                groups[-1] |= 1 << p
                members[-1].append(p)
            else:
                times.append(r.timestamp)
                groups.append(1 << p)
                members.append([p])
        windows = _window_unions(groups, times, lookahead_ms)
        for w, ps in zip(windows, members):
            for p in ps:
                succ[p] = succ.get(p, 0) | (w & ~(1 << p))
    return PairModel(lookahead_ms, bits, {k: v for k, v in succ.items() if v})


def predict_pairs(model: PairModel, block: BlockId) -> FrozenSet[BlockId]:
    return model.bits.decode(model.successor_bits(block))


class PairEngine:
    """Adapter giving the pair model the prefetch-engine surface the simulator drives.

    ``known`` marks blocks that are cached or queued; the simulator reports
    evictions so they become requestable again.
    """

    def __init__(self, model: PairModel, cache=None):
        self.model = model
        self.cache = cache
        self.known = 0
        self.requests = 0
        self.blocks_requested = 0

    def pending_close(self) -> Optional[float]:
        return None

    def advance(self, now: float) -> Optional[PrefetchRequest]:
        return None

    def completed(self, blocks) -> None:
        pass

    def is_queued(self, block: BlockId) -> bool:
        p = self.model.bits.pos.get(block)
        if p is None or not (self.known >> p) & 1:
            return False
        return self.cache is None or not self.cache.contains(block)

    def evicted(self, blocks) -> None:
        pos = self.model.bits.pos
        for b in blocks:
            p = pos.get(b)
            if p is not None:
                self.known &= ~(1 << p)

    def observe(self, read: BlockRead) -> Optional[PrefetchRequest]:
        fresh = self.model.successor_bits(read.block) & ~self.known
        if not fresh:
            return None
        self.known |= fresh
        out = []
        order = self.model.bits.order
        contains = self.cache.contains if self.cache is not None else (lambda b: False)
        while fresh:
            low = fresh & -fresh
            fresh ^= low
            b = order[low.bit_length() - 1]
            if not contains(b):
                out.append(b)
        if not out:
            return None
        self.requests += 1
        self.blocks_requested += len(out)
        return PrefetchRequest(tuple(out), (), read.timestamp)
