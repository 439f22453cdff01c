"""Block grouping: partitions -> equivalent partitions -> superblocks.

Superblocks are the state space of the Markov model. Building them is the
expensive offline step; the overlap search works on Python integers used as
bitsets over a dense block numbering so intersections stay cheap.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Sequence, Set, Tuple

from .trace import BlockId, BlockRead, Trace

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Partition:
    reads: Tuple[BlockRead, ...]
    blocks: FrozenSet[BlockId]
    first_ts: int
    last_ts: int


@dataclass
class EquivalentPartition:
    blocks: Set[BlockId]
    occurrences: List[int]
    trace_id: str

    @property
    def first_ts(self) -> int:
        return self.occurrences[0]


@dataclass(frozen=True)
class Superblock:
    superblock_id: int
    blocks: FrozenSet[BlockId]
    timestamps: Dict[str, Tuple[int, ...]] = field(compare=False)

    @property
    def contributing_traces(self) -> FrozenSet[str]:
        return frozenset(self.timestamps)

    def __len__(self):
        return len(self.blocks)


class Overlap(NamedTuple):
    blocks: FrozenSet[BlockId]
    contributors: Tuple[Tuple[int, int], ...]  # (trace index, equivalent partition index)
    score: int


class SuperblockSequence(NamedTuple):
    trace_id: str
    steps: Tuple[Tuple[int, int], ...]  # (superblock id, entry timestamp ms)
    partitions: int
    unmatched: int

    @property
    def states(self) -> List[int]:
        return [s for s, _ in self.steps]


def partition_trace(block_reads: Sequence[BlockRead], delta: int) -> List[Partition]:
    """Split a time-ordered read stream wherever successive reads are >= delta apart."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    out: List[Partition] = []
    cur: List[BlockRead] = []
    for r in block_reads:
        if cur and r.timestamp - cur[-1].timestamp >= delta:
            out.append(_close(cur))
            cur = []
        cur.append(r)
    if cur:
        out.append(_close(cur))
    return out


def _close(reads: List[BlockRead]) -> Partition:
    return Partition(tuple(reads), frozenset(r.block for r in reads), reads[0].timestamp, reads[-1].timestamp)


def jaccard(a: Iterable, b: Iterable) -> float:
    a = a if isinstance(a, (set, frozenset)) else set(a)
    b = b if isinstance(b, (set, frozenset)) else set(b)
    if not a and not b:
        return 1.0
    inter = len(a & b)
    return inter / (len(a) + len(b) - inter)


def merge_equivalent(partitions: Sequence[Partition], tau: float, trace_id: str = "") -> List[EquivalentPartition]:
    """Greedy time-ordered merge of near-identical partitions of one trace.

    Each partition joins the existing equivalent partition it is most similar
    to (earliest on ties) when that similarity reaches ``tau``.
    """
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    eqs: List[EquivalentPartition] = []
    for p in sorted(partitions, key=lambda p: p.first_ts):
        best, best_sim = -1, -1.0
        for i, e in enumerate(eqs):
            sim = jaccard(p.blocks, e.blocks)
            if sim > best_sim:
                best, best_sim = i, sim
        if best >= 0 and best_sim >= tau:
            eqs[best].blocks |= p.blocks
            eqs[best].occurrences.append(p.first_ts)
        else:
            eqs.append(EquivalentPartition(set(p.blocks), [p.first_ts], trace_id))
    return eqs


class BlockBits:
    """Dense numbering of blocks so block sets can be held as int bitsets."""

    def __init__(self, blocks: Iterable[BlockId]):
        self.order: List[BlockId] = sorted(set(blocks))
        self.pos: Dict[BlockId, int] = {b: i for i, b in enumerate(self.order)}

    def encode(self, blocks: Iterable[BlockId]) -> int:
        bits = 0
        pos = self.pos
        for b in blocks:
            bits |= 1 << pos[b]
        return bits

    def decode(self, bits: int) -> FrozenSet[BlockId]:
        out = []
        order = self.order
        while bits:
            low = bits & -bits
            out.append(order[low.bit_length() - 1])
            bits ^= low
        return frozenset(out)


def _block_sets(equiv_sets) -> List[List[Set[BlockId]]]:
    return [[e.blocks if isinstance(e, EquivalentPartition) else set(e) for e in parts] for parts in equiv_sets]


def _largest_overlap_bits(bitsets: List[List[int]]) -> Tuple[int, int, Tuple[Tuple[int, int], ...], int]:
    """Branch and bound over "one partition or nothing" per trace.

    Returns (score, n, contributors, bits). Candidates are explored in
    lexicographic contributor order and only replaced by strictly better
    (score, n), which realises the lowest-index tie-break.
    """
    T = len(bitsets)
    sizes = [[p.bit_count() for p in parts] for parts in bitsets]
    suffix_max = [0] * (T + 1)
    for t in range(T - 1, -1, -1):
        suffix_max[t] = max([suffix_max[t + 1]] + sizes[t])
    best = [0, 0, (), 0]

    def beats(bound_score: int, bound_n: int) -> bool:
        return bound_score > best[0] or (bound_score == best[0] and bound_n > best[1])

    def search(t: int, cur: Optional[int], count: int, n: int, chosen: Tuple[Tuple[int, int], ...]) -> None:
        if t == T:
            return
        rem = T - t - 1
        for i, p in enumerate(bitsets[t]):
            if not p:
                continue
            new = p if cur is None else cur & p
            if not new:
                continue
            c = sizes[t][i] if cur is None else new.bit_count()
            n1 = n + 1
            picked = chosen + ((t, i),)
            if beats(c * n1, n1):
                best[:] = [c * n1, n1, picked, new]
            if rem and beats(c * (n1 + rem), n1 + rem):
                search(t + 1, new, c, n1, picked)
        if rem:
            if cur is None:
                if beats(suffix_max[t + 1] * rem, rem):
                    search(t + 1, None, 0, 0, chosen)
            elif beats(count * (n + rem), n + rem):
                search(t + 1, cur, count, n, chosen)

    search(0, None, 0, 0, ())
    return best[0], best[1], best[2], best[3]


def find_largest_overlap(equiv_sets) -> Overlap:
    """Largest |blocks| x n intersection taking at most one equivalent partition per trace.

    ``equiv_sets`` is a per-trace list of equivalent partitions (or plain block sets).
    """
    sets = _block_sets(equiv_sets)
    bits = BlockBits(itertools.chain.from_iterable(itertools.chain.from_iterable(sets)))
    score, n, contributors, found = _largest_overlap_bits([[bits.encode(s) for s in parts] for parts in sets])
    return Overlap(bits.decode(found), contributors, score)


def create_superblocks(equiv_sets: Sequence[Sequence[EquivalentPartition]], min_superblock_size: int,
                       trace_ids: Optional[Sequence[str]] = None) -> List[Superblock]:
    """Extract superblocks greedily, then fold leftovers into the nearest one in time.

    The input equivalent partitions are not modified.
    """
    if min_superblock_size < 1:
        raise ValueError("min_superblock_size must be >= 1")
    if trace_ids is None:
        trace_ids = [parts[0].trace_id if parts else str(t) for t, parts in enumerate(equiv_sets)]
    sets = _block_sets(equiv_sets)
    bits = BlockBits(itertools.chain.from_iterable(itertools.chain.from_iterable(sets)))
    work = [[bits.encode(s) for s in parts] for parts in sets]

    found_bits: List[int] = []
    found_ts: List[Dict[str, Tuple[int, ...]]] = []
    while True:
        score, n, contributors, overlap = _largest_overlap_bits(work)
        if score < min_superblock_size or not overlap:
            break
        stamps: Dict[str, Tuple[int, ...]] = {}
        for t, i in contributors:
            work[t][i] &= ~overlap
            stamps[trace_ids[t]] = tuple(equiv_sets[t][i].occurrences)
        found_bits.append(overlap)
        found_ts.append(stamps)
    log.debug("extracted %d superblocks", len(found_bits))

    if not found_bits:
        for t, parts in enumerate(work):
            for i, rest in enumerate(parts):
                if rest:
                    found_bits.append(rest)
                    found_ts.append({trace_ids[t]: tuple(equiv_sets[t][i].occurrences)})
    else:
        for t, parts in enumerate(work):
            tid = trace_ids[t]
            for i, rest in enumerate(parts):
                if not rest:
                    continue
                target = _closest(found_ts, tid, equiv_sets[t][i].first_ts)
                found_bits[target] |= rest

    return [
        Superblock(sid, bits.decode(b), stamps)
        for sid, (b, stamps) in enumerate(zip(found_bits, found_ts))
    ]


def _closest(stamps: List[Dict[str, Tuple[int, ...]]], trace_id: str, ts: int) -> int:
    best, best_d = -1, None
    for sid, per_trace in enumerate(stamps):
        if trace_id in per_trace:
            d = min(abs(ts - x) for x in per_trace[trace_id])
            if best_d is None or d < best_d:
                best, best_d = sid, d
    if best >= 0:
        return best
    for sid, per_trace in enumerate(stamps):
        d = min(abs(ts - x) for xs in per_trace.values() for x in xs)
        if best_d is None or d < best_d:
            best, best_d = sid, d
    return best


class SuperblockIndex:
    """Inverted block -> superblock map used for containment matching."""

    def __init__(self, superblocks: Sequence[Superblock], containment: float = 0.9):
        if not 0 < containment <= 1:
            raise ValueError("containment must lie in (0, 1]")
        self.superblocks = list(superblocks)
        self.containment = containment
        self.by_block: Dict[BlockId, List[int]] = {}
        for s in self.superblocks:
            for b in s.blocks:
                self.by_block.setdefault(b, []).append(s.superblock_id)
        self.need = [containment * len(s.blocks) - 1e-9 for s in self.superblocks]

    def match(self, reads: Iterable[BlockRead]) -> List[Tuple[int, int]]:
        """Superblocks contained in a partition, as (id, first read ts) sorted by time then id."""
        counts: Dict[int, int] = {}
        first: Dict[int, int] = {}
        seen: Set[BlockId] = set()
        by_block = self.by_block
        for r in reads:
            if r.block in seen:
                continue
            seen.add(r.block)
            for sid in by_block.get(r.block, ()):
                counts[sid] = counts.get(sid, 0) + 1
                if sid not in first:
                    first[sid] = r.timestamp
        hits = [(first[sid], sid) for sid, c in counts.items() if c >= self.need[sid]]
        hits.sort()
        return [(sid, ts) for ts, sid in hits]


def to_superblock_sequence(trace, superblocks, delta: int, containment: float = 0.9,
                           index: Optional[SuperblockIndex] = None, block_size: Optional[int] = None,
                           trace_id: Optional[str] = None) -> SuperblockSequence:
    """Map a trace (or its block reads) to the superblocks its partitions contain."""
    if isinstance(trace, Trace):
        reads = trace.block_reads(block_size) if block_size else trace.block_reads()
        trace_id = trace_id or trace.trace_id
    else:
        reads = list(trace)
    index = index or SuperblockIndex(superblocks, containment)
    steps: List[Tuple[int, int]] = []
    parts = partition_trace(reads, delta) if reads else []
    unmatched = 0
    for p in parts:
        hits = index.match(p.reads)
        if not hits:
            unmatched += 1
            continue
        for sid, ts in hits:
            if steps and steps[-1][0] == sid:
                continue
            if steps and ts <= steps[-1][1]:
                ts = steps[-1][1] + 1
            steps.append((sid, ts))
    return SuperblockSequence(trace_id or "", tuple(steps), len(parts), unmatched)


@dataclass
class GroupingResult:
    superblocks: List[Superblock]
    sequences: List[SuperblockSequence]
    equivalent: List[List[EquivalentPartition]]

    @property
    def coverage(self) -> float:
        parts = sum(s.partitions for s in self.sequences)
        if not parts:
            return 0.0
        return 1.0 - sum(s.unmatched for s in self.sequences) / parts


def group_traces(traces: Sequence[Trace], delta: int, tau: float, min_superblock_size: int,
                 containment: float = 0.9, block_size: Optional[int] = None) -> GroupingResult:
    """Full offline grouping of a training corpus."""
    reads = [t.block_reads(block_size) if block_size else t.block_reads() for t in traces]
    equivalent = [
        merge_equivalent(partition_trace(r, delta), tau, t.trace_id) for t, r in zip(traces, reads)
    ]
    superblocks = create_superblocks(equivalent, min_superblock_size, [t.trace_id for t in traces])
    index = SuperblockIndex(superblocks, containment)
    sequences = [
        to_superblock_sequence(r, superblocks, delta, containment, index=index, trace_id=t.trace_id)
        for t, r in zip(traces, reads)
    ]
    return GroupingResult(superblocks, sequences, equivalent)
