"""Markov chain over superblocks with empirical transition durations.

Durations are kept as mean/stddev/count of the observed gaps rather than an
exponential rate. Prediction is a pruned depth-first walk: a path is cut once
its probability drops below ``p_stop`` or its summed mean duration exceeds the
lookahead.
"""

from __future__ import annotations

import math
import struct
import zlib
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

from .config import MAX_SEARCH_DEPTH

MAGIC = b"BSCT"
VERSION = 1
_HEADER = struct.Struct(">4sHHIII")  # magic, version, flags, states, edges, crc32(body)
_EDGE = struct.Struct(">IIdddI")


class CtmcError(ValueError):
    pass


class UnknownStateError(CtmcError, KeyError):
    pass


class ModelFormatError(CtmcError):
    pass


class Duration(NamedTuple):
    mean: float
    stddev: float
    count: int


@dataclass(frozen=True)
class CtmcModel:
    num_states: int
    initial: Tuple[float, ...]
    transitions: Mapping[int, Tuple[Tuple[int, float], ...]]
    durations: Mapping[Tuple[int, int], Duration]

    @property
    def num_transitions(self) -> int:
        return sum(len(v) for v in self.transitions.values())

    def successors(self, state: int) -> Tuple[Tuple[int, float], ...]:
        return self.transitions.get(state, ())

    def duration(self, i: int, j: int) -> Optional[Duration]:
        return self.durations.get((i, j))

    def check_state(self, state: int) -> None:
        if not (isinstance(state, int) and 0 <= state < self.num_states):
            raise UnknownStateError(f"state {state!r} not in model with {self.num_states} states")

    def to_bytes(self) -> bytes:
        return serialize(self)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CtmcModel":
        return deserialize(data)


def train(sequences: Sequence, num_states: Optional[int] = None) -> CtmcModel:
    """Frequency-count estimate from superblock sequences.

    Accepts ``SuperblockSequence`` objects or bare lists of ``(state, entry_ts)``.
    """
    seqs = [list(getattr(s, "steps", s)) for s in sequences]
    seqs = [s for s in seqs if s]
    if not seqs:
        raise CtmcError("cannot train on an empty corpus")
    top = max(state for s in seqs for state, _ in s)
    n = num_states if num_states is not None else top + 1
    if top >= n:
        raise CtmcError(f"state {top} out of range for {n} states")

    first = [0] * n
    counts: Dict[int, Dict[int, int]] = defaultdict(dict)
    gaps: Dict[Tuple[int, int], List[int]] = defaultdict(list)
    for s in seqs:
        first[s[0][0]] += 1
        for (a, ta), (b, tb) in zip(s, s[1:]):
            counts[a][b] = counts[a].get(b, 0) + 1
            gaps[(a, b)].append(tb - ta)

    initial = tuple(c / len(seqs) for c in first)
    transitions = {}
    for a in sorted(counts):
        total = sum(counts[a].values())
        transitions[a] = tuple((b, counts[a][b] / total) for b in sorted(counts[a]))
    durations = {}
    for key in sorted(gaps):
        g = gaps[key]
        mean = sum(g) / len(g)
        var = sum((x - mean) ** 2 for x in g) / len(g)
        durations[key] = Duration(mean, math.sqrt(var), len(g))
    return CtmcModel(n, initial, transitions, durations)


def predict(model: CtmcModel, current_state: int, lookahead_ms: float, p_stop: float,
            max_depth: int = MAX_SEARCH_DEPTH) -> Dict[int, float]:
    """Probability of each state being entered within ``lookahead_ms``.

    A state's probability sums the path probabilities of every surviving path
    on which it is reached for the first time. The start state is not reported.
    """
    model.check_state(current_state)
    out: Dict[int, float] = {}
    transitions = model.transitions
    durations = model.durations

    def walk(state: int, prob: float, elapsed: float, visited: frozenset, depth: int) -> None:
        if depth >= max_depth:
            return
        for nxt, p in transitions.get(state, ()):
            q = prob * p
            if q < p_stop:
                continue
            t = elapsed + durations[(state, nxt)].mean
            if t > lookahead_ms:
                continue
            if nxt not in visited:
                out[nxt] = out.get(nxt, 0.0) + q
                walk(nxt, q, t, visited | {nxt}, depth + 1)
            else:
                walk(nxt, q, t, visited, depth + 1)

    walk(current_state, 1.0, 0.0, frozenset((current_state,)), 0)
    return {s: min(1.0, p) for s, p in sorted(out.items())}


def serialize(model: CtmcModel) -> bytes:
    body = bytearray()
    body += struct.pack(f">{model.num_states}d", *model.initial)
    edges = 0
    for i in sorted(model.transitions):
        for j, p in model.transitions[i]:
            d = model.durations[(i, j)]
            body += _EDGE.pack(i, j, p, d.mean, d.stddev, d.count)
            edges += 1
    header = _HEADER.pack(MAGIC, VERSION, 0, model.num_states, edges, zlib.crc32(body))
    return header + bytes(body)


def deserialize(data: bytes) -> CtmcModel:
    if not data:
        raise ModelFormatError("empty model data")
    if len(data) < _HEADER.size:
        raise ModelFormatError("truncated model header")
    magic, version, _flags, n, edges, crc = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    body = data[_HEADER.size:]
    want = 8 * n + _EDGE.size * edges
    if len(body) != want:
        raise ModelFormatError(f"model body is {len(body)} bytes, expected {want}")
    if zlib.crc32(body) != crc:
        raise ModelFormatError("model checksum mismatch")
    initial = struct.unpack_from(f">{n}d", body)
    transitions: Dict[int, List[Tuple[int, float]]] = {}
    durations = {}
    off = 8 * n
    for _ in range(edges):
        i, j, p, mean, std, count = _EDGE.unpack_from(body, off)
        off += _EDGE.size
        transitions.setdefault(i, []).append((j, p))
        durations[(i, j)] = Duration(mean, std, count)
    return CtmcModel(n, tuple(initial), {k: tuple(v) for k, v in transitions.items()}, durations)
