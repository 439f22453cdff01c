"""Online prefetch engine.

Feeds live block reads through the same partitioning used in training,
tracks the current Markov state and how fast the user moves through states,
and turns predictions into prefetch requests for blocks not yet on the device.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .config import SPEED_MAX, SPEED_MIN, SPEED_SMOOTHING, PredictorConfig
from .ctmc import CtmcModel, predict
from .grouping import Superblock, SuperblockIndex
from .trace import BlockId, BlockRead

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpeedEstimate:
    """Model mean duration divided by observed duration; > 1 means a faster user."""

    ratio: float = 1.0
    samples: int = 0


def update_speed(estimate: SpeedEstimate, observed_duration: float, model_mean: float,
                 smoothing: float = SPEED_SMOOTHING) -> SpeedEstimate:
    if model_mean <= 0:
        raise ValueError("model_mean must be positive")
    sample = model_mean / max(observed_duration, 1.0)
    ratio = (1.0 - smoothing) * estimate.ratio + smoothing * sample
    return SpeedEstimate(min(SPEED_MAX, max(SPEED_MIN, ratio)), estimate.samples + 1)


def effective_lookahead(config: PredictorConfig, speed: SpeedEstimate) -> float:
    if speed.ratio <= 0:
        raise ValueError("speed ratio must be positive")
    ratio = min(SPEED_MAX, max(SPEED_MIN, speed.ratio))
    return config.lookahead_ms * ratio


@dataclass(frozen=True)
class PrefetchRequest:
    blocks: Tuple[BlockId, ...]
    superblocks: Tuple[int, ...]
    issued_at: float


@dataclass
class EngineCounters:
    partitions_closed: int = 0
    matched: int = 0
    unmatched: int = 0
    predictions: int = 0
    requests: int = 0
    blocks_requested: int = 0


class PrefetchEngine:
    """Single-threaded online predictor.

    ``cache`` only needs ``contains(block)``; if it also has ``pin(block, now)``
    predicted blocks that are already cached get pinned.
    """

    def __init__(self, model: CtmcModel, superblocks: Sequence[Superblock], config: PredictorConfig,
                 cache=None, speed_adaptation: bool = True, index: Optional[SuperblockIndex] = None):
        self.model = model
        self.superblocks = list(superblocks)
        self.config = config
        self.cache = cache
        self.speed_adaptation = speed_adaptation
        self.index = index or SuperblockIndex(self.superblocks, config.containment)
        self._sorted_blocks = [tuple(sorted(s.blocks)) for s in self.superblocks]
        self.counters = EngineCounters()
        self.speed = SpeedEstimate()
        self.state: Optional[int] = None
        self.state_entered: Optional[int] = None
        self.history: List[Tuple[int, int]] = []
        self.inflight: Set[BlockId] = set()
        self._open: List[BlockRead] = []

    # -- read stream -----------------------------------------------------

    def observe(self, read: BlockRead) -> Optional[PrefetchRequest]:
        """Add a read; closes the rolling partition when the gap reaches delta."""
        req = None
        if self._open and read.timestamp - self._open[-1].timestamp >= self.config.delta_ms:
            req = self._close(read.timestamp)
        self._open.append(read)
        return req

    def advance(self, now: float) -> Optional[PrefetchRequest]:
        """Close the rolling partition once ``now`` is delta past its last read.

        The request is stamped with the earliest instant the quiet period was
        detectable, ``last read + delta``.
        """
        if self._open and now - self._open[-1].timestamp >= self.config.delta_ms:
            return self._close(self._open[-1].timestamp + self.config.delta_ms)
        return None

    def pending_close(self) -> Optional[float]:
        """Time at which the open partition would close if no read arrives."""
        if not self._open:
            return None
        return self._open[-1].timestamp + self.config.delta_ms

    def flush(self, now: Optional[float] = None) -> Optional[PrefetchRequest]:
        if not self._open:
            return None
        return self._close(self._open[-1].timestamp + self.config.delta_ms if now is None else now)

    def completed(self, blocks) -> None:
        """Fetcher callback: these blocks are no longer in flight."""
        self.inflight.difference_update(blocks)

    def is_queued(self, block: BlockId) -> bool:
        return block in self.inflight

    def evicted(self, blocks) -> None:
        # cache membership is checked directly, nothing to forget
        pass

    # -- internals -------------------------------------------------------

    def _close(self, now: float) -> Optional[PrefetchRequest]:
        reads, self._open = self._open, []
        self.counters.partitions_closed += 1
        hits = self.index.match(reads)
        if not hits:
            self.counters.unmatched += 1
            return None
        self.counters.matched += 1
        # most recently entered superblock; ties -> lowest id
        sid, entered = hits[0]
        for s, ts in hits[1:]:
            if ts > entered:
                sid, entered = s, ts
        self._enter(sid, entered)
        return self.prefetch_for(sid, now)

    def _enter(self, sid: int, entered: int) -> None:
        prev, prev_ts = self.state, self.state_entered
        if prev == sid:
            return
        if self.speed_adaptation and prev is not None:
            d = self.model.duration(prev, sid)
            if d is not None and d.mean > 0:
                self.speed = update_speed(self.speed, entered - prev_ts, d.mean)
        self.state, self.state_entered = sid, entered
        self.history.append((sid, entered))

    def prefetch_for(self, state: int, now: float) -> Optional[PrefetchRequest]:
        lookahead = effective_lookahead(self.config, self.speed)
        probs = predict(self.model, state, lookahead, self.config.p_stop)
        self.counters.predictions += 1
        return self.select(probs, now)

    def select(self, probs: Dict[int, float], now: float) -> Optional[PrefetchRequest]:
        """Apply the download threshold and drop blocks already present or queued."""
        chosen = sorted(
            (sid for sid, p in probs.items() if p >= self.config.p_download),
            key=lambda s: (-probs[s], s),
        )
        cache = self.cache
        pin = getattr(cache, "pin", None)
        blocks: List[BlockId] = []
        sources: List[int] = []
        inflight = self.inflight
        for sid in chosen:
            added = False
            for b in self._sorted_blocks[sid]:
                if b in inflight:
                    continue
                if cache is not None and cache.contains(b):
                    if pin is not None:
                        pin(b, now)
                    continue
                inflight.add(b)
                blocks.append(b)
                added = True
            if added:
                sources.append(sid)
        if not blocks:
            return None
        self.counters.requests += 1
        self.counters.blocks_requested += len(blocks)
        return PrefetchRequest(tuple(blocks), tuple(sources), now)
