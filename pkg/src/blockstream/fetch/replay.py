"""Replay a trace in (scaled) real time against a live block server.

Mirrors the simulator's loop with real components: the predictor feeds a
FetchQueue drained by a SpeculativeFetcher, misses go through a blocking
urgent fetch, and trace time stands still while the read path is stalled.

With ``time_scale = s`` the trace runs s times faster than recorded. The
server should then be started with ``rtt / s`` and ``bandwidth * s`` so the
link looks the same in trace time; measured stalls are multiplied back by
``s`` before they are reported.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from ..baseline import PairEngine, PairModel
from ..bundle import ModelBundle
from ..cache import BlockStore
from ..config import PIN_TIMEOUT_MS, SimConfig
from ..predictor import PrefetchEngine
from ..sim import SimReport, SimulationError, _check_manifest
from ..trace import Trace, expand_record
from .client import BlockClient, SpeculativeFetcher
from .queue import FetchQueue

log = logging.getLogger(__name__)

RESIDENT_CHUNK = 256


class TraceClock:
    """Trace milliseconds derived from the wall clock, frozen during stalls."""

    def __init__(self, t0: float, scale: float = 1.0):
        if scale <= 0:
            raise ValueError("time scale must be positive")
        self.t0 = t0
        self.scale = scale
        self.start = time.monotonic()
        self.stalled = 0.0
        self._frozen: Optional[float] = None
        self._frozen_wall = 0.0

    def now(self) -> float:
        frozen = self._frozen
        if frozen is not None:
            return frozen
        return self.t0 + (time.monotonic() - self.start - self.stalled) * 1000.0 * self.scale

    def wall_for(self, t: float) -> float:
        return self.start + self.stalled + (t - self.t0) / (1000.0 * self.scale)

    def sleep_until(self, t: float) -> None:
        delay = self.wall_for(t) - time.monotonic()
        if delay > 0:
            time.sleep(delay)

    def freeze(self, t: float) -> None:
        self._frozen_wall = time.monotonic()
        self._frozen = t

    def thaw(self) -> float:
        """Unfreeze; returns the stall length in trace ms."""
        wall = time.monotonic() - self._frozen_wall
        self.stalled += wall
        self._frozen = None
        return wall * 1000.0 * self.scale


@dataclass
class LiveReport(SimReport):
    time_scale: float = 1.0
    urgent_latencies_ms: List[float] = field(default_factory=list)
    urgent_retries: int = 0
    speculative_failures: int = 0


def replay_live(bundle: ModelBundle, trace: Trace, config: SimConfig, address: Tuple[str, int],
                time_scale: float = 1.0, pair_model: Optional[PairModel] = None,
                batch_blocks: int = 16, window_blocks: int = 256) -> LiveReport:
    """Run one trace against a server; metrics use the simulator's definitions."""
    if config.block_size != bundle.block_size:
        raise SimulationError(f"block size {config.block_size} != model block size {bundle.block_size}")
    _check_manifest(bundle, trace)
    bs = config.block_size
    records = trace.records
    rep = LiveReport(trace_id=trace.trace_id, time_scale=time_scale)
    if not records:
        return rep

    cache = BlockStore(temp_limit=config.temp_limit_bytes, block_size=bs)
    urgent = BlockClient(address, cache, bs)
    urgent.connect()
    resident = bundle.resident_selection(config.b_initial_bytes)
    for i in range(0, len(resident), RESIDENT_CHUNK):
        chunk = resident[i:i + RESIDENT_CHUNK]
        got = urgent.fetch_urgent(chunk, insert=False)
        for b in chunk:
            cache.add_resident(b, got[b])
    urgent.latencies_ms.clear()

    if pair_model is not None:
        engine = PairEngine(pair_model, cache)
    else:
        engine = PrefetchEngine(bundle.model, bundle.superblocks, config.predictor(), cache=cache,
                                speed_adaptation=config.speed_adaptation)
    lock = threading.RLock()
    fp_pending = {}

    def release(block):
        with lock:
            engine.completed((block,))

    def arrived(block, issued_at):
        with lock:
            rep.speculative_bytes += bs
            fp_pending.setdefault(block, []).append(issued_at)
            engine.completed((block,))

    queue = FetchQueue(on_drop=release)
    t0 = records[0].timestamp
    clock = TraceClock(t0, time_scale)
    urgent.clock = clock.now
    fetcher = SpeculativeFetcher(address, queue, cache, bs, batch_blocks=batch_blocks,
                                 window_blocks=window_blocks, on_block=arrived, on_give_up=release,
                                 clock=clock.now).start()

    def submit(req):
        if req is not None:
            dropped_before = queue.dropped
            queue.put(req.blocks, req.issued_at)
            rep.dropped_blocks += queue.dropped - dropped_before

    try:
        for rec in records:
            t = rec.timestamp
            with lock:
                close = engine.pending_close()
            if close is not None and close <= t:
                clock.sleep_until(close)
                with lock:
                    cache.unpin_stale(PIN_TIMEOUT_MS, close)
                    submit(engine.advance(close))
            clock.sleep_until(t)
            reads = expand_record(rec, bs)
            missing = []
            with lock:
                for br in reads:
                    b = br.block
                    rep.accesses += 1
                    hit = cache.read(b)
                    if hit is None:
                        missing.append(b)
                    elif hit.resident:
                        rep.resident_hits += 1
                    else:
                        rep.temp_hits += 1
                    pending = fp_pending.get(b)
                    if pending:
                        keep = [p for p in pending if not (p <= t <= p + config.fp_window_ms)]
                        if keep:
                            fp_pending[b] = keep
                        else:
                            del fp_pending[b]
                if missing:
                    for b in missing:
                        if engine.is_queued(b) and queue.cancel(b):
                            engine.completed((b,))
            if missing:
                rep.misses += len(missing)
                rep.stalls += 1
                clock.freeze(t)
                try:
                    urgent.fetch_urgent(missing)
                finally:
                    rep.total_delay_ms += clock.thaw()
            with lock:
                for br in reads:
                    submit(engine.observe(br))
    finally:
        fetcher.stop()
        urgent.close()
    rep.miss_bytes = rep.misses * bs
    rep.urgent_bytes = rep.miss_bytes
    rep.downloaded_bytes = rep.speculative_bytes + rep.urgent_bytes
    rep.false_positive_bytes = sum(len(v) for v in fp_pending.values()) * bs
    rep.hit_rate = (rep.resident_hits + rep.temp_hits) / rep.accesses if rep.accesses else 0.0
    rep.run_length_ms = records[-1].timestamp - t0
    rep.evictions = cache.stats.evictions
    rep.urgent_latencies_ms = list(urgent.latencies_ms)
    rep.urgent_retries = urgent.retries
    rep.speculative_failures = fetcher.failures
    return rep
