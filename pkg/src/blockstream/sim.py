"""Trace-driven replay of a held-out run against a trained model.

Timing model
------------
* Trace time only advances with the trace. A miss stalls the application:
  the stall ``rtt + k * t_block`` for the k missing blocks of one read call
  is added to the delay and nothing else moves while it lasts, so speculative
  transfers are paused behind urgent ones.
* Speculative downloads form one pipelined FIFO: a block enqueued at ``e``
  arrives at ``max(e + rtt, previous arrival) + t_block``.
* A block requested urgently while still queued is cancelled from the queue.
* False positives: speculative downloads not read within ``fp_window`` of the
  prediction that queued them. Blocks still queued at the end of the run were
  never downloaded and count nowhere.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .baseline import PairEngine, PairModel, train_pair_model
from .bundle import ModelBundle, train_bundle
from .cache import BlockStore, CacheExhausted
from .config import PIN_TIMEOUT_MS, TRAINING_KEYS, SimConfig
from .predictor import PrefetchEngine
from .trace import BlockRead, Trace, expand_record

log = logging.getLogger(__name__)

SWEEP_HEADER = ("param", "value", "delay_ms", "false_positive_bytes", "hit_rate")


class SimulationError(RuntimeError):
    pass


@dataclass
class SimReport:
    trace_id: str = ""
    total_delay_ms: float = 0.0
    miss_bytes: int = 0
    hit_rate: float = 0.0
    false_positive_bytes: int = 0
    downloaded_bytes: int = 0
    speculative_bytes: int = 0
    urgent_bytes: int = 0
    accesses: int = 0
    resident_hits: int = 0
    temp_hits: int = 0
    misses: int = 0
    stalls: int = 0
    dropped_blocks: int = 0
    evictions: int = 0
    run_length_ms: int = 0
    runs: List["SimReport"] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def block_cost_ms(config: SimConfig) -> float:
    """Transfer time of one block on the configured link, in ms."""
    return config.block_size * 8 / config.bandwidth_bps * 1000.0


def urgent_cost_ms(config: SimConfig, blocks: int = 1) -> float:
    return config.rtt_ms + blocks * block_cost_ms(config)


def aggregate(reports: Sequence[SimReport]) -> SimReport:
    out = SimReport(trace_id="aggregate")
    for r in reports:
        for name in ("total_delay_ms", "miss_bytes", "false_positive_bytes", "downloaded_bytes",
                     "speculative_bytes", "urgent_bytes", "accesses", "resident_hits", "temp_hits",
                     "misses", "stalls", "dropped_blocks", "evictions", "run_length_ms"):
            setattr(out, name, getattr(out, name) + getattr(r, name))
    out.hit_rate = (out.resident_hits + out.temp_hits) / out.accesses if out.accesses else 0.0
    out.runs = list(reports)
    return out


def _check_manifest(bundle: ModelBundle, trace: Trace) -> None:
    for fid, size in trace.manifest.items():
        path = trace.files.path(fid)
        bfid = bundle.files.lookup(path)
        if bfid is None:
            raise SimulationError(f"trace file {path!r} is not part of the model's manifest")
        if bfid != fid:
            raise SimulationError(f"file id mismatch for {path!r}: trace {fid}, model {bfid}")
        if bundle.manifest.get(bfid) not in (None, size):
            raise SimulationError(f"size mismatch for {path!r}: trace {size}, model {bundle.manifest[bfid]}")
    for rec in trace.records:
        if rec.file_id >= len(bundle.files) or bundle.files.path(rec.file_id) != trace.files.path(rec.file_id):
            raise SimulationError(f"trace file {trace.files.path(rec.file_id)!r} unknown to the model")


class _Run:
    def __init__(self, bundle: ModelBundle, trace: Trace, config: SimConfig, pair_model: Optional[PairModel]):
        self.config = config
        self.trace = trace
        self.bs = config.block_size
        self.t_block = block_cost_ms(config)
        self.rtt = config.rtt_ms
        self.fp_window = config.fp_window_ms
        self.cache = BlockStore(temp_limit=config.temp_limit_bytes, block_size=self.bs, keep_data=False,
                                clock=lambda: 0.0)
        for b in bundle.resident_selection(config.b_initial_bytes):
            self.cache.add_resident(b)
        if pair_model is not None:
            self.engine = PairEngine(pair_model, self.cache)
        else:
            self.engine = PrefetchEngine(bundle.model, bundle.superblocks, config.predictor(),
                                         cache=self.cache, speed_adaptation=config.speed_adaptation)
        self.queue: deque = deque()
        self.cancelled: set = set()
        self.last_arrival = float("-inf")
        self.fp_pending: Dict = {}
        self.report = SimReport(trace_id=trace.trace_id)

    def enqueue(self, request, at: float) -> None:
        if request is None:
            return
        for b in request.blocks:
            self.queue.append((b, at))

    def deliver(self, up_to: float) -> None:
        q = self.queue
        rep = self.report
        while q:
            block, enq = q[0]
            if block in self.cancelled:
                q.popleft()
                self.cancelled.discard(block)
                continue
            arrival = max(enq + self.rtt, self.last_arrival) + self.t_block
            if arrival > up_to:
                break
            q.popleft()
            self.last_arrival = arrival
            rep.speculative_bytes += self.bs
            self.fp_pending.setdefault(block, []).append(enq)
            self.engine.completed((block,))
            self._insert(block, pinned=True, now=arrival)

    def _insert(self, block, pinned: bool, now: float) -> None:
        try:
            evicted = self.cache.insert(block, pinned=pinned, now=now)
        except CacheExhausted:
            self.cache.unpin_stale(PIN_TIMEOUT_MS, now)
            try:
                evicted = self.cache.insert(block, pinned=pinned, now=now)
            except CacheExhausted:
                self.report.dropped_blocks += 1
                return
        if evicted:
            self.report.evictions += len(evicted)
            self.engine.evicted(evicted)

    def run(self) -> SimReport:
        rep = self.report
        engine = self.engine
        cache = self.cache
        records = self.trace.records
        t0 = records[0].timestamp if records else 0
        for rec in records:
            t = rec.timestamp
            close = engine.pending_close()
            if close is not None and close <= t:
                self.deliver(close)
                cache.unpin_stale(PIN_TIMEOUT_MS, close)
                self.enqueue(engine.advance(close), close)
            self.deliver(t)
            missing = []
            reads = expand_record(rec, self.bs)
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
                pending = self.fp_pending.get(b)
                if pending:
                    keep = [p for p in pending if not (p <= t <= p + self.fp_window)]
                    if keep:
                        self.fp_pending[b] = keep
                    else:
                        del self.fp_pending[b]
            if missing:
                rep.misses += len(missing)
                rep.stalls += 1
                rep.total_delay_ms += self.rtt + len(missing) * self.t_block
                for b in missing:
                    if engine.is_queued(b):
                        self.cancelled.add(b)
                        engine.completed((b,))
                    self._insert(b, pinned=False, now=t)
            for br in reads:
                self.enqueue(engine.observe(br), t)
        rep.miss_bytes = rep.misses * self.bs
        rep.urgent_bytes = rep.miss_bytes
        rep.downloaded_bytes = rep.speculative_bytes + rep.urgent_bytes
        rep.false_positive_bytes = sum(len(v) for v in self.fp_pending.values()) * self.bs
        rep.hit_rate = (rep.resident_hits + rep.temp_hits) / rep.accesses if rep.accesses else 0.0
        rep.run_length_ms = (records[-1].timestamp - t0) if records else 0
        return rep


def simulate(bundle: ModelBundle, trace: Trace, config: SimConfig,
             pair_model: Optional[PairModel] = None) -> SimReport:
    """Replay one trace. Deterministic for fixed inputs."""
    if config.block_size != bundle.block_size:
        raise SimulationError(f"block size {config.block_size} != model block size {bundle.block_size}")
    _check_manifest(bundle, trace)
    return _Run(bundle, trace, config, pair_model).run()


def simulate_runs(bundle: ModelBundle, traces: Sequence[Trace], config: SimConfig,
                  pair_model: Optional[PairModel] = None) -> SimReport:
    return aggregate([simulate(bundle, t, config, pair_model) for t in traces])


# -- sweeps ---------------------------------------------------------------


def _sweep_point(args) -> Tuple[str, object, SimReport]:
    bundle, test_traces, config, param, value, baseline, train_traces = args
    if bundle is None:
        bundle = train_bundle(train_traces, config)
    pair = train_pair_model(train_traces, config.lookahead_ms, config.block_size) if baseline else None
    return param, value, simulate_runs(bundle, test_traces, config, pair)


def sweep(train_traces: Sequence[Trace], test_traces: Sequence[Trace], base_config: SimConfig,
          grid: Dict[str, Sequence], bundle: Optional[ModelBundle] = None, workers: int = 1,
          baseline: bool = False) -> List[Tuple[str, object, SimReport]]:
    """Vary one parameter at a time around ``base_config``.

    Training-side parameters retrain the model for their grid point; everything
    else reuses ``bundle`` (trained once from ``train_traces`` if not given).
    """
    if not grid or not any(grid.values()):
        raise ValueError("sweep grid is empty")
    if bundle is None:
        bundle = train_bundle(train_traces, base_config)
    jobs = []
    for param in grid:
        for value in grid[param]:
            cfg = base_config.replace(**{param: value})
            retrain = param in TRAINING_KEYS
            jobs.append((None if retrain else bundle, test_traces, cfg, param, value, baseline, train_traces))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_point, jobs))
    return [_sweep_point(j) for j in jobs]


def sweep_rows(results: Iterable[Tuple[str, object, SimReport]]) -> List[Tuple]:
    return [(p, v, round(r.total_delay_ms, 6), r.false_positive_bytes, round(r.hit_rate, 9)) for p, v, r in results]


def sweep_csv(results: Iterable[Tuple[str, object, SimReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    w.writerows(sweep_rows(results))
    return buf.getvalue()
